"""One round of continual learning: joint training, pruning, fine-tuning and NME inference."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .losses import (LossBreakdown, combined_aux_loss, cross_entropy, distillation_loss,
                     multi_teacher_distillation_loss, total_loss)
from .nets import (AuxModel, FusionClassifier, MaskedFeatureExtractor, build_fusion_model,
                   deployed_param_count, freeze, param_count, save_round_checkpoint,
                   trainable_parameters)
from .pruning import PruneStats, binarize_masks, prune_current, prune_stats
from .reports import RoundReport, overall_accuracy
from .stream import Dataset, ExemplarMemory, horizontal_flip, iter_batches, to_tensor_batch, update_memory

logger = logging.getLogger(__name__)


class InvalidConfig(ValueError):
    pass


@dataclass
class TrainConfig:
    lam1: float = 1.0
    lam2: float = 0.1
    T: float = 2.0
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    finetune_epochs: int = 100
    patience: int = 10
    fusion_mode: str = "concat"
    d: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    batch_norm: bool = True
    augment_flip: bool = False
    mask_thresholds: list[float | None] | None = None
    refit_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.validate()

    def validate(self):
        if self.T < 1:
            raise InvalidConfig(f"temperature must be >= 1, got {self.T}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if self.fusion_mode not in ("concat", "average"):
            raise InvalidConfig(f"unknown fusion mode {self.fusion_mode!r}")
        if self.batch_size < 2 or self.lr <= 0 or self.d < 1 or self.max_epochs < 1:
            raise InvalidConfig("batch_size >= 2, lr > 0, d >= 1 and max_epochs >= 1 required")
        if self.finetune_epochs < 0 or self.patience < 1:
            raise InvalidConfig("finetune_epochs >= 0 and patience >= 1 required")
        if not self.widths or min(self.widths) < 1:
            raise InvalidConfig("widths must be positive")
        if self.mask_thresholds is not None and len(self.mask_thresholds) != len(self.widths):
            raise InvalidConfig("one mask threshold per layer required")


@dataclass(frozen=True)
class MethodFlags:
    """Which parts of the method are active; the ablation switches."""

    fusion: bool = True
    transforms: bool = True
    masks: bool = True
    freeze_old: bool = True
    multi_teacher: bool = False

    def validate(self) -> "MethodFlags":
        if not self.fusion:
            if self.transforms:
                raise InvalidConfig("per-extractor transforms require fusion")
            if self.masks:
                raise InvalidConfig("kernel masks require fusion")
            if not self.freeze_old:
                raise InvalidConfig("unfreezing old extractors requires fusion")
        elif self.multi_teacher:
            raise InvalidConfig("multi-teacher distillation is a single-model mode; disable fusion")
        return self


FULL = MethodFlags()
PRESETS = {
    "none": MethodFlags(fusion=False, transforms=False, masks=False),
    "fusion": MethodFlags(transforms=False, masks=False),
    "fusion+FC": MethodFlags(masks=False),
    "fusion+FC+mask": FULL,
    "unfrozen": MethodFlags(freeze_old=False),
    "multi-teacher-single-model": MethodFlags(fusion=False, transforms=False, masks=False,
                                              multi_teacher=True),
}


@dataclass
class SystemState:
    config: TrainConfig
    flags: MethodFlags
    memory: ExemplarMemory
    in_channels: int = 3
    t: int = 0
    round_sizes: list[int] = field(default_factory=list)
    extractors: list[MaskedFeatureExtractor] = field(default_factory=list)
    model: FusionClassifier | None = None
    teachers: list[AuxModel] = field(default_factory=list)
    base_params: int | None = None
    pruned: bool = False
    telemetry: dict = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def seen(self) -> int:
        return sum(self.round_sizes)

    @property
    def teacher(self) -> AuxModel | None:
        return self.teachers[-1] if self.teachers else None


def new_state(config: TrainConfig, flags: MethodFlags, budget: int, in_channels: int = 3,
              out_dir=None) -> SystemState:
    flags.validate()
    return SystemState(config, flags, ExemplarMemory(budget), in_channels,
                       out_dir=None if out_dir is None else Path(out_dir))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------
# model assembly and loss


def assemble_round_model(state: SystemState, c_t: int) -> FusionClassifier:
    """Round model over u + c_t classes, where u counts classes before this round
    (``state.round_sizes`` does not include c_t yet)."""
    cfg, flags = state.config, state.flags
    u = state.seen
    prev = state.model
    if flags.fusion:
        current = MaskedFeatureExtractor(state.in_channels, cfg.widths, batch_norm=cfg.batch_norm,
                                         masked=flags.masks)
        transforms = list(prev.transforms) if (prev is not None and prev.transforms is not None) else []
        return build_fusion_model(
            state.extractors, transforms, current, cfg.d, u, c_t, cfg.fusion_mode,
            use_transforms=flags.transforms, freeze_old=flags.freeze_old, fusion=True,
            head=None if prev is None else prev.head,
        )
    if prev is None:
        current = MaskedFeatureExtractor(state.in_channels, cfg.widths, batch_norm=cfg.batch_norm,
                                         masked=False)
    else:
        current = copy.deepcopy(prev.current)
    return build_fusion_model([], None, current, cfg.d, u, c_t, cfg.fusion_mode,
                              use_transforms=False, fusion=False,
                              head=None if prev is None else prev.head)


def round_loss(model: FusionClassifier, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig,
               teacher_logits: Sequence[torch.Tensor] | None = None,
               old_pooled: list[torch.Tensor] | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    """Total training loss of one batch and its breakdown.

    Fusion models: L = L_f + lam2 * (L_o + lam1 * L_d), with L_o and L_d on the
    auxiliary head. Single models: the head is both classifiers, L_f = 0 and
    L = L_o + lam1 * L_d. ``teacher_logits`` holds one tensor per teacher; more
    than one triggers the averaged multi-teacher term.
    """
    pooled = None if old_pooled is None else list(old_pooled) + [model.current(x)]
    if pooled is None:
        pooled = model.pooled(x)
    fused = model.head(model.fused_features(x, pooled=pooled))
    if model.aux_head is not None:
        student = model.aux_head(pooled[-1])
        L_f = cross_entropy(fused, y)
        lam2 = cfg.lam2
    else:
        student = fused
        L_f = fused.new_zeros(())
        lam2 = 1.0
    L_o = cross_entropy(student, y)
    if teacher_logits:
        if len(teacher_logits) == 1:
            z = teacher_logits[0]
            L_d = distillation_loss(z, student, z.shape[1], cfg.T)
        else:
            L_d = multi_teacher_distillation_loss(teacher_logits, student, cfg.T)
    else:
        L_d = fused.new_zeros(())
    L_s = combined_aux_loss(L_o, L_d, cfg.lam1)
    L = total_loss(L_f, L_s, lam2)
    return L, LossBreakdown(*(float(v.detach()) for v in (L_d, L_o, L_s, L_f, L)))


# --------------------------------------------------------------------------
# training


def _teacher_set(state: SystemState) -> list[AuxModel]:
    if not state.teachers:
        return []
    return list(state.teachers) if state.flags.multi_teacher else [state.teachers[-1]]


@torch.no_grad()
def _batched(fn, x: torch.Tensor, size: int = 512) -> torch.Tensor:
    return torch.cat([fn(x[i : i + size]) for i in range(0, len(x), size)])


def _fit(state: SystemState, data: Dataset, max_epochs: int, phase: str) -> int:
    if len(data) == 0:
        raise ValueError("empty round data")
    cfg, model = state.config, state.model
    x_all = to_tensor_batch(data.images)
    y_all = torch.from_numpy(data.labels)
    teachers = _teacher_set(state)
    for t in teachers:
        t.eval()
    # without augmentation, fixed networks can be evaluated once per phase
    cached = not cfg.augment_flip
    t_logits = [_batched(t, x_all) for t in teachers] if cached else None
    frozen_old = all(e.frozen for e in model.old)
    old_cache = ([_batched(e, x_all) for e in model.old]
                 if cached and frozen_old else None)

    params = trainable_parameters(model)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(_seed(cfg.seed, state.t, 1 if phase == "joint" else 2))
    log = state.telemetry.setdefault((state.t, phase), [])
    best, stale, epochs = np.inf, 0, 0
    for epoch in range(max_epochs):
        model.train()
        total, count = 0.0, 0
        for idx in iter_batches(len(data), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            idx_t = torch.from_numpy(idx)
            if cached:
                x = x_all[idx_t]
                z = [zz[idx_t] for zz in t_logits]
                old = None if old_cache is None else [p[idx_t] for p in old_cache]
            else:
                x = to_tensor_batch(horizontal_flip(data.images[idx], rng))
                with torch.no_grad():
                    z = [t(x) for t in teachers]
                old = None
            L, parts = round_loss(model, x, y_all[idx_t], cfg, z, old)
            opt.zero_grad()
            L.backward()
            opt.step()
            log.append(parts)
            total += parts.L * len(idx)
            count += len(idx)
        epochs = epoch + 1
        mean = total / max(count, 1)
        if not np.isfinite(best) or mean < best - 1e-4 * abs(best):
            best, stale = mean, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.eval()
    return epochs


def train_round_joint(state: SystemState, data: Dataset) -> int:
    """Minimise the round loss over memory + new-class data; returns epochs run."""
    if state.model is None:
        raise RuntimeError("no round model assembled")
    state.pruned = False
    return _fit(state, data, state.config.max_epochs, "joint")


def finetune_pruned(state: SystemState, data: Dataset) -> int:
    if not state.pruned:
        raise RuntimeError("fine-tuning requires a pruned current extractor")
    if state.config.finetune_epochs == 0:
        return 0
    return _fit(state, data, state.config.finetune_epochs, "finetune")


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def fused_feature_matrix(model: FusionClassifier, images: np.ndarray,
                         include: Sequence[int] | None = None, batch: int = 512) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        out.append(model.fused_features(to_tensor_batch(images[i : i + batch]), include))
    return torch.cat(out).double().numpy()


def _l2(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(n, 1e-12)


def class_means(features_by_class: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    classes = sorted(features_by_class)
    for c in classes:
        if len(features_by_class[c]) == 0:
            raise RuntimeError(f"class {c} has no exemplars")
    means = np.stack([_l2(_l2(features_by_class[c]).mean(axis=0)) for c in classes])
    return classes, means


def nme_classify(features: np.ndarray, classes: Sequence[int], means: np.ndarray) -> np.ndarray:
    f = _l2(np.asarray(features, dtype=np.float64))
    d2 = ((f[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return np.asarray(classes)[np.argmin(d2, axis=1)]


def nme_predict(model: FusionClassifier, memory: ExemplarMemory, images: np.ndarray,
                include: Sequence[int] | None = None) -> np.ndarray:
    """Nearest mean of exemplars in the fused (transformed) feature space."""
    if not memory.images:
        raise RuntimeError("memory holds no exemplars")
    feats = {c: fused_feature_matrix(model, imgs, include) for c, imgs in memory.images.items()}
    classes, means = class_means(feats)
    return nme_classify(fused_feature_matrix(model, images, include), classes, means)


def refit_head(model: FusionClassifier, memory: ExemplarMemory, include: Sequence[int],
               epochs: int, seed: int) -> nn.Linear:
    """Linear head trained on frozen fused exemplar features only."""
    mem = memory.as_dataset(model.num_classes)
    x = torch.from_numpy(fused_feature_matrix(model, mem.images, include)).float()
    y = torch.from_numpy(mem.labels)
    g = torch.Generator().manual_seed(seed)
    head = nn.Linear(x.shape[1], model.num_classes)
    with torch.no_grad():
        bound = 1 / np.sqrt(x.shape[1])
        head.weight.uniform_(-bound, bound, generator=g)
        head.bias.uniform_(-bound, bound, generator=g)
    opt = torch.optim.Adam(head.parameters(), lr=1e-2)
    for _ in range(epochs):
        opt.zero_grad()
        cross_entropy(head(x), y).backward()
        opt.step()
    return head


# --------------------------------------------------------------------------
# the round


def _subset_acc(pred: np.ndarray, labels: np.ndarray, offsets: Sequence[int]) -> dict[int, float]:
    out = {}
    for k in range(1, len(offsets)):
        sel = (labels >= offsets[k - 1]) & (labels < offsets[k])
        if sel.any():
            out[k] = overall_accuracy(pred[sel], labels[sel])
    return out


def probe_includes(t: int, probes: Sequence[str]) -> dict[str, list[int]]:
    """Extractor subsets (0-based indices) for the inference-time probes valid at round t."""
    out = {}
    for name in probes:
        if name == "current-only":
            if t >= 2:
                out[name] = [t - 1]
            continue
        kind, _, k = name.rpartition("-")
        k = int(k)
        if kind == "drop-extractor" and t >= 2 and k <= t:
            out[name] = [i for i in range(t) if i != k - 1]
        elif kind == "keep-only-extractor" and k <= t and t >= 2:
            out[name] = [k - 1]
        elif kind not in ("drop-extractor", "keep-only-extractor"):
            raise InvalidConfig(f"unknown probe {name!r}")
    return out


def evaluate(state: SystemState, test_seen: Dataset, probes: Sequence[str] = ()) -> dict:
    model, memory = state.model, state.memory
    offsets = np.concatenate([[0], np.cumsum(state.round_sizes)])
    labels = test_seen.labels
    mem_feats = {c: fused_feature_matrix(model, imgs) for c, imgs in memory.images.items()}
    classes, means = class_means(mem_feats)
    pred = nme_classify(fused_feature_matrix(model, test_seen.images), classes, means)
    with torch.no_grad():
        model.eval()
        logits = _batched(model, to_tensor_batch(test_seen.images))
    head_pred = logits.argmax(1).numpy()
    out = {
        "accuracy": overall_accuracy(pred, labels),
        "subset_accuracy": _subset_acc(pred, labels, offsets),
        "head_accuracy": overall_accuracy(head_pred, labels),
        "head_subset_accuracy": _subset_acc(head_pred, labels, offsets),
        "subset_classes": {k: int(offsets[k] - offsets[k - 1]) for k in range(1, len(offsets))},
        "probes": {},
    }
    if model.fusion:
        for name, include in probe_includes(state.t, probes).items():
            p = nme_predict(model, memory, test_seen.images, include)
            head = refit_head(model, memory, include, state.config.refit_epochs,
                              _seed(state.config.seed, state.t, 7))
            with torch.no_grad():
                f = torch.from_numpy(fused_feature_matrix(model, test_seen.images, include)).float()
                hp = head(f).argmax(1).numpy()
            out["probes"][name] = {
                "include": include,
                "accuracy": overall_accuracy(p, labels),
                "subset_accuracy": _subset_acc(p, labels, offsets),
                "head_refit_accuracy": overall_accuracy(hp, labels),
                "head_refit": "linear head re-fit on exemplar features only",
            }
    return out


@torch.no_grad()
def _head_accuracy(model: FusionClassifier, data: Dataset) -> float:
    model.eval()
    pred = _batched(model, to_tensor_batch(data.images)).argmax(1).numpy()
    return overall_accuracy(pred, data.labels)


@torch.no_grad()
def _herding_features(extractor: MaskedFeatureExtractor, images: np.ndarray) -> np.ndarray:
    extractor.eval()
    f = _batched(extractor, to_tensor_batch(images)).double().numpy()
    return _l2(f)


def run_round(state: SystemState, train_new: Dataset, test_seen: Dataset,
              probes: Sequence[str] = ()) -> tuple[SystemState, RoundReport]:
    """extend heads -> joint train -> binarize -> prune -> fine-tune -> freeze ->
    store teacher -> update memory -> report."""
    new = np.unique(train_new.labels)
    u = state.seen
    c_t = len(new)
    if c_t == 0:
        raise ValueError("empty round data")
    if new.min() < u:
        raise ValueError(f"round classes {new.tolist()} overlap the {u} seen classes")
    if new.tolist() != list(range(u, u + c_t)):
        raise ValueError(f"new classes must be the contiguous block [{u}, {u + c_t})")
    cfg, flags = state.config, state.flags
    state.t += 1
    t = state.t
    torch.manual_seed(_seed(cfg.seed, t))
    state.model = assemble_round_model(state, c_t)
    state.round_sizes.append(c_t)
    model = state.model
    if t == 1:
        # round-1 unpruned backbone, counted without mask logits
        state.base_params = param_count(model.current) - sum(
            l.mask_logits.numel() for l in model.current.layers if l.masked)

    data = train_new if not state.memory.images else Dataset.concat(
        [state.memory.as_dataset(u + c_t), train_new])
    epochs = {"joint": train_round_joint(state, data)}
    stats: PruneStats | None = None
    masks = None
    finetune_acc = None
    if flags.masks:
        before = copy.deepcopy(model.current)
        masks = binarize_masks(model.current, cfg.mask_thresholds)
        prune_current(model, masks)
        state.pruned = True
        stats = prune_stats(before, model.current)
        after_surgery = _head_accuracy(model, test_seen)
        epochs["finetune"] = finetune_pruned(state, data)
        finetune_acc = (after_surgery, _head_accuracy(model, test_seen))

    # carry forward: frozen extractor and the next teacher
    if flags.fusion:
        state.extractors = list(model.old) + [freeze(model.current)]
        teacher = AuxModel(copy.deepcopy(model.current), copy.deepcopy(model.aux_head))
    else:
        teacher = AuxModel(copy.deepcopy(model.current), copy.deepcopy(model.head))
    freeze(teacher.extractor)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    state.teachers.append(teacher)

    per_class = {}
    for c in new:
        imgs = train_new.images[train_new.labels == c]
        per_class[int(c)] = (imgs, _herding_features(model.current, imgs))
    state.memory = update_memory(state.memory, per_class, u + c_t)

    ev = evaluate(state, test_seen, probes)
    ext_params = [param_count(e) for e in model.extractors]
    losses = {}
    for phase in epochs:
        log = state.telemetry.get((t, phase), [])
        if log:
            tail = log[-max(1, int(np.ceil(len(data) / cfg.batch_size))):]
            losses[phase] = {k: float(np.mean([getattr(b, k) for b in tail]))
                             for k in ("L", "L_f", "L_s", "L_o", "L_d")}
    report = RoundReport(
        round=t,
        seen_classes=u + c_t,
        accuracy=ev["accuracy"],
        subset_accuracy=ev["subset_accuracy"],
        subset_classes=ev["subset_classes"],
        head_accuracy=ev["head_accuracy"],
        head_subset_accuracy=ev["head_subset_accuracy"],
        param_count=deployed_param_count(model),
        extractor_params=ext_params,
        transform_params=param_count(model.transforms),
        head_params=param_count(model.head),
        size_ratio=deployed_param_count(model) / state.base_params,
        prune=None if stats is None else dict(
            stats.as_dict(), head_acc_after_surgery=finetune_acc[0],
            head_acc_after_finetune=finetune_acc[1]),
        losses=losses,
        epochs=epochs,
        probes=ev["probes"],
        memory_size=len(state.memory),
    )
    if state.out_dir is not None:
        lineage = [{"extractor": i, "round": i + 1} for i in range(model.num_extractors)]
        d = save_round_checkpoint(state.out_dir / f"round_{t:02d}", model, teacher,
                                  None if masks is None else masks.as_dict(), lineage)
        (d / "report.json").write_text(report.to_json() + "\n")
    logger.info("round %d: NME acc %.4f, head acc %.4f, params %d", t, report.accuracy,
                report.head_accuracy, report.param_count)
    return state, report


def run_continual(stream, config: TrainConfig, flags: MethodFlags, budget: int,
                  probes: Sequence[str] = (), out_dir=None, rounds: int | None = None,
                  in_channels: int | None = None) -> tuple[SystemState, list[RoundReport]]:
    """Run every round of ``stream`` (a TaskStream with data attached)."""
    ch = in_channels or stream.train_data(1).images.shape[-1]
    state = new_state(config, flags, budget, ch, out_dir)
    reports = []
    for t in range(1, (rounds or stream.num_rounds) + 1):
        state, rep = run_round(state, stream.train_data(t), stream.test_seen(t), probes)
        reports.append(rep)
    return state, reports


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d


__all__ = [
    "FULL", "InvalidConfig", "MethodFlags", "PRESETS", "SystemState", "TrainConfig",
    "assemble_round_model", "evaluate", "finetune_pruned", "new_state", "nme_predict",
    "round_loss", "run_continual", "run_round", "train_round_joint",
]
