"""Masked convolutional feature extractors and the fusion classifier."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_MODES = ("concat", "average")


def mask_values(logits: torch.Tensor) -> torch.Tensor:
    """Kernel importances: softmax of the learnable mask logits."""
    if logits.numel() == 0:
        raise ValueError("mask logits must be non-empty")
    return torch.softmax(logits, dim=-1)


class MaskedConvLayer(nn.Module):
    """Convolution (+ optional batch norm) whose output channels carry a soft mask.

    The mask multiplies the complete per-channel output, after bias and
    normalisation, so a zero mask entry silences its channel exactly.
    ``mask_logits`` is ``None`` for unmasked (plain or already pruned) layers.
    ``gain`` is a constant multiplier on the mask; ``gain=out_channels`` keeps
    the zero-logit layer at unit scale.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 batch_norm: bool = True, masked: bool = True, bias: bool = True,
                 gain: float = 1.0):
        super().__init__()
        self.gain = float(gain)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2,
                              bias=bias)
        self.bn = nn.BatchNorm2d(out_channels) if batch_norm else None
        if masked:
            self.mask_logits = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("mask_logits", None)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    @property
    def masked(self) -> bool:
        return self.mask_logits is not None

    def mask(self) -> torch.Tensor | None:
        return mask_values(self.mask_logits) if self.masked else None

    def channel_scale(self) -> torch.Tensor | None:
        """What the forward pass multiplies each output channel by."""
        return self.gain * self.mask() if self.masked else None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        m = self.channel_scale() if mask is None else mask
        if m is not None:
            y = y * m.to(y.dtype).view(1, -1, 1, 1)
        return y


def masked_forward(layer: MaskedConvLayer, x: torch.Tensor, mask: torch.Tensor | None = None):
    return layer(x, mask)


class MaskedFeatureExtractor(nn.Module):
    """Stack of masked conv layers, each followed by ReLU and 2x2 max pooling,
    then global average pooling to a ``output_dim`` vector."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64),
                 kernel_size: int = 3, batch_norm: bool = True, masked: bool = True,
                 pool: bool = True, bias: bool = True, unit_gain: bool = True):
        super().__init__()
        self.unit_gain = unit_gain
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.batch_norm = batch_norm
        self.pool = pool
        self.bias = bias
        layers, c = [], in_channels
        for w in widths:
            layers.append(MaskedConvLayer(c, w, kernel_size, batch_norm, masked, bias,
                                          gain=w if unit_gain else 1.0))
            c = w
        self.layers = nn.ModuleList(layers)
        self.frozen = False

    @property
    def widths(self) -> list[int]:
        return [layer.out_channels for layer in self.layers]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_channels

    @property
    def masked(self) -> bool:
        return any(layer.masked for layer in self.layers)

    def arch(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": self.widths,
            "kernel_size": self.kernel_size,
            "batch_norm": self.batch_norm,
            "masked": [layer.masked for layer in self.layers],
            "pool": self.pool,
            "bias": self.bias,
            "unit_gain": self.unit_gain,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "MaskedFeatureExtractor":
        ext = cls(arch["in_channels"], arch["widths"], arch["kernel_size"], arch["batch_norm"],
                  masked=True, pool=arch["pool"], bias=arch.get("bias", True),
                  unit_gain=arch.get("unit_gain", True))
        for layer, m in zip(ext.layers, arch["masked"]):
            if not m:
                layer.mask_logits = None
        return ext

    def train(self, mode: bool = True):
        # frozen extractors always run with their stored normalisation statistics
        return super().train(mode and not self.frozen)

    def forward(self, x: torch.Tensor, masks: Sequence[torch.Tensor | None] | None = None):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x, None if masks is None else masks[i]))
            if self.pool:
                x = F.max_pool2d(x, 2)
        return x.mean(dim=(2, 3))


def extract_features(extractor: MaskedFeatureExtractor, batch: torch.Tensor) -> torch.Tensor:
    """Pooled features in evaluation mode; restores the previous mode."""
    was_training = extractor.training
    extractor.eval()
    try:
        with torch.no_grad():
            return extractor(batch)
    finally:
        extractor.train(was_training)


def freeze(extractor: nn.Module) -> nn.Module:
    for p in extractor.parameters():
        p.requires_grad_(False)
    extractor.frozen = True
    extractor.eval()
    return extractor


def unfreeze(extractor: nn.Module) -> nn.Module:
    for p in extractor.parameters():
        p.requires_grad_(True)
    extractor.frozen = False
    return extractor


def extend_linear(old: nn.Linear | None, in_features: int, out_features: int) -> nn.Linear:
    """Fresh linear layer with the overlapping block copied from ``old``."""
    new = nn.Linear(in_features, out_features)
    if old is not None:
        o, i = min(old.out_features, out_features), min(old.in_features, in_features)
        with torch.no_grad():
            new.weight[:o, :i] = old.weight[:o, :i]
            new.bias[:o] = old.bias[:o]
    return new


class FusionClassifier(nn.Module):
    """Frozen old extractors + current extractor, fused into one head.

    With ``fusion=False`` this degenerates to a single CNN classifier: the
    current extractor feeds ``head`` directly and there is no auxiliary head.
    """

    def __init__(self, old_extractors: Sequence[MaskedFeatureExtractor],
                 old_transforms: Sequence[nn.Linear] | None, current: MaskedFeatureExtractor,
                 num_classes: int, d: int = 64, fusion_mode: str = "concat",
                 use_transforms: bool = True, freeze_old: bool = True, fusion: bool = True,
                 head: nn.Linear | None = None, aux_head: nn.Linear | None = None):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion_mode!r}")
        if not fusion and old_extractors:
            raise ValueError("single-model classifier cannot hold old extractors")
        self.fusion = fusion
        self.fusion_mode = fusion_mode
        self.use_transforms = use_transforms and fusion
        self.freeze_old = freeze_old
        self.num_classes = num_classes
        self.d = d
        self.old = nn.ModuleList(old_extractors)
        for ext in self.old:
            freeze(ext) if freeze_old else unfreeze(ext)
        self.current = current
        if self.use_transforms:
            olds = list(old_transforms or [])
            if len(olds) != len(self.old):
                raise ValueError("need one transform per old extractor")
            for tr in olds:
                if tr.out_features != d:
                    raise ValueError(f"transform output {tr.out_features} != common dimension {d}")
            self.transforms = nn.ModuleList(olds + [nn.Linear(current.output_dim, d)])
        else:
            self.transforms = None
        dims = self.branch_dims()
        if fusion_mode == "average" and len(set(dims)) > 1:
            raise ValueError(f"average fusion needs equal branch dimensions, got {dims}")
        fused_dim = sum(dims) if fusion_mode == "concat" else dims[0]
        self.head = extend_linear(head, fused_dim, num_classes)
        self.aux_head = extend_linear(aux_head, current.output_dim, num_classes) if fusion else None

    @property
    def extractors(self) -> list[MaskedFeatureExtractor]:
        return list(self.old) + [self.current]

    @property
    def num_extractors(self) -> int:
        return len(self.old) + 1

    def branch_dims(self) -> list[int]:
        if self.transforms is not None:
            return [tr.out_features for tr in self.transforms]
        return [e.output_dim for e in self.extractors]

    @property
    def fused_dim(self) -> int:
        return self.head.in_features

    def _branch(self, i: int, pooled: torch.Tensor) -> torch.Tensor:
        return self.transforms[i](pooled) if self.transforms is not None else pooled

    def _fuse(self, branches: list[torch.Tensor]) -> torch.Tensor:
        if self.fusion_mode == "concat":
            return torch.cat(branches, dim=1)
        return torch.stack(branches).mean(dim=0)

    def pooled(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for ext in self.old:
            if ext.frozen:
                with torch.no_grad():
                    out.append(ext(x))
            else:
                out.append(ext(x))
        out.append(self.current(x))
        return out

    def fused_features(self, x: torch.Tensor, include: Sequence[int] | None = None,
                       pooled: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Fused (transformed) features; ``include`` keeps only the listed
        extractor indices (0-based), zero-filling dropped concat blocks."""
        pooled = self.pooled(x) if pooled is None else pooled
        branches = [self._branch(i, p) for i, p in enumerate(pooled)]
        if include is None:
            return self._fuse(branches)
        keep = set(include)
        if not keep:
            raise ValueError("at least one extractor must be kept")
        if self.fusion_mode == "concat":
            return torch.cat([b if i in keep else torch.zeros_like(b) for i, b in enumerate(branches)], 1)
        return torch.stack([b for i, b in enumerate(branches) if i in keep]).mean(dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.fused_features(x))

    def joint(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """(fused logits, auxiliary logits) sharing one pass of the current extractor."""
        pooled = self.pooled(x)
        fused = self.head(self.fused_features(x, pooled=pooled))
        aux = self.aux_head(pooled[-1]) if self.aux_head is not None else None
        return fused, aux


def fused_logits(model: FusionClassifier, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


def aux_logits(model: FusionClassifier, batch: torch.Tensor) -> torch.Tensor:
    if model.aux_head is None:
        raise ValueError("model has no auxiliary head")
    return model.aux_head(model.current(batch))


def build_fusion_model(old_extractors, old_transforms, new_extractor, d: int, u: int, c_t: int,
                       fusion_mode: str = "concat", **kwargs) -> FusionClassifier:
    """Assemble the round classifier over ``u + c_t`` classes."""
    if c_t < 1:
        raise ValueError("a round must introduce at least one class")
    shapes = {(e.in_channels,) for e in list(old_extractors) + [new_extractor]}
    if len(shapes) > 1:
        raise ValueError("extractors disagree on input channels")
    return FusionClassifier(old_extractors, old_transforms, new_extractor, u + c_t, d,
                            fusion_mode, **kwargs)


class AuxModel(nn.Module):
    """An individual CNN classifier: one extractor and its own head (teacher role)."""

    def __init__(self, extractor: MaskedFeatureExtractor, head: nn.Linear):
        super().__init__()
        self.extractor = extractor
        self.head = head

    def forward(self, x):
        return self.head(self.extractor(x))


def param_count(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


def deployed_param_count(model: FusionClassifier) -> int:
    """Parameters of the deployed classifier; the auxiliary head is temporary
    and not counted."""
    return (sum(param_count(e) for e in model.extractors) + param_count(model.transforms)
            + param_count(model.head))


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_tensors(path, module: nn.Module, prefix: str = "") -> None:
    """Named, shape-tagged little-endian float32 tensors (numpy .npz)."""
    arrays = {prefix + k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}
    np.savez(path, **arrays)


def load_tensors(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def load_into(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> nn.Module:
    sd = module.state_dict()
    new = {}
    for k, v in sd.items():
        a = arrays[prefix + k]
        new[k] = torch.from_numpy(a.astype(np.float32)).to(v.dtype).reshape(v.shape)
    module.load_state_dict(new)
    return module


def save_round_checkpoint(directory, model: FusionClassifier, teacher: AuxModel | None,
                          binary_masks: dict[str, list[bool]] | None, lineage: list[dict]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensors(d / "model.npz", model)
    if teacher is not None:
        save_tensors(d / "aux_model.npz", teacher)
    masks = {k: "".join("1" if b else "0" for b in v) for k, v in (binary_masks or {}).items()}
    (d / "masks.json").write_text(json.dumps(masks, indent=1, sort_keys=True) + "\n")
    manifest = {
        "extractors": [e.arch() for e in model.extractors],
        "fusion": model.fusion,
        "fusion_mode": model.fusion_mode,
        "use_transforms": model.use_transforms,
        "d": model.d,
        "num_classes": model.num_classes,
        "lineage": lineage,
        "teacher": None if teacher is None else {
            "extractor": teacher.extractor.arch(),
            "num_classes": teacher.head.out_features,
        },
        "files": ["model.npz", "masks.json"] + (["aux_model.npz"] if teacher is not None else []),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_teacher(directory) -> AuxModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    t = manifest["teacher"]
    ext = MaskedFeatureExtractor.from_arch(t["extractor"])
    teacher = AuxModel(ext, nn.Linear(ext.output_dim, t["num_classes"]))
    return load_into(teacher, load_tensors(d / "aux_model.npz"))
