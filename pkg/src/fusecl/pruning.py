"""Mask binarisation and structural kernel pruning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .nets import FusionClassifier, MaskedFeatureExtractor, param_count

# reference metadata only, never asserted at desk scale
REFERENCE_PRUNED_KERNEL_RANGE = (0.50, 0.60)
REFERENCE_PRUNED_PARAM_MIN = 0.70


@dataclass
class BinaryMaskSet:
    """Per-layer keep vectors, in layer order."""

    masks: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if not self.names:
            self.names = [f"layers.{i}" for i in range(len(self.masks))]

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    @property
    def all_ones(self) -> bool:
        return all(m.all() for m in self.masks)

    def as_dict(self) -> dict[str, list[bool]]:
        return {n: m.tolist() for n, m in zip(self.names, self.masks)}

    @classmethod
    def ones(cls, extractor: MaskedFeatureExtractor) -> "BinaryMaskSet":
        return cls([np.ones(w, dtype=bool) for w in extractor.widths])


def binarize_masks(extractor: MaskedFeatureExtractor,
                   thresholds: Sequence[float | None] | None = None) -> BinaryMaskSet:
    """Keep kernel h of layer l iff m_lh >= 1/n_l (inclusive).

    ``thresholds`` optionally overrides the per-layer cutoff (adaptive variant);
    ``None`` entries fall back to 1/n_l. Unmasked layers keep everything.
    """
    out = []
    for i, layer in enumerate(extractor.layers):
        n = layer.out_channels
        if not layer.masked:
            out.append(np.ones(n, dtype=bool))
            continue
        e = layer.mask_logits.detach().cpu().double().numpy()
        shifted = e - e.max()
        log_z = np.log(np.exp(shifted).sum())
        thr = None if thresholds is None else thresholds[i]
        if thr is None:
            # m_h >= 1/n  <=>  e_h - max >= log Z - log n, exact for equal logits
            keep = shifted >= log_z - np.log(n)
            assert keep.any(), "softmax max is always >= 1/n"
        else:
            keep = np.exp(shifted - log_z) >= thr
            if not keep.any():
                keep[np.argmax(shifted)] = True
        out.append(keep)
    return BinaryMaskSet(out, [f"layers.{i}" for i in range(len(out))])


def effective_masks(extractor: MaskedFeatureExtractor, masks: BinaryMaskSet) -> list[torch.Tensor]:
    """Soft mask times binary mask, per layer: the binary-masked forward oracle."""
    out = []
    for layer, keep in zip(extractor.layers, masks):
        k = torch.as_tensor(keep, dtype=layer.conv.weight.dtype)
        m = layer.channel_scale()
        out.append(k if m is None else m.detach() * k)
    return out


def structural_prune(extractor: MaskedFeatureExtractor,
                     masks: BinaryMaskSet) -> tuple[MaskedFeatureExtractor, np.ndarray]:
    """Remove dropped kernels and matching input channels of the next layer.

    Surviving soft-mask scales are folded into the batch-norm affine (or the
    conv weight and bias when there is no normalisation), so the result has no
    mask machinery. Returns the thinner extractor and the kept indices of the
    last layer (the pooled feature coordinates that survive).
    """
    if len(masks) != len(extractor.layers):
        raise ValueError(f"{len(masks)} masks for {len(extractor.layers)} layers")
    for layer, keep in zip(extractor.layers, masks):
        if keep.shape != (layer.out_channels,):
            raise ValueError(f"mask of length {keep.shape} for layer width {layer.out_channels}")
        if not keep.any():
            raise ValueError("every layer must keep at least one kernel")
    widths = [int(k.sum()) for k in masks]
    new = MaskedFeatureExtractor(extractor.in_channels, widths, extractor.kernel_size,
                                 extractor.batch_norm, masked=False, pool=extractor.pool,
                                 bias=extractor.bias, unit_gain=extractor.unit_gain).to(extractor.layers[0].conv.weight.dtype)
    prev = torch.arange(extractor.in_channels)
    with torch.no_grad():
        for old, dst, keep in zip(extractor.layers, new.layers, masks):
            idx = torch.from_numpy(np.flatnonzero(keep))
            m = old.channel_scale()
            scale = torch.ones(len(idx), dtype=old.conv.weight.dtype) if m is None else m[idx]
            w = old.conv.weight[idx][:, prev]
            b = old.conv.bias[idx] if old.conv.bias is not None else None
            if old.bn is not None:
                dst.bn.weight.copy_(old.bn.weight[idx] * scale)
                dst.bn.bias.copy_(old.bn.bias[idx] * scale)
                dst.bn.running_mean.copy_(old.bn.running_mean[idx])
                dst.bn.running_var.copy_(old.bn.running_var[idx])
                dst.bn.num_batches_tracked.copy_(old.bn.num_batches_tracked)
                dst.bn.eps, dst.bn.momentum = old.bn.eps, old.bn.momentum
            else:
                w = w * scale.view(-1, 1, 1, 1)
                b = None if b is None else b * scale
            dst.conv.weight.copy_(w)
            if b is not None:
                dst.conv.bias.copy_(b)
            prev = idx
    new.train(extractor.training)
    return new, np.flatnonzero(masks.masks[-1])


def _slice_inputs(linear: nn.Linear, cols) -> nn.Linear:
    cols = torch.as_tensor(cols, dtype=torch.long)
    new = nn.Linear(len(cols), linear.out_features).to(linear.weight.dtype)
    with torch.no_grad():
        new.weight.copy_(linear.weight[:, cols])
        new.bias.copy_(linear.bias)
    return new


def prune_current(model: FusionClassifier, masks: BinaryMaskSet) -> np.ndarray:
    """Swap the model's current extractor for its pruned version in place and
    drop the matching input columns of everything reading its pooled output."""
    pruned, kept = structural_prune(model.current, masks)
    old_dim = model.current.output_dim
    model.current = pruned
    if model.aux_head is not None:
        model.aux_head = _slice_inputs(model.aux_head, kept)
    if model.transforms is not None:
        model.transforms[-1] = _slice_inputs(model.transforms[-1], kept)
    elif model.fusion_mode == "concat":
        start = model.head.in_features - old_dim
        cols = np.concatenate([np.arange(start), start + kept])
        model.head = _slice_inputs(model.head, cols)
    elif len(kept) != old_dim:
        raise ValueError("average fusion without transforms cannot absorb a pruned extractor")
    else:
        # average fusion, nothing pruned from the pooled output
        pass
    return kept


@dataclass
class PruneStats:
    kept_per_layer: list[int]
    total_per_layer: list[int]
    params_before: int
    params_after: int

    @property
    def kept_fraction(self) -> float:
        return sum(self.kept_per_layer) / sum(self.total_per_layer)

    @property
    def param_fraction(self) -> float:
        return self.params_after / self.params_before

    def as_dict(self) -> dict:
        return {
            "kept_per_layer": self.kept_per_layer,
            "total_per_layer": self.total_per_layer,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "kept_fraction": self.kept_fraction,
            "param_fraction": self.param_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneStats":
        return cls(d["kept_per_layer"], d["total_per_layer"], d["params_before"], d["params_after"])


def prune_stats(before: MaskedFeatureExtractor, after: MaskedFeatureExtractor,
                count_masks: bool = True) -> PruneStats:
    """Kernel and parameter accounting for one surgery.

    ``count_masks=False`` leaves the (surgery-removed) mask logits out of the
    before count, so only weights, biases and normalisation are compared.
    """
    if len(before.layers) != len(after.layers):
        raise ValueError("extractors have different depth")
    pb = param_count(before)
    if not count_masks:
        pb -= sum(l.mask_logits.numel() for l in before.layers if l.masked)
    return PruneStats(after.widths, before.widths, pb, param_count(after))
