"""Loss terms: temperature distillation, cross-entropy and their combinations."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass
class LossBreakdown:
    L_d: float
    L_o: float
    L_s: float
    L_f: float
    L: float

    def as_dict(self) -> dict:
        return asdict(self)


def distillation_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, u: int,
                      T: float = 2.0) -> torch.Tensor:
    """Soft cross-entropy between temperature softmaxes over the first ``u`` logits.

    Both distributions are normalised over the old-class block only; the
    student's new-class logits do not enter. No T**2 rescaling.
    """
    if u < 1:
        raise ValueError("distillation needs at least one old class")
    if T < 1:
        raise ValueError(f"temperature must be >= 1, got {T}")
    if teacher_logits.shape[1] < u or student_logits.shape[1] < u:
        raise ValueError(f"logits narrower than u={u}")
    p = torch.softmax(teacher_logits[:, :u] / T, dim=1)
    log_q = torch.log_softmax(student_logits[:, :u] / T, dim=1)
    return -(p * log_q).sum(dim=1).mean()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy at temperature 1 against one-hot rows (or class indices)."""
    if labels.dim() == 1:
        return F.cross_entropy(logits, labels)
    if labels.shape != logits.shape:
        raise ValueError(f"label shape {tuple(labels.shape)} != logits {tuple(logits.shape)}")
    ones = (labels == 1).sum(dim=1)
    zeros = (labels == 0).sum(dim=1)
    if not bool(((ones == 1) & (ones + zeros == labels.shape[1])).all()):
        raise ValueError("every label row must be one-hot")
    return -(labels.to(logits.dtype) * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def combined_aux_loss(L_o, L_d, lam1: float):
    return L_o + lam1 * L_d


def total_loss(L_f, L_s, lam2: float):
    return L_f + lam2 * L_s


def multi_teacher_distillation_loss(teacher_logit_sets: Sequence[torch.Tensor],
                                    student_logits: torch.Tensor, T: float = 2.0) -> torch.Tensor:
    """Mean of per-teacher distillation terms; teacher k covers logits [0, u_k)."""
    if not teacher_logit_sets:
        raise ValueError("need at least one teacher")
    widths = [z.shape[1] for z in teacher_logit_sets]
    if any(b < a for a, b in zip(widths, widths[1:])):
        raise ValueError(f"teacher widths must be non-decreasing, got {widths}")
    terms = [distillation_loss(z, student_logits, z.shape[1], T) for z in teacher_logit_sets]
    return torch.stack(terms).mean()
