"""Label-adjustment strategies used during site training.

Four families are supported: label smoothing, soft correction (a convex blend
of the given one-hot label and a predicted distribution), decoupled hard
correction with separate confidence thresholds per direction, and the EMA
teacher update that drives the local-teacher variant of hard correction.

The hard rule flips a voxel only when the teacher both wins the argmax and
clears the direction's threshold strictly, and the flip direction contradicts
the stored label: lesion->background needs p0 > h0, background->lesion needs
p1 > h1. Argmax ties count as background, so a threshold of exactly 1.0
disables that direction entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .model import WeightVector

CORRECTION_MODES = ("none", "smoothing", "soft", "dhlc_local", "celc_central")

PROB_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CorrectionPolicy:
    """Correction mode plus every constant the mode needs."""

    mode: str = "none"
    h0: float = 0.90
    h1: float = 0.65
    epsilon: float = 0.5
    alpha: float = 0.1
    warmup_epochs: int = 0
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.mode not in CORRECTION_MODES:
            raise ConfigurationError(f"unknown correction mode {self.mode!r}")
        if self.mode in ("dhlc_local", "celc_central"):
            if not (0.0 < self.h0 <= 1.0 and 0.0 < self.h1 <= 1.0):
                raise ConfigurationError("hard correction needs h0 and h1 in (0, 1]")
        if self.mode == "soft" and not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("soft correction needs epsilon in [0, 1]")
        if self.mode == "smoothing" and not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError("smoothing needs alpha in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1)")

    @property
    def needs_teacher(self) -> bool:
        return self.mode in ("dhlc_local", "celc_central")


def _one_hot(y: torch.Tensor) -> torch.Tensor:
    y = y.long()
    return torch.stack([(y == 0).float(), (y == 1).float()], dim=1)


def _check_probs(p: torch.Tensor) -> None:
    if p.dim() < 2 or p.shape[1] != 2:
        raise ConfigurationError("teacher probabilities must have two classes on axis 1")
    if (p < -PROB_TOLERANCE).any() or (p.sum(dim=1) - 1.0).abs().max() > PROB_TOLERANCE:
        raise ConfigurationError("teacher probabilities must be normalized per voxel")


def smooth_labels(y: torch.Tensor, alpha: float) -> torch.Tensor:
    """(1 - alpha) * onehot(y) + alpha * uniform, per voxel."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError("alpha must lie in [0, 1)")
    return (1.0 - alpha) * _one_hot(y) + alpha * 0.5


def soft_correct(y: torch.Tensor, p: torch.Tensor, epsilon: float) -> torch.Tensor:
    """(1 - epsilon) * onehot(y) + epsilon * p, per voxel."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError("epsilon must lie in [0, 1]")
    _check_probs(p)
    return (1.0 - epsilon) * _one_hot(y) + epsilon * p


def dhlc_correct(y: torch.Tensor, teacher_probs: torch.Tensor, h0: float, h1: float) -> torch.Tensor:
    """Decoupled hard correction; returns relabeled voxels as a long tensor."""
    _check_probs(teacher_probs)
    y = y.long()
    p0 = teacher_probs[:, 0]
    p1 = teacher_probs[:, 1]
    to_background = (p0 >= p1) & (p0 > h0) & (y == 1)
    to_lesion = (p1 > p0) & (p1 > h1) & (y == 0)
    out = y.clone()
    out[to_background] = 0
    out[to_lesion] = 1
    return out


def flip_counts(y: torch.Tensor, corrected: torch.Tensor) -> tuple[int, int]:
    """(lesion->background, background->lesion) voxel counts."""
    y = y.long()
    flips_10 = int(((y == 1) & (corrected == 0)).sum())
    flips_01 = int(((y == 0) & (corrected == 1)).sum())
    return flips_10, flips_01


def ema_update(teacher: WeightVector, student: WeightVector, decay: float) -> WeightVector:
    """teacher' = decay * teacher + (1 - decay) * student, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigurationError("decay must lie in [0, 1]")
    teacher.check_combinable(student)
    arrays = {}
    for name, t_arr in teacher.arrays.items():
        s_arr = student.arrays[name]
        mixed = decay * t_arr.astype(np.float64) + (1.0 - decay) * s_arr.astype(np.float64)
        if np.issubdtype(t_arr.dtype, np.integer):
            arrays[name] = np.rint(mixed).astype(t_arr.dtype)
        else:
            arrays[name] = mixed.astype(t_arr.dtype)
    return WeightVector(arrays=arrays, fingerprint=teacher.fingerprint)


@torch.no_grad()
def ema_update_module(teacher: torch.nn.Module, student: torch.nn.Module, decay: float) -> None:
    """In-place EMA over the full state (parameters and buffers)."""
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    for name, t_val in t_state.items():
        s_val = s_state[name]
        if t_val.is_floating_point():
            t_val.mul_(decay).add_(s_val, alpha=1.0 - decay)
        else:
            mixed = decay * t_val.double() + (1.0 - decay) * s_val.double()
            t_val.copy_(mixed.round().to(t_val.dtype))
