#!/usr/bin/env python3
"""
Training losses, applied to every stage's output (deep supervision):

    classification  (1/M) sum_i -log y[i, c_i]
    smoothness      (1/(M C)) sum_{i>=1, c} min(|log y[i,c] - log y[i-1,c]|, tau)^2
    total           sum over stages of classification + alpha * smoothness

Probabilities below log_floor are clamped before the log (32-bit softmax can
underflow to exact zeros); a clamped entry contributes no gradient. Entries
truncated at tau contribute tau^2 and no gradient. The smoothness sum has
M - 1 terms but keeps the 1/(M C) normalization.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from compute_core import ShapeError, Tape, Tensor, Tensor2D
from pose_data import LabelTrack, ValidationError

logger = logging.getLogger(__name__)

TAU = 16.0
ALPHA = 0.15
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau: float = TAU
    alpha: float = ALPHA
    log_floor: float = LOG_FLOOR
    supervise_branches: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"loss.tau must be > 0, got {self.tau}")
        if not self.alpha >= 0:
            raise ValidationError(f"loss.alpha must be >= 0, got {self.alpha}")
        if not self.log_floor > 0:
            raise ValidationError(f"loss.log_floor must be > 0, got {self.log_floor}")


def _labels(truth) -> np.ndarray:
    return np.asarray(truth.labels if isinstance(truth, LabelTrack) else truth, dtype=np.int64)


def classification_loss(tape: Tape, probs: Tensor2D, truth, cfg: LossConfig = LossConfig()) -> Tensor:
    labels = _labels(truth)
    C, M = probs.shape
    if len(labels) != M:
        raise ShapeError(f"label track has {len(labels)} frames, predictions have {M}")
    frames = np.arange(M)
    y = probs.value[labels, frames]
    kept = y > cfg.log_floor
    safe = np.where(kept, y, cfg.log_floor)
    out = Tensor(np.asarray(-np.log(safe).sum() / M, dtype=probs.value.dtype))

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(probs.value)
        g[labels, frames] = np.where(kept, -1.0 / (M * safe), 0.0) * out.grad
        probs.accumulate(g)

    tape.record('classification_loss', backward)
    return out


def smoothness_loss(tape: Tape, probs: Tensor2D, cfg: LossConfig = LossConfig()) -> Tensor:
    C, M = probs.shape
    kept = probs.value > cfg.log_floor
    safe = np.where(kept, probs.value, cfg.log_floor)
    logs = np.log(safe)
    delta = logs[:, 1:] - logs[:, :-1]
    inside = np.abs(delta) <= cfg.tau
    clipped = np.where(inside, delta, cfg.tau)
    out = Tensor(np.asarray((clipped * clipped).sum() / (M * C), dtype=probs.value.dtype))

    def backward():
        if out.grad is None or M < 2:
            return
        g_delta = np.where(inside, 2.0 * delta / (M * C), 0.0) * out.grad
        g_logs = np.zeros_like(logs)
        g_logs[:, 1:] += g_delta
        g_logs[:, :-1] -= g_delta
        probs.accumulate(np.where(kept, g_logs / safe, 0.0))

    tape.record('smoothness_loss', backward)
    return out


def stage_loss(tape: Tape, probs: Tensor2D, truth, cfg: LossConfig = LossConfig()) -> Tensor:
    cls = classification_loss(tape, probs, truth, cfg)
    if cfg.alpha == 0:
        return cls
    return tape.add(cls, tape.scale(smoothness_loss(tape, probs, cfg), cfg.alpha))


def total_loss(tape: Tape, stage_outputs: Sequence[Tensor2D], truth, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum of classification + alpha * smoothness over every supervised track."""
    if not stage_outputs:
        raise ShapeError("total_loss needs at least one stage output")
    return tape.sum_scalars([stage_loss(tape, probs, truth, cfg) for probs in stage_outputs])


def fused_supervision(fused_output, cfg: LossConfig = LossConfig()):
    """Tracks to supervise for a fused forward pass: the fused per-stage
    predictions, plus every branch's own predictions when supervise_branches."""
    tracks = list(fused_output.fused)
    if cfg.supervise_branches:
        tracks += list(fused_output.heat) + list(fused_output.aux)
    return tracks
