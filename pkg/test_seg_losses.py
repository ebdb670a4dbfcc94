#!/usr/bin/env python3
"""
Tests for the classification, truncated smoothness and combined stage losses
"""

import math
import sys

import numpy as np

from compute_core import ShapeError, Tape, Tensor2D, grad_check
from pose_data import ValidationError
from seg_losses import (LossConfig, classification_loss, smoothness_loss, stage_loss, total_loss)


def _probs(values):
    return Tensor2D(np.asarray(values, dtype=np.float64))


def _random_probs(C, M, seed):
    logits = np.random.default_rng(seed).normal(size=(C, M))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def test_classification_examples():
    tape = Tape()
    assert float(classification_loss(tape, _probs([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).value) == 0.0
    half = float(classification_loss(tape, _probs([[0.5, 0.5], [0.5, 0.5]]), [0, 1]).value)
    assert abs(half - 0.69315) < 1e-5
    floored = float(classification_loss(tape, _probs([[0.0], [1.0]]), [0]).value)
    assert math.isfinite(floored) and abs(floored - (-math.log(1e-12))) < 1e-9


def test_classification_length_mismatch():
    try:
        classification_loss(Tape(), _probs([[0.5, 0.5], [0.5, 0.5]]), [0, 1, 1])
    except ShapeError:
        return
    raise AssertionError("expected ShapeError")


def test_smoothness_examples():
    tape = Tape()
    constant = np.tile([[0.2], [0.3], [0.5]], (1, 6))
    assert float(smoothness_loss(tape, _probs(constant)).value) == 0.0
    two = float(smoothness_loss(tape, _probs([[math.exp(-1), math.exp(-2)]])).value)
    assert abs(two - 0.5) < 1e-12


def test_truncation_at_tau():
    below = Tensor2D(np.array([[1.0, math.exp(-15.9)]]))
    above = Tensor2D(np.array([[1.0, math.exp(-16.1)]]))
    tape = Tape()
    lo = smoothness_loss(tape, below)
    hi = smoothness_loss(tape, above)
    assert abs(float(lo.value) - 15.9 ** 2 / 2) < 1e-9
    assert abs(float(hi.value) - 256.0 / 2) < 1e-9
    tape.backward(tape.sum_scalars([lo, hi]))
    assert np.abs(below.grad).max() > 0
    assert not above.grad.any()


def test_alpha_linearity():
    probs = _random_probs(4, 25, 1)
    labels = np.random.default_rng(2).integers(0, 4, size=25)
    tape = Tape()
    smooth = float(smoothness_loss(tape, _probs(probs)).value)
    with_alpha = float(stage_loss(tape, _probs(probs), labels, LossConfig(alpha=0.15)).value)
    without = float(stage_loss(tape, _probs(probs), labels, LossConfig(alpha=0.0)).value)
    assert abs((with_alpha - without) - 0.15 * smooth) < 1e-9
    assert without == float(classification_loss(tape, _probs(probs), labels).value)


def test_total_is_additive_over_stages():
    probs = _random_probs(3, 10, 3)
    labels = np.arange(10) % 3
    tape = Tape()
    one = float(total_loss(tape, [_probs(probs)], labels).value)
    four = float(total_loss(tape, [_probs(probs) for _ in range(4)], labels).value)
    assert abs(four - 4 * one) < 1e-12
    perfect = np.zeros((3, 10))
    perfect[1] = 1.0
    assert float(total_loss(tape, [_probs(perfect)], np.ones(10, dtype=int)).value) == 0.0


def test_smoothness_reversal_invariant():
    probs = _random_probs(5, 17, 4)
    tape = Tape()
    forward = float(smoothness_loss(tape, _probs(probs)).value)
    backward = float(smoothness_loss(tape, _probs(probs[:, ::-1].copy())).value)
    assert abs(forward - backward) < 1e-12


def _softmax_loss_check(logits, labels, cfg):
    x = Tensor2D(logits)

    def loss_fn():
        tape = Tape()
        probs = tape.softmax(x)
        return tape, total_loss(tape, [probs, tape.softmax(tape.scale(x, 0.5))], labels, cfg)

    return grad_check(loss_fn, {'x': x})


def test_loss_gradients_through_softmax():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 12))
    labels = rng.integers(0, 3, size=12)
    assert _softmax_loss_check(logits, labels, LossConfig()) < 1e-4


def test_gradient_near_truncation_boundary():
    # adjacent log-probabilities of class 0 differ by about tau - 0.1 and tau + 0.1
    for gap in (15.9, 16.1):
        logits = np.array([[0.0, -(gap + math.log(2.0)), 0.0], [0.0, 0.0, 0.0]])
        labels = np.array([1, 1, 0])
        assert _softmax_loss_check(logits, labels, LossConfig()) < 1e-4, gap


def test_loss_config_validation():
    for bad in ({'tau': 0}, {'alpha': -0.1}, {'log_floor': 0}):
        try:
            LossConfig(**bad)
        except ValidationError:
            continue
        raise AssertionError(f"LossConfig accepted {bad}")


if __name__ == "__main__":
    failures = 0
    for name, fn in list(globals().items()):
        if name.startswith('test_') and callable(fn):
            try:
                fn()
                print(f"✅ {name}")
            except Exception as e:
                failures += 1
                print(f"❌ {name}: {type(e).__name__}: {e}")
    sys.exit(1 if failures else 0)
