#!/usr/bin/env python3
"""
Tests for the multi-stage TCN and the two-branch fusion model
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from compute_core import ShapeError, Tape, Tensor2D, cast_params, grad_check, save_checkpoint
from mstcn_model import (FusionModel, ModelConfig, SegModel, argmax_labels, count_parameters,
                         forward_fused, forward_single, load_model, predict)
from pose_data import FeatureTrack, ValidationError
from seg_losses import LossConfig, fused_supervision, total_loss


def _small_cfg(**overrides):
    base = dict(input_dim=5, num_classes=3, feature_width=6, prediction_layers=3,
                refinement_layers=2, refinement_stages=3, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def _feats(dim, frames, seed=0):
    return FeatureTrack(np.random.default_rng(seed).uniform(0, 1, size=(dim, frames)).astype(np.float32))


def test_default_model_shapes_and_probabilities():
    model = SegModel(ModelConfig(input_dim=16, num_classes=4, feature_width=8), seed=1)
    for frames in (1, 7, 100, 1031):
        stages = forward_single(model, _feats(16, frames, frames))
        assert len(stages) == 4
        for probs in stages:
            assert probs.shape == (4, frames)
            assert np.all(np.abs(probs.sum(axis=0) - 1.0) <= 1e-6)


def test_smoke_width_64():
    model = SegModel(ModelConfig(input_dim=64, num_classes=5), seed=2)
    stages = forward_single(model, _feats(64, 50))
    assert all(np.all(np.isfinite(p)) for p in stages)


def test_parameter_layout():
    model = SegModel(_small_cfg(), seed=0)
    assert 'pg.l0.conv_b.w' in model.params and 'pg.l2.mix.w' in model.params
    assert 'rf1.l1.conv_a.w' in model.params and 'rf3.head.w' in model.params
    assert 'rf1.l0.conv_b.w' not in model.params
    assert model.params['pg.l0.conv_a.w'].shape == (6, 6, 3)
    assert model.params['rf2.in.w'].shape == (6, 3)
    assert not model.params['pg.head.b'].value.any()
    shared = SegModel(_small_cfg(shared_weights=True), seed=0)
    assert 'rf.in.w' in shared.params and 'rf1.in.w' not in shared.params
    assert count_parameters(shared) < count_parameters(model)


def test_dimension_mismatch():
    model = SegModel(_small_cfg(), seed=0)
    try:
        forward_single(model, _feats(4, 10))
    except ShapeError:
        return
    raise AssertionError("expected ShapeError")


def test_config_validation():
    for bad in ({'prediction_layers': 0}, {'feature_width': 0}, {'dropout': 1.0}, {'kernel_size': 2}):
        try:
            _small_cfg(**bad)
        except ValidationError:
            continue
        raise AssertionError(f"ModelConfig accepted {bad}")


def test_argmax_rules():
    assert argmax_labels(np.array([[0.2], [0.5], [0.3]])).tolist() == [1]
    assert argmax_labels(np.array([[0.5], [0.5]])).tolist() == [0]
    one_class = SegModel(_small_cfg(num_classes=1), seed=0)
    assert not predict(one_class, _feats(5, 9)).labels.any()


def test_receptive_field_grows_with_depth():
    def reach(layers):
        cfg = _small_cfg(prediction_layers=layers, refinement_stages=0)
        model = SegModel(cfg, seed=3)
        base = _feats(5, 64, 4)
        bumped = base.values.copy()
        bumped[:, 32] += 1.0
        a = forward_single(model, base)[0]
        b = forward_single(model, FeatureTrack(bumped))[0]
        changed = np.flatnonzero(np.abs(a - b).max(axis=0) > 0)
        return changed

    shallow, deep = reach(1), reach(5)
    assert 32 in shallow
    assert len(deep) > len(shallow)


def test_class_permutation_equivariance():
    model = SegModel(_small_cfg(refinement_stages=0), seed=5)
    feats = _feats(5, 30, 6)
    before = predict(model, feats).labels
    perm = np.array([2, 0, 1])
    model.params['pg.head.w'].value = model.params['pg.head.w'].value[perm]
    model.params['pg.head.b'].value = model.params['pg.head.b'].value[perm]
    after = predict(model, feats).labels
    # row r of the permuted head is old class perm[r]
    assert np.array_equal(perm[after], before)


def test_full_loss_gradient_check():
    model = SegModel(_small_cfg(), seed=7)
    cast_params(model.params, np.float64)
    x = Tensor2D(_feats(5, 20, 8).values.astype(np.float64), requires_grad=False)
    labels = np.repeat([0, 2, 1, 0], 5)

    def loss_fn():
        tape = Tape()
        return tape, total_loss(tape, model.forward(tape, x).probs, labels)

    assert grad_check(loss_fn, model.params, coords=8) < 1e-4


def test_fused_shapes_and_modes():
    for mode in ('recurrent', 'supervision_only'):
        fused = FusionModel(_small_cfg(), _small_cfg(input_dim=7), mode, seed=1)
        out = forward_fused(fused, _feats(5, 12), _feats(7, 12, 1))
        assert len(out.fused) == len(out.heat) == len(out.aux) == 4
        for track in out.fused:
            assert track.value.shape == (3, 12)
            assert np.all(np.abs(track.value.sum(axis=0) - 1.0) <= 1e-6)
    try:
        forward_fused(fused, _feats(5, 12), _feats(7, 11))
    except ShapeError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def test_fusion_with_zero_aux_input_stays_valid():
    fused = FusionModel(_small_cfg(), _small_cfg(input_dim=7), seed=2)
    out = forward_fused(fused, _feats(5, 10), FeatureTrack(np.zeros((7, 10), dtype=np.float32)))
    assert all(np.all(np.isfinite(t.value)) for t in out.fused)


def test_averaging_init_reproduces_identical_branches():
    cfg = _small_cfg()
    branch = SegModel(cfg, seed=11)
    fused = FusionModel(cfg, cfg, 'recurrent', seed=0)
    fused.init_from_branches(branch, branch)
    cast_params(fused.params, np.float64)
    cast_params(branch.params, np.float64)
    x = _feats(5, 16, 12).values.astype(np.float64)

    single = branch.forward(Tape(), Tensor2D(x))
    tape = Tape()
    out = fused.forward(tape, Tensor2D(x), Tensor2D(x))
    for s in range(cfg.stage_count):
        assert np.allclose(out.fused[s].value, single.stages[s].probs.value, rtol=0, atol=1e-12)
        assert np.allclose(out.heat[s].value, out.fused[s].value, rtol=0, atol=1e-12)


def test_fused_loss_supervision_tracks():
    fused = FusionModel(_small_cfg(), _small_cfg(input_dim=7), seed=3)
    out = forward_fused(fused, _feats(5, 8), _feats(7, 8, 1))
    assert len(fused_supervision(out)) == 4
    assert len(fused_supervision(out, LossConfig(supervise_branches=True))) == 12


def test_checkpoint_rebuilds_model():
    model = SegModel(_small_cfg(), seed=9)
    feats = _feats(5, 25, 10)
    fused = FusionModel(_small_cfg(), _small_cfg(input_dim=7), 'supervision_only', seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / 'm.ckpt', model.params, model.topology())
        loaded, topology = load_model(path)
        assert topology['kind'] == 'single'
        assert np.array_equal(forward_single(loaded, feats)[-1], forward_single(model, feats)[-1])

        path = save_checkpoint(Path(tmp) / 'f.ckpt', fused.params, fused.topology())
        loaded, _ = load_model(path)
        assert loaded.fusion_mode == 'supervision_only'
        aux = _feats(7, 25, 11)
        assert np.array_equal(forward_fused(loaded, feats, aux).fused[-1].value,
                              forward_fused(fused, feats, aux).fused[-1].value)


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
