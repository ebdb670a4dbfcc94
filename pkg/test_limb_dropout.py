#!/usr/bin/env python3
"""
Tests for per-frame random limb removal
"""

import sys

import numpy as np

from limb_dropout import drop_limbs, drop_schedule, extremity_joints
from pose_data import EXTREMITY_GROUPS, Limb, LimbTopology, SkeletonSequence, ValidationError
from puppet_synth import PUPPET_TOPOLOGY, check_motifs, synth_video


def _puppet(frames=(40, 60), seed=0):
    seq, _ = synth_video(np.random.default_rng(seed), check_motifs(4), frames, (3, 3))
    return seq


def _dropped_groups(original, perturbed):
    """Per frame, the extremity groups whose exclusive joints all lost their confidence."""
    groups = extremity_joints(original)
    conf = perturbed.joints[:, :, 2]
    return [[g for g in EXTREMITY_GROUPS if not conf[m, groups[g]].any()] for m in range(original.frame_count)]


def test_p_zero_is_identity():
    seq = _puppet()
    out = drop_limbs(seq, 0.0, 3)
    assert np.array_equal(out.joints, seq.joints)
    assert out.topology == seq.topology


def test_p_one_drops_exactly_one_group_per_frame():
    seq = _puppet()
    out = drop_limbs(seq, 1.0, 4)
    dropped = _dropped_groups(seq, out)
    assert all(len(groups) == 1 for groups in dropped)
    # everything outside the dropped group is untouched
    groups = extremity_joints(seq)
    for m, (group,) in enumerate(dropped):
        keep = [k for k in range(seq.joint_count) if k not in groups[group]]
        assert np.array_equal(out.joints[m, keep, 2], seq.joints[m, keep, 2])


def test_half_rate_over_long_sequence():
    schedule = drop_schedule(10_000, 0.5, 11)
    fraction = float((schedule >= 0).mean())
    assert abs(fraction - 0.5) <= 0.015
    counts = np.bincount(schedule[schedule >= 0], minlength=4)
    assert counts.min() > 0.2 * counts.sum()


def test_seed_determines_schedule():
    seq = _puppet()
    a = drop_limbs(seq, 0.5, 21)
    b = drop_limbs(seq, 0.5, 21)
    c = drop_limbs(seq, 0.5, 22)
    assert np.array_equal(a.joints, b.joints)
    assert not np.array_equal(a.joints, c.joints)


def test_coordinates_and_original_untouched():
    seq = _puppet()
    before = seq.joints.copy()
    out = drop_limbs(seq, 1.0, 5)
    assert np.array_equal(out.joints[:, :, :2], seq.joints[:, :, :2])
    assert np.array_equal(seq.joints, before)


def test_shared_joints_keep_confidence():
    seq = _puppet()
    out = drop_limbs(seq, 1.0, 6)
    shared = [1, 2, 7, 8]  # shoulders and hips
    assert np.array_equal(out.joints[:, shared, 2], seq.joints[:, shared, 2])


def test_missing_group_is_an_error():
    topology = LimbTopology((Limb(0, 1, 'torso-head'), Limb(1, 2, 'left-arm')), 3)
    seq = SkeletonSequence(np.ones((2, 3, 3)), topology, 10, 10)
    try:
        drop_limbs(seq, 0.5, 0)
    except ValidationError as e:
        assert 'right-arm' in str(e)
    else:
        raise AssertionError("expected ValidationError")


def test_probability_range():
    for bad in (-0.1, 1.5):
        try:
            drop_schedule(10, bad, 0)
        except ValidationError:
            continue
        raise AssertionError(f"p={bad} accepted")


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
