#!/usr/bin/env python3
"""
Test-time missing-keypoint perturbation.

For every frame, with probability p, pick one of the four extremity groups
(left/right arm, left/right leg) uniformly and zero the confidence of the
joints that belong only to that group - a shoulder or hip shared with the
torso keeps its confidence. Coordinates are never touched; the confidence
factors in the heatmap equations do the rest.
"""

import logging
from typing import Dict, List

import numpy as np

from pose_data import EXTREMITY_GROUPS, SkeletonSequence, ValidationError

logger = logging.getLogger(__name__)


def extremity_joints(seq: SkeletonSequence) -> Dict[str, List[int]]:
    groups = {g: seq.topology.exclusive_joints(g) for g in EXTREMITY_GROUPS}
    missing = [g for g, joints in groups.items() if not joints]
    if missing:
        raise ValidationError(f"topology has no exclusive joints for limb group(s) {', '.join(missing)}")
    return groups


def drop_schedule(frame_count: int, p: float, rng_seed: int) -> np.ndarray:
    """Index into EXTREMITY_GROUPS of the group dropped in each frame, -1 for none.
    Two draws per frame regardless of p, so a seed maps to one schedule."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"drop probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(frame_count)
    groups = rng.integers(0, len(EXTREMITY_GROUPS), size=frame_count)
    return np.where(draws < p, groups, -1)


def drop_limbs(seq: SkeletonSequence, p: float, rng_seed: int) -> SkeletonSequence:
    groups = extremity_joints(seq)
    schedule = drop_schedule(seq.frame_count, p, rng_seed)
    conf = seq.joints[:, :, 2].copy()
    for index, group in enumerate(EXTREMITY_GROUPS):
        frames = np.flatnonzero(schedule == index)
        if len(frames):
            conf[np.ix_(frames, groups[group])] = 0.0
    dropped = int((schedule >= 0).sum())
    logger.debug(f"🦴 dropped a limb in {dropped}/{seq.frame_count} frames (p={p}, seed={rng_seed})")
    return seq.with_confidences(conf)
