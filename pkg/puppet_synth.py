#!/usr/bin/env python3
"""
Synthetic "puppet" dataset: 13-joint stick figures acting out scripted motifs.

Every class is one deterministic joint-trajectory motif (raise arms, squat,
lean, reach, kick, wave). A motif displaces some joints from the rest pose by
    rest + (0.4 + 0.6 * sin^2(pi * cycles * phase)) * displacement
over the segment's phase in [0, 1], so every frame of a class stays
distinguishable from the rest pose. Classes beyond the base motifs reuse a
motif at a higher cycle count. Each video is a random chain of segments
(no class repeated back to back) with 1 px Gaussian coordinate noise,
confidences in [0.9, 1] and a small global offset per video.

Also writes a second-modality feature file per video (pooled joint-only
heatmaps at a wider sigma) for the fused model's auxiliary branch, and a
manifest with an 80/20 train/test split.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from heatmap_raster import RasterConfig, heatmap_features, save_feature_track
from pose_data import (DatasetManifest, LabelTrack, Limb, LimbTopology, ManifestEntry,
                       SkeletonSequence, ValidationError, write_class_map, write_label_track,
                       write_manifest, write_skeleton_sequence)

logger = logging.getLogger(__name__)

FRAME_SIZE = 128
NOISE_PX = 1.0
CONFIDENCE_RANGE = (0.9, 1.0)
OFFSET_PX = 8.0
FRAMES_PER_SEGMENT = (40, 120)
SEGMENTS_PER_VIDEO = (3, 6)
MIN_MOTIF_SEPARATION_PX = 5.0
TRAIN_FRACTION = 0.8

JOINT_NAMES = ('head', 'l_shoulder', 'r_shoulder', 'l_elbow', 'r_elbow', 'l_wrist', 'r_wrist',
               'l_hip', 'r_hip', 'l_knee', 'r_knee', 'l_ankle', 'r_ankle')
J = {name: k for k, name in enumerate(JOINT_NAMES)}

REST_POSE = np.array([
    (64, 18),                # head
    (52, 32), (76, 32),      # shoulders
    (46, 50), (82, 50),      # elbows
    (42, 66), (86, 66),      # wrists
    (56, 68), (72, 68),      # hips
    (55, 88), (73, 88),      # knees
    (54, 108), (74, 108),    # ankles
], dtype=np.float64)

PUPPET_TOPOLOGY = LimbTopology(
    limbs=(
        Limb(J['head'], J['l_shoulder'], 'torso-head'),
        Limb(J['head'], J['r_shoulder'], 'torso-head'),
        Limb(J['l_shoulder'], J['l_hip'], 'torso-head'),
        Limb(J['r_shoulder'], J['r_hip'], 'torso-head'),
        Limb(J['l_shoulder'], J['l_elbow'], 'left-arm'),
        Limb(J['l_elbow'], J['l_wrist'], 'left-arm'),
        Limb(J['r_shoulder'], J['r_elbow'], 'right-arm'),
        Limb(J['r_elbow'], J['r_wrist'], 'right-arm'),
        Limb(J['l_hip'], J['l_knee'], 'left-leg'),
        Limb(J['l_knee'], J['l_ankle'], 'left-leg'),
        Limb(J['r_hip'], J['r_knee'], 'right-leg'),
        Limb(J['r_knee'], J['r_ankle'], 'right-leg'),
    ),
    joint_count=len(JOINT_NAMES),
    joint_names=JOINT_NAMES,
)

MOTIFS: Tuple[Tuple[str, Dict[str, Tuple[float, float]]], ...] = (
    ('raise-arms', {'l_elbow': (-4, -28), 'r_elbow': (4, -28), 'l_wrist': (-6, -52), 'r_wrist': (6, -52)}),
    ('squat', {'head': (0, 20), 'l_shoulder': (0, 20), 'r_shoulder': (0, 20), 'l_elbow': (-4, 18),
               'r_elbow': (4, 18), 'l_wrist': (-8, 10), 'r_wrist': (8, 10), 'l_hip': (0, 22),
               'r_hip': (0, 22), 'l_knee': (-10, 6), 'r_knee': (10, 6)}),
    ('lean-left', {'head': (-18, 4), 'l_shoulder': (-14, 4), 'r_shoulder': (-14, 2), 'l_elbow': (-14, 4),
                   'r_elbow': (-14, 2), 'l_wrist': (-14, 6), 'r_wrist': (-12, 4)}),
    ('reach-right', {'r_elbow': (18, -8), 'r_wrist': (38, -14)}),
    ('kick-left', {'l_knee': (-14, -10), 'l_ankle': (-30, -20)}),
    ('wave-right', {'r_elbow': (14, -22), 'r_wrist': (18, -44)}),
)

# second modality for the fused model: blurrier joint-only heatmaps
AUX_RASTER = RasterConfig(sigma=2.0, heatmap='joint', distance_mode='squared')


@dataclass(frozen=True)
class Motif:
    name: str
    displacement: np.ndarray  # (K, 2)
    cycles: int

    def trajectory(self, phase: np.ndarray) -> np.ndarray:
        """(P, K, 2) joint positions at the given phases in [0, 1]."""
        scale = 0.4 + 0.6 * np.sin(np.pi * self.cycles * phase) ** 2
        return REST_POSE[None, :, :] + scale[:, None, None] * self.displacement[None, :, :]


def motif_for_class(class_id: int) -> Motif:
    name, moves = MOTIFS[class_id % len(MOTIFS)]
    cycles = 1 + class_id // len(MOTIFS)
    displacement = np.zeros_like(REST_POSE)
    for joint, delta in moves.items():
        displacement[J[joint]] = delta
    label = name if cycles == 1 else f"{name}-x{cycles}"
    return Motif(label, displacement, cycles)


def motif_separation(a: Motif, b: Motif, samples: int = 200) -> float:
    """Largest per-joint RMS distance between two motifs' trajectories."""
    phase = (np.arange(samples) + 0.5) / samples
    diff = a.trajectory(phase) - b.trajectory(phase)
    per_joint = np.sqrt(np.mean(np.sum(diff ** 2, axis=2), axis=0))
    return float(per_joint.max())


def check_motifs(num_classes: int):
    motifs = [motif_for_class(c) for c in range(num_classes)]
    for i in range(num_classes):
        for j in range(i + 1, num_classes):
            sep = motif_separation(motifs[i], motifs[j])
            if sep < MIN_MOTIF_SEPARATION_PX:
                raise ValidationError(f"motifs {motifs[i].name} and {motifs[j].name} differ by "
                                      f"only {sep:.2f} px RMS")
    return motifs


def synth_video(rng: np.random.Generator, motifs: Sequence[Motif],
                frames_per_segment: Tuple[int, int] = FRAMES_PER_SEGMENT,
                segments_per_video: Tuple[int, int] = SEGMENTS_PER_VIDEO) -> Tuple[SkeletonSequence, np.ndarray]:
    num_classes = len(motifs)
    segment_count = int(rng.integers(segments_per_video[0], segments_per_video[1] + 1))
    offset = rng.uniform(-OFFSET_PX, OFFSET_PX, size=2)
    frames: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    previous = -1
    for _ in range(segment_count):
        choices = [c for c in range(num_classes) if c != previous]
        label = int(rng.choice(choices))
        length = int(rng.integers(frames_per_segment[0], frames_per_segment[1] + 1))
        phase = (np.arange(length) + 0.5) / length
        xy = motifs[label].trajectory(phase) + offset + rng.normal(0.0, NOISE_PX, size=(length, len(REST_POSE), 2))
        conf = rng.uniform(*CONFIDENCE_RANGE, size=(length, len(REST_POSE), 1))
        frames.append(np.concatenate([xy, conf], axis=2))
        labels.append(np.full(length, label, dtype=np.int64))
        previous = label
    seq = SkeletonSequence(np.concatenate(frames), PUPPET_TOPOLOGY, FRAME_SIZE, FRAME_SIZE)
    return seq, np.concatenate(labels)


def split_for(index: int, num_videos: int) -> str:
    test_count = max(1, int(round(num_videos * (1 - TRAIN_FRACTION)))) if num_videos > 1 else 0
    return 'train' if index < num_videos - test_count else 'test'


def generate(out_dir, num_videos: int = 5, num_classes: int = 4,
             frames_per_segment: Tuple[int, int] = FRAMES_PER_SEGMENT,
             segments_per_video: Tuple[int, int] = SEGMENTS_PER_VIDEO,
             seed: int = 7, with_features: bool = True) -> DatasetManifest:
    """Write skeleton/label/feature files, mapping.txt and manifest.json under out_dir."""
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    if num_videos < 1:
        raise ValidationError(f"need at least 1 video, got {num_videos}")
    lo, hi = frames_per_segment
    if not 1 <= lo <= hi:
        raise ValidationError(f"bad frames-per-segment range {frames_per_segment}")
    if not 1 <= segments_per_video[0] <= segments_per_video[1]:
        raise ValidationError(f"bad segments-per-video range {segments_per_video}")

    out_dir = Path(out_dir)
    motifs = check_motifs(num_classes)
    class_names = tuple(m.name for m in motifs)
    write_class_map(class_names, out_dir / 'mapping.txt')

    entries = []
    for v in range(num_videos):
        rng = np.random.default_rng([seed, v])
        seq, labels = synth_video(rng, motifs, frames_per_segment, segments_per_video)
        vid = f"vid_{v:03d}"
        skeleton_path = write_skeleton_sequence(seq, out_dir / 'skeletons' / f"{vid}.json")
        label_path = write_label_track(LabelTrack(labels, class_names), out_dir / 'labels' / f"{vid}.txt")
        feature_path = None
        if with_features:
            feature_path = save_feature_track(heatmap_features(seq, AUX_RASTER),
                                              out_dir / 'features' / f"{vid}.npy")
        entries.append(ManifestEntry(vid, skeleton_path, label_path, split_for(v, num_videos), feature_path))
        logger.info(f"🎭 {vid}: {seq.frame_count} frames, {len(np.unique(labels))} classes "
                    f"[{entries[-1].split}]")

    manifest = DatasetManifest(entries, out_dir)
    write_manifest(manifest, out_dir / 'manifest.json')
    logger.info(f"💾 Wrote {num_videos} synthetic videos ({num_classes} classes) to {out_dir}")
    return manifest
