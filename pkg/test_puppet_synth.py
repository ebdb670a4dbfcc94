#!/usr/bin/env python3
"""
Tests for the synthetic puppet dataset generator
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from heatmap_raster import heatmap_features, load_feature_track
from pose_data import (ValidationError, load_class_map, load_label_track, load_manifest,
                       load_skeleton_sequence)
from puppet_synth import (MIN_MOTIF_SEPARATION_PX, MOTIFS, check_motifs, generate,
                          motif_for_class, motif_separation, split_for, synth_video)

SMALL = dict(frames_per_segment=(20, 30), segments_per_video=(3, 4))


def test_generation_is_deterministic():
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        generate(a, num_videos=2, num_classes=3, seed=3, **SMALL)
        generate(b, num_videos=2, num_classes=3, seed=3, **SMALL)
        for rel in ('skeletons/vid_000.json', 'labels/vid_001.txt', 'mapping.txt', 'features/vid_001.npy'):
            assert (Path(a) / rel).read_bytes() == (Path(b) / rel).read_bytes(), rel


def test_files_pass_the_loaders():
    with tempfile.TemporaryDirectory() as tmp:
        generate(tmp, num_videos=5, num_classes=4, seed=1, **SMALL)
        manifest = load_manifest(Path(tmp) / 'manifest.json')
        names = load_class_map(manifest.class_map_path)
        assert len(names) == 4
        assert [e.split for e in manifest.entries] == ['train'] * 4 + ['test']
        for entry in manifest.entries:
            seq = load_skeleton_sequence(entry.skeleton)
            track = load_label_track(entry.labels, manifest.class_map_path)
            assert track.frame_count == seq.frame_count
            assert track.labels.max() < 4
            features = load_feature_track(entry.features)
            assert features.frame_count == seq.frame_count


def test_segment_lengths_and_no_repeats():
    seq, labels = synth_video(np.random.default_rng(2), check_motifs(5), (15, 25), (3, 6))
    runs = np.split(labels, np.flatnonzero(np.diff(labels)) + 1)
    assert 3 <= len(runs) <= 6
    assert all(15 <= len(r) <= 25 for r in runs)
    assert seq.frame_count == len(labels)
    conf = seq.joints[:, :, 2]
    assert conf.min() >= 0.9 and conf.max() <= 1.0


def test_motifs_are_separated():
    motifs = check_motifs(len(MOTIFS) + 2)
    for i in range(len(motifs)):
        for j in range(i + 1, len(motifs)):
            assert motif_separation(motifs[i], motifs[j]) >= MIN_MOTIF_SEPARATION_PX
    assert motif_for_class(len(MOTIFS)).name.endswith('-x2')
    assert motif_separation(motifs[0], motifs[0]) == 0.0


def test_split_fractions():
    assert [split_for(i, 5) for i in range(5)] == ['train'] * 4 + ['test']
    assert [split_for(i, 10) for i in range(10)].count('test') == 2
    assert split_for(0, 1) == 'train'


def test_rejects_bad_arguments():
    for kwargs in ({'num_classes': 1}, {'num_videos': 0}, {'frames_per_segment': (5, 2)}):
        with tempfile.TemporaryDirectory() as tmp:
            try:
                generate(tmp, **kwargs)
            except ValidationError:
                continue
        raise AssertionError(f"generate accepted {kwargs}")


def test_linear_probe_beats_chance():
    num_classes = 4
    motifs = check_motifs(num_classes)
    videos = [synth_video(np.random.default_rng([9, v]), motifs, (20, 30), (4, 5)) for v in range(5)]
    feats = [(heatmap_features(seq).values.T, labels) for seq, labels in videos]

    def design(x):
        return np.hstack([x, np.ones((len(x), 1))])

    train_x = np.vstack([f for f, _ in feats[:4]])
    train_y = np.concatenate([y for _, y in feats[:4]])
    weights, *_ = np.linalg.lstsq(design(train_x), np.eye(num_classes)[train_y], rcond=None)
    test_x, test_y = feats[4]
    accuracy = float(np.mean(np.argmax(design(test_x) @ weights, axis=1) == test_y))
    assert accuracy > 1.0 / num_classes + 0.1, accuracy


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
