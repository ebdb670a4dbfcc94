#!/usr/bin/env python3
"""
Segmentation metrics, all reported in percent:
  - framewise accuracy
  - segmental edit score: 100 * (1 - Lev(p, g) / max(|p|, |g|)) over the ordered
    segment label sequences
  - segmental F1@k: greedy matching in prediction order against unmatched
    same-class ground-truth segments, hit when IoU > k, ties to the earlier
    truth segment
  - framewise mAP: per class present in the truth, rank frames by that class's
    probability (stable by frame index) and average the precision at every
    positive; mean over classes

Every class is scored, including any background/neutral class, unless it is
listed in `ignore_classes`.
"""

from typing import Dict, Iterable, List, Sequence

import Levenshtein
import numpy as np

from compute_core import ShapeError
from pose_data import LabelTrack, Segment, segments_of

F1_OVERLAPS = (0.10, 0.25, 0.50)
REPORT_KEYS = ('f1_10', 'f1_25', 'f1_50', 'edit', 'map', 'acc')


def _labels(track) -> np.ndarray:
    return np.asarray(track.labels if isinstance(track, LabelTrack) else track, dtype=np.int64)


def _check_lengths(pred: np.ndarray, truth: np.ndarray):
    if len(pred) != len(truth):
        raise ShapeError(f"prediction has {len(pred)} frames, ground truth has {len(truth)}")


def _scored_segments(track, ignore_classes: Iterable[int]) -> List[Segment]:
    ignore = set(ignore_classes)
    return [s for s in segments_of(_labels(track)) if s.label not in ignore]


def framewise_accuracy(pred, truth) -> float:
    p, t = _labels(pred), _labels(truth)
    _check_lengths(p, t)
    return 100.0 * float(np.mean(p == t))


def _segment_string(segments: Sequence[Segment]) -> str:
    # one code point per segment so Levenshtein works on label sequences
    return ''.join(chr(0x100 + s.label) for s in segments)


def edit_score(pred, truth, ignore_classes: Iterable[int] = ()) -> float:
    p_segs = _scored_segments(pred, ignore_classes)
    g_segs = _scored_segments(truth, ignore_classes)
    longest = max(len(p_segs), len(g_segs))
    if longest == 0:
        return 100.0
    distance = Levenshtein.distance(_segment_string(p_segs), _segment_string(g_segs))
    return 100.0 * (1.0 - distance / longest)


def segment_iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def f1_counts(pred, truth, k: float = 0.10, ignore_classes: Iterable[int] = ()):
    """(tp, fp, fn) of the greedy IoU matcher."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"overlap threshold must be in (0, 1], got {k}")
    p_labels, t_labels = _labels(pred), _labels(truth)
    _check_lengths(p_labels, t_labels)
    p_segs = _scored_segments(p_labels, ignore_classes)
    g_segs = _scored_segments(t_labels, ignore_classes)
    used = [False] * len(g_segs)
    tp = fp = 0
    for p in p_segs:
        best_i, best_iou = -1, 0.0
        for i, g in enumerate(g_segs):
            if used[i] or g.label != p.label:
                continue
            iou = segment_iou(p, g)
            if iou > best_iou:
                best_i, best_iou = i, iou
        if best_i >= 0 and best_iou > k:
            used[best_i] = True
            tp += 1
        else:
            fp += 1
    fn = used.count(False)
    return tp, fp, fn


def f1_at_overlap(pred, truth, k: float = 0.10, ignore_classes: Iterable[int] = ()) -> float:
    tp, fp, fn = f1_counts(pred, truth, k, ignore_classes)
    if tp + fp + fn == 0:
        return 100.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-scores, kind='stable')
    ranked = positives[order]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    if len(ranks) == 0:
        return 0.0
    return float(np.mean(hits[ranks - 1] / ranks))


def framewise_map(probs: np.ndarray, truth) -> float:
    t = _labels(truth)
    if probs.ndim != 2 or probs.shape[1] != len(t):
        raise ShapeError(f"probabilities {probs.shape} don't align with {len(t)} truth frames")
    classes = np.unique(t)
    if classes.max() >= probs.shape[0]:
        raise ShapeError(f"truth uses class {classes.max()} but only {probs.shape[0]} classes are scored")
    aps = [average_precision(probs[c].astype(np.float64), t == c) for c in classes]
    return 100.0 * float(np.mean(aps))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = _labels(labels)
    out = np.zeros((num_classes, len(labels)), dtype=np.float64)
    out[labels, np.arange(len(labels))] = 1.0
    return out


def segmentation_report(pred, probs: np.ndarray, truth, ignore_classes: Iterable[int] = ()) -> Dict[str, float]:
    ignore = tuple(ignore_classes)
    report = {f"f1_{int(round(k * 100))}": f1_at_overlap(pred, truth, k, ignore) for k in F1_OVERLAPS}
    report['edit'] = edit_score(pred, truth, ignore)
    report['map'] = framewise_map(probs, truth)
    report['acc'] = framewise_accuracy(pred, truth)
    return report
