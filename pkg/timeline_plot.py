#!/usr/bin/env python3
"""
Segmentation timelines (SVG) and report tables.

One subplot per sequence with two rows of coloured bars, ground truth on top
and prediction below, one colour per class. SVG output is byte-deterministic:
fixed hash salt and no date metadata.
"""

import logging
from pathlib import Path
from typing import Dict, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

from pose_data import LabelTrack, ValidationError, segments_of
from seg_metrics import REPORT_KEYS

logger = logging.getLogger(__name__)

SVG_HASH_SALT = 'segtcn'
ROW_HEIGHT = 0.8


def _draw_track(ax, track: LabelTrack, row: float, colors):
    for seg in segments_of(track):
        ax.broken_barh([(seg.start, seg.length)], (row, ROW_HEIGHT), facecolors=colors[seg.label % len(colors)])


def render_timelines(sequence_ids: Sequence[str], truths: Sequence[LabelTrack],
                     predictions: Sequence[LabelTrack], class_names: Sequence[str], path) -> Path:
    if not (len(sequence_ids) == len(truths) == len(predictions)) or not sequence_ids:
        raise ValidationError("timeline needs one truth and one prediction per sequence")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.rcParams['svg.hashsalt'] = SVG_HASH_SALT
    colors = plt.get_cmap('tab20').colors

    fig, axes = plt.subplots(len(sequence_ids), 1, figsize=(12, 1.4 * len(sequence_ids) + 0.8), squeeze=False)
    for ax, sid, truth, pred in zip(axes[:, 0], sequence_ids, truths, predictions):
        _draw_track(ax, truth, 1.0, colors)
        _draw_track(ax, pred, 0.0, colors)
        ax.set_xlim(0, truth.frame_count)
        ax.set_ylim(0, 2)
        ax.set_yticks([0.4, 1.4])
        ax.set_yticklabels(['pred', 'truth'])
        ax.set_title(sid, fontsize=10, loc='left')
    axes[-1, 0].set_xlabel('Frame', fontsize=10)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[c % len(colors)]) for c in range(len(class_names))]
    fig.legend(handles, class_names, loc='upper right', ncol=min(len(class_names), 6), fontsize=8)
    plt.tight_layout(rect=(0, 0, 1, 0.92))
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.info(f"💾 Timeline saved to: {path}")
    return path


# ── Report tables ─────────────────────────────────────────────────────────────

def metrics_table(report: dict) -> pd.DataFrame:
    """Rows f1_10 ... acc, columns mean and std."""
    return pd.DataFrame({k: report['metrics'][k] for k in REPORT_KEYS}).T[['mean', 'std']]


def sequence_table(report: dict) -> pd.DataFrame:
    return pd.DataFrame(report['sequences']).set_index('id')[list(REPORT_KEYS)]


def compare_reports(a: dict, b: dict) -> pd.DataFrame:
    """Per-metric means of both reports and the change from a to b."""
    table = pd.DataFrame({'a': metrics_table(a)['mean'], 'b': metrics_table(b)['mean']})
    table['delta'] = table['b'] - table['a']
    return table


def table_records(table: pd.DataFrame) -> Dict[str, Dict[str, float]]:
    return {str(idx): {col: float(val) for col, val in row.items()} for idx, row in table.iterrows()}


def format_table(table: pd.DataFrame) -> str:
    return table.to_string(float_format=lambda v: f"{v:8.2f}")
