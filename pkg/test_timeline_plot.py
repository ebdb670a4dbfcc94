#!/usr/bin/env python3
"""
Tests for the timeline SVG and report tables
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from pose_data import LabelTrack, ValidationError
from timeline_plot import compare_reports, format_table, metrics_table, render_timelines, sequence_table, table_records

NAMES = ('walk', 'reach', 'sit')


def _report(acc):
    keys = ('f1_10', 'f1_25', 'f1_50', 'edit', 'map', 'acc')
    return {
        'metrics': {k: {'mean': acc if k == 'acc' else 50.0, 'std': 1.0} for k in keys},
        'sequences': [{'id': 'vid_000', **{k: 50.0 for k in keys}}],
    }


def test_svg_is_byte_deterministic():
    truth = LabelTrack(np.repeat([0, 1, 2], 10), NAMES)
    pred = LabelTrack(np.repeat([0, 2, 2], 10), NAMES)
    with tempfile.TemporaryDirectory() as tmp:
        a = render_timelines(['vid_000'], [truth], [pred], NAMES, Path(tmp) / 'a.svg').read_bytes()
        b = render_timelines(['vid_000'], [truth], [pred], NAMES, Path(tmp) / 'b.svg').read_bytes()
    assert a == b
    assert b'vid_000' in a


def test_timeline_needs_matching_tracks():
    truth = LabelTrack(np.zeros(5, dtype=np.int64), NAMES)
    try:
        render_timelines(['a', 'b'], [truth], [truth], NAMES, '/tmp/never.svg')
    except ValidationError:
        return
    raise AssertionError("expected ValidationError")


def test_report_tables():
    table = metrics_table(_report(80.0))
    assert list(table.columns) == ['mean', 'std']
    assert table.loc['acc', 'mean'] == 80.0
    assert sequence_table(_report(80.0)).loc['vid_000', 'edit'] == 50.0

    diff = compare_reports(_report(80.0), _report(65.0))
    assert diff.loc['acc', 'delta'] == -15.0
    assert diff.loc['edit', 'delta'] == 0.0
    records = table_records(diff)
    assert records['acc'] == {'a': 80.0, 'b': 65.0, 'delta': -15.0}
    assert 'acc' in format_table(diff)


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
