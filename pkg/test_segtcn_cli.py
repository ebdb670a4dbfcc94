#!/usr/bin/env python3
"""
End-to-end tests of the segtcn command line on a tiny synthetic dataset
"""

import io
import json
import sys
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import asdict
from pathlib import Path

from compute_core import save_checkpoint
from heatmap_raster import RasterConfig, read_hmap
from mstcn_model import ModelConfig, SegModel
from segtcn import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main

TINY_CONFIG = {
    'model': {'feature_width': 8, 'prediction_layers': 3, 'refinement_layers': 3, 'refinement_stages': 1},
    'train': {'epochs': 1},
}


def run(*argv):
    """(exit code, stdout, stderr) of one CLI invocation."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def _synth(tmp: Path):
    code, out, _ = run('synth', '--videos', 3, '--classes', 3, '--min-frames', 8, '--max-frames', 12,
                       '--out', tmp / 'data')
    assert code == EXIT_OK
    return Path(json.loads(out)['manifest'])


def _config(tmp: Path):
    path = tmp / 'tiny.json'
    path.write_text(json.dumps(TINY_CONFIG), encoding='utf-8')
    return path


def test_synth_train_eval_report():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        code, out, _ = run('train', '--manifest', manifest, '--config', _config(tmp), '--out', tmp / 'm.ckpt')
        assert code == EXIT_OK
        trained = json.loads(out)
        assert Path(trained['checkpoint']).exists() and Path(trained['best_checkpoint']).exists()
        assert len(trained['epoch_losses']) == 1

        code, out, _ = run('eval', '--checkpoint', tmp / 'm.ckpt', '--manifest', manifest,
                           '--out', tmp / 'clean.json', '--timeline', tmp / 'clean.svg')
        assert code == EXIT_OK
        report = json.loads(out)
        assert report == json.loads((tmp / 'clean.json').read_text())
        assert set(report['metrics']) == {'f1_10', 'f1_25', 'f1_50', 'edit', 'map', 'acc'}
        assert (tmp / 'clean.svg').read_text().lstrip().startswith('<?xml')

        code, _, _ = run('eval', '--checkpoint', tmp / 'm.ckpt', '--manifest', manifest,
                         '--drop-p', 1.0, '--out', tmp / 'dropped.json')
        assert code == EXIT_OK

        code, out, _ = run('report', tmp / 'clean.json', '--compare', tmp / 'dropped.json')
        assert code == EXIT_OK
        table = json.loads(out)
        assert set(table) == set(report['metrics'])
        assert set(table['acc']) == {'a', 'b', 'delta'}


def test_rasterize_writes_model_input_clips():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        code, out, _ = run('rasterize', '--manifest', manifest, '--split', 'test', '--out', tmp / 'hmap')
        assert code == EXIT_OK
        (written,) = json.loads(out)['written']
        header = Path(written).read_bytes().split(b'\n', 1)[0].decode('ascii').split()
        assert header[:2] == ['HMAP', 'v1'] and header[3:] == ['56', '56', '3', 'f32le']

        code, out, _ = run('encode', '--hmap', written, '--out', tmp / 'one.npy')
        assert code == EXIT_OK and json.loads(out)['dim'] == 49
        assert read_hmap(written).frame_count == int(header[2])


def test_eval_with_mismatched_checkpoint_is_a_runtime_error():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        model = SegModel(ModelConfig(input_dim=10, num_classes=3, feature_width=4, prediction_layers=2,
                                     refinement_layers=2, refinement_stages=0))
        topology = dict(model.topology(), features='builtin', raster=asdict(RasterConfig()),
                        class_names=['raise-arms', 'squat', 'lean-left'])
        ckpt = save_checkpoint(tmp / 'odd.ckpt', model.params, topology)
        code, out, err = run('eval', '--checkpoint', ckpt, '--manifest', manifest)
        assert code == EXIT_RUNTIME
        assert out == ''
        error = json.loads(err.strip().splitlines()[-1])
        assert error['error'] == 'ShapeError' and '10-dim' in error['message']


def test_bad_flag_is_a_usage_error():
    code, out, err = run('eval', '--no-such-flag')
    assert code == EXIT_VALIDATION
    assert out == ''
    error = json.loads(err.strip().splitlines()[-1])
    assert error['exit_code'] == 1 and error['error'] == 'ValidationError'
    code, _, _ = run()
    assert code == EXIT_VALIDATION


def test_missing_manifest_is_a_validation_error():
    with tempfile.TemporaryDirectory() as tmp:
        code, _, err = run('eval', '--oracle', '--manifest', Path(tmp) / 'nope.json')
        assert code == EXIT_VALIDATION
        assert 'nope.json' in json.loads(err.strip().splitlines()[-1])['message']


def test_perturb_all_frames():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        skeleton = manifest.parent / 'skeletons' / 'vid_000.json'
        code, out, _ = run('perturb', '--skeleton', skeleton, '--p', 1.0, '--seed', 2, '--out', tmp / 'p.json')
        assert code == EXIT_OK
        result = json.loads(out)
        assert result['frames_perturbed'] == result['frames'] > 0
        code, _, _ = run('perturb', '--skeleton', skeleton, '--p', 2.0, '--out', tmp / 'q.json')
        assert code == EXIT_VALIDATION
        broken = json.loads(skeleton.read_text())
        broken['frames'][0][0] = [1.0, 2.0, 'x']
        (tmp / 'broken.json').write_text(json.dumps(broken), encoding='utf-8')
        code, _, err = run('perturb', '--skeleton', tmp / 'broken.json', '--p', 0.5, '--out', tmp / 'r.json')
        assert code == EXIT_VALIDATION
        assert json.loads(err.strip().splitlines()[-1])['error'] == 'ValidationError'


def test_oracle_eval_needs_no_checkpoint():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        code, out, _ = run('eval', '--oracle', '--manifest', manifest)
        assert code == EXIT_OK
        assert json.loads(out)['metrics']['edit'] == {'mean': 100.0, 'std': 0.0}
        code, _, _ = run('eval', '--manifest', manifest)
        assert code == EXIT_VALIDATION



def _write_report(path: Path, acc: float) -> Path:
    keys = ('f1_10', 'f1_25', 'f1_50', 'edit', 'map', 'acc')
    report = {'split': 'test', 'drop_p': None, 'oracle': False, 'num_parameters': 10, 'num_sequences': 1,
              'metrics': {k: {'mean': acc if k == 'acc' else 50.0, 'std': 0.0} for k in keys},
              'sequences': [{'id': 'vid_000', **{k: 50.0 for k in keys}}]}
    path.write_text(json.dumps(report), encoding='utf-8')
    return path


def test_report_compare_reads_first_then_second():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        clean, dropped = _write_report(tmp / 'clean.json', 80.0), _write_report(tmp / 'dropped.json', 65.0)
        code, both_flag, _ = run('report', '--compare', clean, dropped)
        assert code == EXIT_OK
        code, positional, _ = run('report', clean, '--compare', dropped)
        assert code == EXIT_OK
        assert json.loads(both_flag) == json.loads(positional)
        assert json.loads(both_flag)['acc'] == {'a': 80.0, 'b': 65.0, 'delta': -15.0}
        code, single, _ = run('report', clean)
        assert code == EXIT_OK and json.loads(single)['acc']['mean'] == 80.0
        for argv in (('report',), ('report', '--compare', clean), ('report', clean, '--compare', clean, dropped)):
            code, _, _ = run(*argv)
            assert code == EXIT_VALIDATION, argv


def test_eval_seed_flags_and_config_agree():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = _synth(tmp)
        code, _, _ = run('train', '--manifest', manifest, '--config', _config(tmp), '--out', tmp / 'm.ckpt')
        assert code == EXIT_OK
        seeded = tmp / 'seeded.json'
        seeded.write_text(json.dumps({'train': {'seed': 3}}), encoding='utf-8')
        common = ('eval', '--checkpoint', tmp / 'm.ckpt', '--manifest', manifest, '--drop-p', 0.5)
        reports = []
        for extra in (('--seed', 3), ('--drop-seed', 3), ('--config', seeded), ('--config', _config(tmp), '--seed', 3)):
            code, out, _ = run(*common, *extra)
            assert code == EXIT_OK, extra
            reports.append(json.loads(out))
        assert all(r == reports[0] for r in reports[1:])


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
