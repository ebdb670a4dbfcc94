#!/usr/bin/env python3
"""
segtcn - skeleton-heatmap action segmentation toolkit.

Subcommands:
  synth      generate the synthetic puppet dataset
  rasterize  write model-input heatmap clips (HMAP files) for a manifest
  encode     pool heatmaps into per-frame feature files (.npy, D x M)
  train      train the single-branch model, or the two-stage fusion model
  eval       score a checkpoint on a split, optionally under limb dropout
  perturb    apply limb dropout to one skeleton file
  report     print a report's metric table, or compare two reports

Machine-readable JSON goes to stdout, logs to stderr. Exit code 0 on success,
1 for invalid input or usage, 2 for runtime failures; errors are printed to
stderr as one JSON line {"error", "message", "exit_code"}.

Environment:
  SEGTCN_THREADS  worker threads for rasterize/encode/eval (default: CPU count)
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from heatmap_raster import (RasterConfig, heatmap_of_kind, model_heatmaps, pooled_encoder,
                            read_hmap, save_feature_track, write_hmap)
from limb_dropout import drop_limbs
from pose_data import ValidationError, load_manifest, load_skeleton_sequence, write_skeleton_sequence
from puppet_synth import FRAMES_PER_SEGMENT, generate
from run_config import load_run_config
from timeline_plot import compare_reports, format_table, metrics_table, render_timelines, table_records
from train_harness import FEATURE_MODES, evaluate, train_fused, train_single, validate_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def worker_count() -> int:
    raw = os.environ.get('SEGTCN_THREADS')
    if raw is None or raw == '':
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"SEGTCN_THREADS must be a positive integer, got '{raw}'")
    if value < 1:
        raise ValidationError(f"SEGTCN_THREADS must be a positive integer, got '{raw}'")
    return value


def emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _raster_for(args) -> RasterConfig:
    cfg = load_run_config(getattr(args, 'config', None))
    cfg = cfg.with_raster(heatmap=getattr(args, 'heatmap', None), grid=getattr(args, 'grid', None))
    return cfg.raster


def _entries(manifest, split: str):
    return manifest.entries if split == 'all' else manifest.split(split)


# ── Subcommands ───────────────────────────────────────────────────────────────

def cmd_synth(args) -> int:
    manifest = generate(args.out, num_videos=args.videos, num_classes=args.classes,
                        frames_per_segment=(args.min_frames, args.max_frames), seed=args.seed,
                        with_features=not args.no_features)
    emit({'manifest': str(Path(args.out) / 'manifest.json'), 'videos': len(manifest.entries)})
    return EXIT_OK


def cmd_rasterize(args) -> int:
    raster = _raster_for(args)
    manifest = load_manifest(args.manifest)
    workers = worker_count()
    written = []
    for entry in _entries(manifest, args.split):
        seq = load_skeleton_sequence(entry.skeleton)
        clip = heatmap_of_kind(seq, raster, workers) if args.full else model_heatmaps(seq, raster, workers)
        written.append(str(write_hmap(clip, Path(args.out) / f"{entry.sequence_id}.hmap")))
        logger.info(f"💾 {entry.sequence_id}: {clip.frame_count} frames {clip.width}x{clip.height}x{clip.channels}")
    emit({'written': written})
    return EXIT_OK


def cmd_encode(args) -> int:
    raster = _raster_for(args)
    if args.hmap:
        track = pooled_encoder(read_hmap(args.hmap), raster.grid)
        emit({'written': [str(save_feature_track(track, args.out))], 'dim': track.dim})
        return EXIT_OK
    manifest = load_manifest(args.manifest)
    workers = worker_count()
    written = []
    for entry in _entries(manifest, args.split):
        track = pooled_encoder(model_heatmaps(load_skeleton_sequence(entry.skeleton), raster, workers), raster.grid)
        written.append(str(save_feature_track(track, Path(args.out) / f"{entry.sequence_id}.npy")))
    emit({'written': written, 'dim': raster.grid * raster.grid})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg = cfg.with_train(seed=args.seed, epochs=args.epochs, lr=args.lr, features=args.features,
                         epochs_stage2=args.epochs_stage2, lr_stage2=args.lr_stage2)
    cfg = cfg.with_raster(heatmap=args.heatmap)
    manifest = load_manifest(args.manifest)
    trainer = train_fused if args.fusion else train_single
    # train stays single-threaded
    result = trainer(manifest, args.out, cfg.model, cfg.loss, cfg.train, cfg.raster, args.class_map, workers=1)
    payload = {'checkpoint': str(result.checkpoint)}
    if args.fusion:
        payload.update({'heat_checkpoint': str(result.heat.checkpoint), 'aux_checkpoint': str(result.aux.checkpoint),
                        'final_loss': {'fused': result.fused_loss, 'heat': result.heat_loss, 'aux': result.aux_loss}})
    else:
        payload['best_checkpoint'] = str(result.best_checkpoint)
        payload['epoch_losses'] = result.epoch_losses
    emit(payload)
    return EXIT_OK


def cmd_eval(args) -> int:
    # raster settings come from the checkpoint; the config only supplies the seed
    cfg = load_run_config(args.config).with_train(seed=args.drop_seed)
    manifest = load_manifest(args.manifest)
    result = evaluate(args.checkpoint, manifest, split=args.split, drop_p=args.drop_p, drop_seed=cfg.train.seed,
                      oracle=args.oracle, workers=worker_count(), class_map=args.class_map,
                      ignore_classes=args.ignore_class or ())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, 'w', encoding='utf-8') as f:
            json.dump(result.report, f, indent=2, sort_keys=True)
        logger.info(f"💾 Report saved to: {out}")
    if args.timeline:
        ids = [row['id'] for row in result.report['sequences']]
        render_timelines(ids, result.truths, result.predictions, result.truths[0].class_names, args.timeline)
    emit(result.report)
    return EXIT_OK


def cmd_perturb(args) -> int:
    seq = load_skeleton_sequence(args.skeleton)
    dropped = drop_limbs(seq, args.p, args.seed)
    write_skeleton_sequence(dropped, args.out)
    zeroed = int((dropped.joints[:, :, 2] != seq.joints[:, :, 2]).any(axis=1).sum())
    emit({'written': str(args.out), 'frames': seq.frame_count, 'frames_perturbed': zeroed})
    return EXIT_OK


def _read_report(path) -> dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return validate_report(json.load(f))
    except OSError as e:
        raise ValidationError(f"cannot read report {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def _report_paths(args) -> List[str]:
    """`report a`, `report a --compare b` and `report --compare a b` all read as a then b."""
    paths = ([args.report] if args.report else []) + (args.compare or [])
    if not paths:
        raise ValidationError("report: give a report file, or --compare A B")
    if len(paths) > 2 or (args.compare and len(paths) != 2):
        raise ValidationError(f"report: expected 'A --compare B' or '--compare A B', got {len(paths)} files")
    return paths


def cmd_report(args) -> int:
    paths = _report_paths(args)
    reports = [_read_report(path) for path in paths]
    table = compare_reports(*reports) if len(reports) == 2 else metrics_table(reports[0])
    print(format_table(table), file=sys.stderr)
    emit(table_records(table))
    return EXIT_OK


# ── Parser ────────────────────────────────────────────────────────────────────

def build_parser() -> CliParser:
    parser = CliParser(prog='segtcn', description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', parser_class=CliParser)
    defaults = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser('synth', help='generate the synthetic puppet dataset', formatter_class=defaults)
    p.add_argument('--videos', type=int, default=5)
    p.add_argument('--classes', type=int, default=4)
    p.add_argument('--seed', type=int, default=7)
    p.add_argument('--min-frames', type=int, default=FRAMES_PER_SEGMENT[0], help='shortest segment')
    p.add_argument('--max-frames', type=int, default=FRAMES_PER_SEGMENT[1], help='longest segment')
    p.add_argument('--no-features', action='store_true', help='skip the auxiliary feature files')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_synth)

    for name, func, help_text in (('rasterize', cmd_rasterize, 'write HMAP heatmap clips'),
                                  ('encode', cmd_encode, 'write pooled feature files')):
        p = sub.add_parser(name, help=help_text, formatter_class=defaults)
        if name == 'encode':
            source = p.add_mutually_exclusive_group(required=True)
            source.add_argument('--manifest')
            source.add_argument('--hmap', help='pool one HMAP file instead of a manifest')
            p.add_argument('--grid', type=int, default=None, help='pooling grid (default from config)')
        else:
            p.add_argument('--manifest', required=True)
            p.add_argument('--full', action='store_true', help='full-frame per-channel rasters instead of model input')
        p.add_argument('--split', choices=('train', 'test', 'all'), default='all')
        p.add_argument('--heatmap', choices=('joint', 'limb', 'joint+limb'), default=None,
                       help='heatmap kind (default from config: joint+limb)')
        p.add_argument('--config', default=None, help='RunConfig JSON')
        p.add_argument('--out', required=True)
        p.set_defaults(func=func)

    p = sub.add_parser('train', help='train a model', formatter_class=defaults)
    p.add_argument('--manifest', required=True)
    p.add_argument('--config', default=None, help='RunConfig JSON')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--epochs-stage2', type=int, default=None)
    p.add_argument('--lr-stage2', type=float, default=None)
    p.add_argument('--features', choices=FEATURE_MODES, default=None)
    p.add_argument('--heatmap', choices=('joint', 'limb', 'joint+limb'), default=None)
    p.add_argument('--fusion', action='store_true', help='two-stage heatmap + auxiliary fusion training')
    p.add_argument('--class-map', default=None)
    p.add_argument('--out', default='model.ckpt')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint', formatter_class=defaults)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--manifest', required=True)
    p.add_argument('--split', choices=('train', 'test'), default='test')
    p.add_argument('--drop-p', type=float, default=None, help='limb dropout probability')
    p.add_argument('--seed', '--drop-seed', dest='drop_seed', type=int, default=None,
                   help='limb dropout seed (default: train.seed from --config, else 0)')
    p.add_argument('--config', default=None, help='RunConfig JSON')
    p.add_argument('--oracle', action='store_true', help='score ground truth as the prediction')
    p.add_argument('--ignore-class', type=int, action='append', help='class id left out of segmental metrics')
    p.add_argument('--class-map', default=None)
    p.add_argument('--timeline', default=None, help='SVG timeline output')
    p.add_argument('--out', default=None, help='report JSON output')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('perturb', help='limb dropout on one skeleton file', formatter_class=defaults)
    p.add_argument('--skeleton', required=True)
    p.add_argument('--p', type=float, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser('report', help='show or compare evaluation reports', formatter_class=defaults)
    p.add_argument('report', nargs='?', default=None)
    p.add_argument('--compare', nargs='+', default=None, metavar='REPORT',
                   help='B, or A B; prints B - A per metric')
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({'error': type(exc).__name__, 'message': str(exc), 'exit_code': code}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    verbose = '--verbose' in (argv if argv is not None else sys.argv[1:])
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format='%(asctime)s - %(levelname)s - %(message)s', force=True)
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, 'command', None):
            raise ValidationError("missing subcommand (synth, rasterize, encode, train, eval, perturb, report)")
        return args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    except ValidationError as e:
        logger.error(f"❌ {e}")
        return _fail(e, EXIT_VALIDATION)
    except Exception as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return _fail(e, EXIT_RUNTIME)


if __name__ == '__main__':
    sys.exit(main())
