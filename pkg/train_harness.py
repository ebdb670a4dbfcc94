#!/usr/bin/env python3
"""
Training and evaluation driver.

train_single: ADAM (lr 0.001) over the manifest's train split, one full
sequence per step in a seeded shuffled order, deep supervision on every stage.
Writes the final checkpoint plus `<stem>_best<suffix>` holding the parameters
of the epoch with the lowest mean training loss.

train_fused: two-stage protocol. Stage i trains the heatmap branch and the
auxiliary branch separately with the same losses; stage ii builds the fused
model from those weights (fusion convs at 0.5 * [I | I], fused heads at the
mean of the branch heads) and trains everything jointly at lr 0.0005.

evaluate: predicts every sequence of a split (optionally after limb dropout
and re-rasterization), scores it, and aggregates mean/std across sequences.
Checkpoints carry the feature mode, raster settings and class names, so
evaluation needs nothing but the checkpoint and the manifest.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from compute_core import (AdamState, ShapeError, Tape, Tensor, Tensor2D, adam_step_tensors,
                          cast_params, save_checkpoint, zero_grads)
from heatmap_raster import RasterConfig, heatmap_features, load_feature_track
from limb_dropout import drop_limbs
from mstcn_model import (FUSION_MODES, FusionModel, ModelConfig, SegModel, argmax_labels,
                         count_parameters, final_probs, load_model)
from pose_data import (DatasetManifest, FeatureTrack, LabelTrack, ValidationError, load_class_map,
                       load_label_track, load_skeleton_sequence)
from seg_losses import LossConfig, fused_supervision, total_loss
from seg_metrics import REPORT_KEYS, one_hot, segmentation_report

logger = logging.getLogger(__name__)

LEARNING_RATE = 0.001
FUSION_LEARNING_RATE = 0.0005
EPOCHS = 100
FUSION_EPOCHS = 100
FEATURE_MODES = ('builtin', 'file')
PRECISIONS = ('float32', 'float64')
MODEL_SETTINGS = ('feature_width', 'prediction_layers', 'refinement_layers', 'refinement_stages',
                  'kernel_size', 'dropout', 'shared_weights')


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = LEARNING_RATE
    lr_stage2: float = FUSION_LEARNING_RATE
    epochs: int = EPOCHS
    epochs_stage2: int = FUSION_EPOCHS
    seed: int = 0
    features: str = 'builtin'
    fusion_mode: str = 'recurrent'
    precision: str = 'float32'

    def __post_init__(self):
        if not self.lr > 0 or not self.lr_stage2 > 0:
            raise ValidationError(f"train.lr and train.lr_stage2 must be > 0, got {self.lr}, {self.lr_stage2}")
        if self.epochs < 0 or self.epochs_stage2 < 0:
            raise ValidationError(f"train.epochs must be >= 0, got {self.epochs}, {self.epochs_stage2}")
        if self.features not in FEATURE_MODES:
            raise ValidationError(f"train.features must be one of {FEATURE_MODES}, got '{self.features}'")
        if self.fusion_mode not in FUSION_MODES:
            raise ValidationError(f"train.fusion_mode must be one of {FUSION_MODES}, got '{self.fusion_mode}'")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"train.precision must be one of {PRECISIONS}, got '{self.precision}'")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class SequenceData:
    sequence_id: str
    labels: LabelTrack
    features: FeatureTrack
    aux: Optional[FeatureTrack] = None


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    epoch_losses: List[float]
    model: object


@dataclass
class FusedTrainResult:
    checkpoint: Path
    heat: TrainResult
    aux: TrainResult
    fused: TrainResult
    heat_loss: float
    aux_loss: float
    fused_loss: float


@dataclass
class EvalResult:
    report: dict
    truths: List[LabelTrack] = field(default_factory=list)
    predictions: List[LabelTrack] = field(default_factory=list)


def model_config_for(settings: Optional[dict], input_dim: int, num_classes: int) -> ModelConfig:
    settings = dict(settings or {})
    unknown = sorted(set(settings) - set(MODEL_SETTINGS))
    if unknown:
        raise ValidationError(f"unknown model setting(s): {', '.join(unknown)}")
    return ModelConfig(input_dim=input_dim, num_classes=num_classes, **settings)


def resolve_class_names(manifest: DatasetManifest, class_map=None) -> Tuple[str, ...]:
    return load_class_map(class_map if class_map is not None else manifest.class_map_path)


# ── Data ──────────────────────────────────────────────────────────────────────

def sequence_features(entry, raster: RasterConfig, features: str, drop_p: Optional[float] = None,
                      drop_seed: int = 0, workers: int = 1) -> FeatureTrack:
    """Primary feature track of one manifest entry."""
    if features == 'file':
        if drop_p is not None and drop_p > 0:
            raise ValidationError("limb dropout needs builtin heatmap features, not feature files")
        if entry.features is None:
            raise ValidationError(f"sequence '{entry.sequence_id}' has no feature file")
        return load_feature_track(entry.features, raster.grid)
    seq = load_skeleton_sequence(entry.skeleton)
    if drop_p is not None:
        seq = drop_limbs(seq, drop_p, drop_seed)
    return heatmap_features(seq, raster, workers)


def load_sequence(entry, class_names: Sequence[str], raster: RasterConfig, features: str,
                  need_aux: bool = False, drop_p: Optional[float] = None, drop_seed: int = 0,
                  workers: int = 1) -> SequenceData:
    labels = load_label_track(entry.labels, tuple(class_names))
    feats = sequence_features(entry, raster, features, drop_p, drop_seed, workers)
    aux = None
    if need_aux:
        if entry.features is None:
            raise ValidationError(f"sequence '{entry.sequence_id}' has no auxiliary feature file")
        aux = load_feature_track(entry.features, raster.grid)
    for name, track in (('features', feats), ('auxiliary features', aux)):
        if track is not None and track.frame_count != labels.frame_count:
            raise ShapeError(f"'{entry.sequence_id}': {name} have {track.frame_count} frames, "
                             f"labels have {labels.frame_count}")
    return SequenceData(entry.sequence_id, labels, feats, aux)


def load_split(manifest: DatasetManifest, split: str, class_names: Sequence[str], raster: RasterConfig,
               features: str = 'builtin', need_aux: bool = False, workers: int = 1) -> List[SequenceData]:
    entries = manifest.split(split)
    if not entries:
        raise ValidationError(f"manifest has no '{split}' sequences")
    data = [load_sequence(e, class_names, raster, features, need_aux, workers=workers) for e in entries]
    logger.info(f"📂 Loaded {len(data)} {split} sequences ({sum(d.labels.frame_count for d in data):,} frames)")
    return data


def _tensor(track: FeatureTrack, dtype) -> Tensor2D:
    return Tensor2D(track.values.astype(dtype), requires_grad=False)


# ── Losses per model kind ─────────────────────────────────────────────────────

def single_loss_fn(model: SegModel, loss_cfg: LossConfig, dtype) -> Callable[[Tape, SequenceData], Tensor]:
    def loss(tape: Tape, item: SequenceData) -> Tensor:
        out = model.forward(tape, _tensor(item.features, dtype))
        return total_loss(tape, out.probs, item.labels, loss_cfg)
    return loss


def aux_loss_fn(model: SegModel, loss_cfg: LossConfig, dtype) -> Callable[[Tape, SequenceData], Tensor]:
    def loss(tape: Tape, item: SequenceData) -> Tensor:
        out = model.forward(tape, _tensor(item.aux, dtype))
        return total_loss(tape, out.probs, item.labels, loss_cfg)
    return loss


def fused_loss_fn(model: FusionModel, loss_cfg: LossConfig, dtype) -> Callable[[Tape, SequenceData], Tensor]:
    def loss(tape: Tape, item: SequenceData) -> Tensor:
        out = model.forward(tape, _tensor(item.features, dtype), _tensor(item.aux, dtype))
        return total_loss(tape, fused_supervision(out, loss_cfg), item.labels, loss_cfg)
    return loss


def mean_loss(loss: Callable[[Tape, SequenceData], Tensor], data: Sequence[SequenceData]) -> float:
    """Evaluation-mode (no dropout) loss averaged over sequences."""
    return float(np.mean([float(loss(Tape(training=False), item).value) for item in data]))


# ── Training loop ─────────────────────────────────────────────────────────────

def best_path_for(path: Path) -> Path:
    return path.with_name(f"{path.stem}_best{path.suffix}")


def fit(model, loss: Callable[[Tape, SequenceData], Tensor], data: Sequence[SequenceData],
        epochs: int, lr: float, seed: int, out: Path, topology: dict, label: str = 'model') -> TrainResult:
    out = Path(out)
    best_out = best_path_for(out)
    params = model.params
    state = AdamState(lr=lr)
    order_rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng([seed, 1])

    if epochs == 0:
        save_checkpoint(best_out, params, topology)

    best = float('inf')
    epoch_losses: List[float] = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for index in order_rng.permutation(len(data)):
            item = data[index]
            zero_grads(params)
            tape = Tape(training=True, rng=dropout_rng)
            value = loss(tape, item)
            scalar = float(value.value)
            if not np.isfinite(scalar):
                raise TrainingDiverged(f"non-finite loss {scalar} at epoch {epoch}, sequence '{item.sequence_id}'")
            tape.backward(value)
            adam_step_tensors(params, state)
            total += scalar
        epoch_loss = total / len(data)
        epoch_losses.append(epoch_loss)
        logger.info(f"📉 [{label}] epoch {epoch}/{epochs} loss {epoch_loss:.5f}")
        if epoch_loss < best:
            best = epoch_loss
            save_checkpoint(best_out, params, topology)

    save_checkpoint(out, params, topology)
    logger.info(f"💾 [{label}] saved {out} (best epoch loss {best:.5f})" if epoch_losses
                else f"💾 [{label}] saved untrained {out}")
    return TrainResult(out, best_out, epoch_losses, model)


def _topology(model, train_cfg: TrainConfig, raster: RasterConfig, class_names: Sequence[str],
              features: Optional[str] = None) -> dict:
    topology = model.topology()
    topology.update({'features': features or train_cfg.features, 'raster': asdict(raster),
                     'class_names': list(class_names)})
    return topology


def train_single(manifest: DatasetManifest, out, model_settings: Optional[dict] = None,
                 loss_cfg: LossConfig = LossConfig(), train_cfg: TrainConfig = TrainConfig(),
                 raster: RasterConfig = RasterConfig(), class_map=None, workers: int = 1) -> TrainResult:
    class_names = resolve_class_names(manifest, class_map)
    data = load_split(manifest, 'train', class_names, raster, train_cfg.features, workers=workers)
    cfg = model_config_for(model_settings, data[0].features.dim, len(class_names))
    model = SegModel(cfg, seed=train_cfg.seed)
    if train_cfg.precision != 'float32':
        cast_params(model.params, train_cfg.dtype)
    logger.info(f"🧠 Single-branch model: {cfg.stage_count} stages, {count_parameters(model):,} parameters")
    return fit(model, single_loss_fn(model, loss_cfg, train_cfg.dtype), data, train_cfg.epochs,
               train_cfg.lr, train_cfg.seed, Path(out), _topology(model, train_cfg, raster, class_names), 'single')


def train_fused(manifest: DatasetManifest, out, model_settings: Optional[dict] = None,
                loss_cfg: LossConfig = LossConfig(), train_cfg: TrainConfig = TrainConfig(),
                raster: RasterConfig = RasterConfig(), class_map=None, workers: int = 1) -> FusedTrainResult:
    """Heatmap branch on builtin features, auxiliary branch on the manifest's
    feature files. Writes `<stem>_heat`, `<stem>_aux` and the fused `out`."""
    if train_cfg.features != 'builtin':
        raise ValidationError("fusion training uses builtin heatmap features for the heatmap branch")
    out = Path(out)
    class_names = resolve_class_names(manifest, class_map)
    data = load_split(manifest, 'train', class_names, raster, 'builtin', need_aux=True, workers=workers)
    C, dtype = len(class_names), train_cfg.dtype
    heat_cfg = model_config_for(model_settings, data[0].features.dim, C)
    aux_cfg = model_config_for(model_settings, data[0].aux.dim, C)

    # stage i: branches trained separately
    heat = SegModel(heat_cfg, seed=train_cfg.seed)
    aux = SegModel(aux_cfg, seed=train_cfg.seed + 1)
    if train_cfg.precision != 'float32':
        cast_params(heat.params, dtype)
        cast_params(aux.params, dtype)
    heat_result = fit(heat, single_loss_fn(heat, loss_cfg, dtype), data, train_cfg.epochs, train_cfg.lr,
                      train_cfg.seed, out.with_name(f"{out.stem}_heat{out.suffix}"),
                      _topology(heat, train_cfg, raster, class_names, 'builtin'), 'heat')
    aux_result = fit(aux, aux_loss_fn(aux, loss_cfg, dtype), data, train_cfg.epochs, train_cfg.lr,
                     train_cfg.seed + 1, out.with_name(f"{out.stem}_aux{out.suffix}"),
                     _topology(aux, train_cfg, raster, class_names, 'file'), 'aux')

    # stage ii: joint training from the branch solutions
    fused = FusionModel(heat_cfg, aux_cfg, train_cfg.fusion_mode, seed=train_cfg.seed)
    fused.init_from_branches(heat, aux)
    if train_cfg.precision != 'float32':
        cast_params(fused.params, dtype)
    logger.info(f"🧠 Fusion model ({train_cfg.fusion_mode}): {count_parameters(fused):,} parameters")
    fused_loss = fused_loss_fn(fused, loss_cfg, dtype)
    fused_result = fit(fused, fused_loss, data, train_cfg.epochs_stage2, train_cfg.lr_stage2,
                       train_cfg.seed + 2, out, _topology(fused, train_cfg, raster, class_names, 'builtin'), 'fused')

    heat_loss = mean_loss(single_loss_fn(heat, loss_cfg, dtype), data)
    aux_loss = mean_loss(aux_loss_fn(aux, loss_cfg, dtype), data)
    final = mean_loss(fused_loss, data)
    verdict = '✅' if final <= min(heat_loss, aux_loss) else '⚠️'
    logger.info(f"{verdict} final training loss: fused {final:.5f}, heat {heat_loss:.5f}, aux {aux_loss:.5f}")
    return FusedTrainResult(out, heat_result, aux_result, fused_result, heat_loss, aux_loss, final)


# ── Evaluation ────────────────────────────────────────────────────────────────

def _score_entry(index: int, entry, model, topology: Optional[dict], class_names, drop_p, drop_seed,
                 oracle: bool, ignore_classes) -> Tuple[dict, LabelTrack, LabelTrack]:
    truth = load_label_track(entry.labels, tuple(class_names))
    if oracle:
        pred, probs = truth, one_hot(truth.labels, len(class_names))
    else:
        raster = RasterConfig(**topology['raster'])
        kind = topology['features']
        feats = sequence_features(entry, raster, kind, drop_p, drop_seed + index)
        aux = None
        if isinstance(model, FusionModel):
            if entry.features is None:
                raise ValidationError(f"sequence '{entry.sequence_id}' has no auxiliary feature file")
            aux = load_feature_track(entry.features, raster.grid)
        expected = model.cfg.input_dim
        if feats.dim != expected:
            raise ShapeError(f"checkpoint expects {expected}-dim features, '{entry.sequence_id}' has {feats.dim}")
        if aux is not None and aux.dim != model.aux.cfg.input_dim:
            raise ShapeError(f"checkpoint expects {model.aux.cfg.input_dim}-dim auxiliary features, "
                             f"'{entry.sequence_id}' has {aux.dim}")
        if feats.frame_count != truth.frame_count:
            raise ShapeError(f"'{entry.sequence_id}': features have {feats.frame_count} frames, "
                             f"labels have {truth.frame_count}")
        started = time.perf_counter()
        probs = final_probs(model, feats, aux)
        elapsed = time.perf_counter() - started
        logger.info(f"⏱️ {entry.sequence_id}: {1000.0 * elapsed / truth.frame_count:.2f} ms/frame "
                    f"over {truth.frame_count} frames")
        pred = LabelTrack(argmax_labels(probs), tuple(class_names))
    row = {'id': entry.sequence_id, **segmentation_report(pred, probs, truth, ignore_classes)}
    return row, truth, pred


def evaluate(checkpoint, manifest: DatasetManifest, split: str = 'test', drop_p: Optional[float] = None,
             drop_seed: int = 0, oracle: bool = False, workers: int = 1, class_map=None,
             ignore_classes: Sequence[int] = ()) -> EvalResult:
    """Score a split; metrics are mean and population std across sequences."""
    if drop_p is not None and not 0.0 <= drop_p <= 1.0:
        raise ValidationError(f"drop probability must be in [0, 1], got {drop_p}")
    class_names = resolve_class_names(manifest, class_map)
    model, topology, num_parameters = None, None, 0
    if not oracle:
        if checkpoint is None:
            raise ValidationError("evaluation needs a checkpoint unless --oracle is set")
        model, topology = load_model(checkpoint)
        num_parameters = count_parameters(model)
        if model.cfg.num_classes != len(class_names):
            raise ShapeError(f"checkpoint predicts {model.cfg.num_classes} classes, "
                             f"class map has {len(class_names)}")
    entries = manifest.split(split)
    if not entries:
        raise ValidationError(f"manifest has no '{split}' sequences")

    def score(pair):
        index, entry = pair
        return _score_entry(index, entry, model, topology, class_names, drop_p, drop_seed, oracle,
                            tuple(ignore_classes))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scored = list(pool.map(score, enumerate(entries)))

    table = pd.DataFrame([row for row, _, _ in scored]).set_index('id')
    metrics = {key: {'mean': float(table[key].mean()), 'std': float(table[key].std(ddof=0))}
               for key in REPORT_KEYS}
    report = {
        'split': split,
        'drop_p': drop_p,
        'oracle': oracle,
        'num_parameters': num_parameters,
        'num_sequences': len(entries),
        'metrics': metrics,
        'sequences': [{'id': sid, **{k: float(v) for k, v in row.items()}}
                      for sid, row in table[list(REPORT_KEYS)].iterrows()],
    }
    validate_report(report)
    logger.info(f"✅ {split}: F1@10 {metrics['f1_10']['mean']:.2f} edit {metrics['edit']['mean']:.2f} "
                f"mAP {metrics['map']['mean']:.2f} acc {metrics['acc']['mean']:.2f} "
                f"over {len(entries)} sequences")
    return EvalResult(report, [t for _, t, _ in scored], [p for _, _, p in scored])


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_report(report: dict) -> dict:
    """Check an evaluation report against its published layout."""
    if not isinstance(report, dict):
        raise ValidationError("report must be a JSON object")
    required = {'split': str, 'oracle': bool, 'num_parameters': int, 'num_sequences': int,
                'metrics': dict, 'sequences': list}
    for key, kind in required.items():
        if key not in report:
            raise ValidationError(f"report is missing '{key}'")
        if not isinstance(report[key], kind) or (kind is int and isinstance(report[key], bool)):
            raise ValidationError(f"report '{key}' must be {kind.__name__}")
    if 'drop_p' not in report or not (report['drop_p'] is None or _is_number(report['drop_p'])):
        raise ValidationError("report 'drop_p' must be a number or null")
    for key in REPORT_KEYS:
        entry = report['metrics'].get(key)
        if not isinstance(entry, dict) or set(entry) != {'mean', 'std'} \
                or not all(_is_number(v) for v in entry.values()):
            raise ValidationError(f"report metric '{key}' must be {{'mean': number, 'std': number}}")
    if len(report['sequences']) != report['num_sequences']:
        raise ValidationError("report 'sequences' doesn't match 'num_sequences'")
    for row in report['sequences']:
        if not isinstance(row, dict) or not isinstance(row.get('id'), str) \
                or not all(_is_number(row.get(k)) for k in REPORT_KEYS):
            raise ValidationError(f"malformed per-sequence report row {row!r}")
    return report
