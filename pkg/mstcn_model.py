#!/usr/bin/env python3
"""
Multi-stage dilated TCN for framewise action segmentation, single-branch and
two-branch fused.

Single branch: one prediction stage (11 dual-dilated layers on the input
features) followed by three refinement stages (10 dilated layers each) that
consume the previous stage's class probabilities. Every stage keeps the full
temporal resolution and ends in its own classifier head + softmax, so every
stage can be supervised.

Layer, both kinds:
    x -> dilated conv            (refinement, dilation 2^l)
      or conv(2^l) || conv(2^(L-1-l)) -> concat -> 1x1 to F   (prediction stage)
      -> ReLU -> 1x1 F->F -> dropout -> + x

Fused model: two single-branch networks (heatmap features, auxiliary
features). At every stage each branch's pre-classifier F-channel map is
concatenated (2F), reduced by a 1x1 conv back to F and classified by a fused
head. In 'recurrent' mode the fused probabilities feed both branches' next
stage; in 'supervision_only' each branch keeps consuming its own.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from compute_core import (KERNEL_SIZE, ShapeError, Tape, Tensor, Tensor2D, kaiming_uniform,
                          load_checkpoint)
from pose_data import FeatureTrack, LabelTrack, ValidationError

logger = logging.getLogger(__name__)

FEATURE_WIDTH = 64
PREDICTION_LAYERS = 11
REFINEMENT_LAYERS = 10
REFINEMENT_STAGES = 3
DROPOUT = 0.5
FUSION_MODES = ('recurrent', 'supervision_only')


@dataclass(frozen=True)
class StageConfig:
    layer_count: int
    feature_width: int
    dual_dilated: bool
    num_classes: int
    input_dim: int

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValidationError(f"stage layer_count must be >= 1, got {self.layer_count}")
        if self.feature_width < 1:
            raise ValidationError(f"stage feature_width must be >= 1, got {self.feature_width}")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    feature_width: int = FEATURE_WIDTH
    prediction_layers: int = PREDICTION_LAYERS
    refinement_layers: int = REFINEMENT_LAYERS
    refinement_stages: int = REFINEMENT_STAGES
    kernel_size: int = KERNEL_SIZE
    dropout: float = DROPOUT
    shared_weights: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValidationError(f"model.input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 1:
            raise ValidationError(f"model.num_classes must be >= 1, got {self.num_classes}")
        if self.refinement_stages < 0:
            raise ValidationError(f"model.refinement_stages must be >= 0, got {self.refinement_stages}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(f"model.kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"model.dropout must be in [0, 1), got {self.dropout}")
        self.stage_configs()  # validates layer counts and width

    @property
    def stage_count(self) -> int:
        return 1 + self.refinement_stages

    def stage_configs(self) -> List[StageConfig]:
        stages = [StageConfig(self.prediction_layers, self.feature_width, True,
                              self.num_classes, self.input_dim)]
        stages += [StageConfig(self.refinement_layers, self.feature_width, False,
                               self.num_classes, self.num_classes)
                   for _ in range(self.refinement_stages)]
        return stages


@dataclass
class StageOutput:
    features: Tensor2D  # F x M, pre-classifier
    probs: Tensor2D     # C x M


@dataclass
class SegOutput:
    stages: List[StageOutput] = field(default_factory=list)

    @property
    def probs(self) -> List[Tensor2D]:
        return [s.probs for s in self.stages]


@dataclass
class FusedOutput:
    fused: List[Tensor2D]
    heat: List[Tensor2D]
    aux: List[Tensor2D]


def _dilations(layer_count: int, layer: int) -> Tuple[int, int]:
    return 2 ** layer, 2 ** (layer_count - 1 - layer)


class SegModel:
    """Parameters and topology of one multi-stage TCN branch."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, prefix: str = '',
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(seed)
        for index, stage in enumerate(cfg.stage_configs()):
            name = self.stage_key(index)
            if f"{name}.in.w" in self.params:
                continue  # shared refinement weights
            self._build_stage(name, stage, rng)

    def stage_key(self, index: int) -> str:
        if index == 0:
            return f"{self.prefix}pg"
        if self.cfg.shared_weights:
            return f"{self.prefix}rf"
        return f"{self.prefix}rf{index}"

    def _add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value, name=name)

    def _conv(self, name: str, out_ch: int, in_ch: int, kernel: Optional[int], rng):
        shape = (out_ch, in_ch) if kernel is None else (out_ch, in_ch, kernel)
        self._add(f"{name}.w", kaiming_uniform(shape, rng))
        self._add(f"{name}.b", np.zeros(out_ch, dtype=np.float32))

    def _build_stage(self, name: str, stage: StageConfig, rng):
        F, K = stage.feature_width, self.cfg.kernel_size
        self._conv(f"{name}.in", F, stage.input_dim, None, rng)
        for l in range(stage.layer_count):
            layer = f"{name}.l{l}"
            if stage.dual_dilated:
                self._conv(f"{layer}.conv_a", F, F, K, rng)
                self._conv(f"{layer}.conv_b", F, F, K, rng)
                self._conv(f"{layer}.mix", F, 2 * F, None, rng)
            else:
                self._conv(f"{layer}.conv_a", F, F, K, rng)
            self._conv(f"{layer}.out", F, F, None, rng)
        self._conv(f"{name}.head", stage.num_classes, F, None, rng)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # ── Forward ───────────────────────────────────────────────────────────────

    def stage_features(self, tape: Tape, index: int, x: Tensor2D) -> Tensor2D:
        stage = self.cfg.stage_configs()[index]
        if x.channels != stage.input_dim:
            raise ShapeError(f"stage {index} expects {stage.input_dim} input channels, got {x.channels}")
        name = self.stage_key(index)
        f = tape.pointwise_conv(x, self.p(f"{name}.in.w"), self.p(f"{name}.in.b"))
        for l in range(stage.layer_count):
            layer = f"{name}.l{l}"
            d_short, d_long = _dilations(stage.layer_count, l)
            if stage.dual_dilated:
                a = tape.dilated_conv1d(f, self.p(f"{layer}.conv_a.w"), self.p(f"{layer}.conv_a.b"), d_short)
                b = tape.dilated_conv1d(f, self.p(f"{layer}.conv_b.w"), self.p(f"{layer}.conv_b.b"), d_long)
                h = tape.pointwise_conv(tape.concat_channels([a, b]),
                                        self.p(f"{layer}.mix.w"), self.p(f"{layer}.mix.b"))
            else:
                h = tape.dilated_conv1d(f, self.p(f"{layer}.conv_a.w"), self.p(f"{layer}.conv_a.b"), d_short)
            h = tape.relu(h)
            h = tape.pointwise_conv(h, self.p(f"{layer}.out.w"), self.p(f"{layer}.out.b"))
            h = tape.dropout(h, self.cfg.dropout)
            f = tape.add(f, h)
        return f

    def classify(self, tape: Tape, index: int, features: Tensor2D) -> Tensor2D:
        name = self.stage_key(index)
        logits = tape.pointwise_conv(features, self.p(f"{name}.head.w"), self.p(f"{name}.head.b"))
        return tape.softmax(logits)

    def forward(self, tape: Tape, x: Tensor2D) -> SegOutput:
        if x.channels != self.cfg.input_dim:
            raise ShapeError(f"model expects {self.cfg.input_dim}-dim features, got {x.channels}")
        out = SegOutput()
        current = x
        for index in range(self.cfg.stage_count):
            features = self.stage_features(tape, index, current)
            probs = self.classify(tape, index, features)
            out.stages.append(StageOutput(features, probs))
            current = probs
        return out

    def topology(self) -> dict:
        return {'kind': 'single', 'model': asdict(self.cfg)}

    def load_params(self, values: Dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in values:
                raise ShapeError(f"checkpoint is missing parameter '{name}'")
            if values[name].shape != p.shape:
                raise ShapeError(f"parameter '{name}' has shape {values[name].shape}, "
                                 f"model expects {p.shape}")
            p.value = np.array(values[name], dtype=p.value.dtype, copy=True)


class FusionModel:
    """Two SegModel branches joined at every stage by a 1x1 fusion conv."""

    def __init__(self, heat_cfg: ModelConfig, aux_cfg: ModelConfig,
                 fusion_mode: str = 'recurrent', seed: int = 0):
        if fusion_mode not in FUSION_MODES:
            raise ValidationError(f"fusion_mode must be one of {FUSION_MODES}, got '{fusion_mode}'")
        if (heat_cfg.num_classes != aux_cfg.num_classes
                or heat_cfg.feature_width != aux_cfg.feature_width
                or heat_cfg.stage_count != aux_cfg.stage_count):
            raise ValidationError("fused branches must agree on classes, feature width and stage count")
        rng = np.random.default_rng(seed)
        self.fusion_mode = fusion_mode
        self.heat = SegModel(heat_cfg, prefix='heat.', rng=rng)
        self.aux = SegModel(aux_cfg, prefix='aux.', rng=rng)
        F, C = heat_cfg.feature_width, heat_cfg.num_classes
        self.fusion_params: Dict[str, Tensor] = {}
        for s in range(heat_cfg.stage_count):
            for name, shape in ((f"fuse{s}", (F, 2 * F)), (f"fhead{s}", (C, F))):
                self.fusion_params[f"{name}.w"] = Tensor(kaiming_uniform(shape, rng), name=f"{name}.w")
                self.fusion_params[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=np.float32),
                                                         name=f"{name}.b")

    @property
    def cfg(self) -> ModelConfig:
        return self.heat.cfg

    @property
    def params(self) -> Dict[str, Tensor]:
        merged = dict(self.heat.params)
        merged.update(self.aux.params)
        merged.update(self.fusion_params)
        return merged

    def init_from_branches(self, heat: SegModel, aux: SegModel):
        """Copy trained branch weights, make every fusion conv the averaging map
        0.5 * [I | I] with zero bias, and start each fused head from the mean of
        the two branch heads."""
        self.heat.load_params(_rename(heat.params, heat.prefix, self.heat.prefix))
        self.aux.load_params(_rename(aux.params, aux.prefix, self.aux.prefix))
        F = self.cfg.feature_width
        eye = np.eye(F, dtype=np.float32)
        for s in range(self.cfg.stage_count):
            self.fusion_params[f"fuse{s}.w"].value = 0.5 * np.concatenate([eye, eye], axis=1)
            self.fusion_params[f"fuse{s}.b"].value = np.zeros(F, dtype=np.float32)
            hk, ak = self.heat.stage_key(s), self.aux.stage_key(s)
            for part in ('w', 'b'):
                mean = 0.5 * (self.heat.p(f"{hk}.head.{part}").value + self.aux.p(f"{ak}.head.{part}").value)
                self.fusion_params[f"fhead{s}.{part}"].value = mean.astype(np.float32)

    def forward(self, tape: Tape, heat_x: Tensor2D, aux_x: Tensor2D) -> FusedOutput:
        if heat_x.time != aux_x.time:
            raise ShapeError(f"fused branches need equal lengths, got {heat_x.time} and {aux_x.time}")
        out = FusedOutput([], [], [])
        heat_in, aux_in = heat_x, aux_x
        for s in range(self.cfg.stage_count):
            fh = self.heat.stage_features(tape, s, heat_in)
            fa = self.aux.stage_features(tape, s, aux_in)
            fused = tape.pointwise_conv(tape.concat_channels([fh, fa]),
                                        self.fusion_params[f"fuse{s}.w"], self.fusion_params[f"fuse{s}.b"])
            fused_probs = tape.softmax(tape.pointwise_conv(fused, self.fusion_params[f"fhead{s}.w"],
                                                           self.fusion_params[f"fhead{s}.b"]))
            heat_probs = self.heat.classify(tape, s, fh)
            aux_probs = self.aux.classify(tape, s, fa)
            out.fused.append(fused_probs)
            out.heat.append(heat_probs)
            out.aux.append(aux_probs)
            if self.fusion_mode == 'recurrent':
                heat_in = aux_in = fused_probs
            else:
                heat_in, aux_in = heat_probs, aux_probs
        return out

    def topology(self) -> dict:
        return {'kind': 'fused', 'heat': asdict(self.heat.cfg), 'aux': asdict(self.aux.cfg),
                'fusion_mode': self.fusion_mode}

    def load_params(self, values: Dict[str, np.ndarray]):
        self.heat.load_params(values)
        self.aux.load_params(values)
        for name, p in self.fusion_params.items():
            if name not in values or values[name].shape != p.shape:
                raise ShapeError(f"checkpoint parameter '{name}' is missing or mis-shaped")
            p.value = np.array(values[name], dtype=np.float32, copy=True)


def _rename(params: Dict[str, Tensor], old_prefix: str, new_prefix: str) -> Dict[str, np.ndarray]:
    return {new_prefix + name[len(old_prefix):]: p.value for name, p in params.items()}


# ── Inference helpers ─────────────────────────────────────────────────────────

def _input(track: FeatureTrack, dtype=np.float32) -> Tensor2D:
    return Tensor2D(track.values.astype(dtype), requires_grad=False)


def forward_single(model: SegModel, feats: FeatureTrack) -> List[np.ndarray]:
    """Evaluation-mode forward: one C x M probability array per stage."""
    tape = Tape(training=False)
    return [p.value for p in model.forward(tape, _input(feats)).probs]


def forward_fused(model: FusionModel, heat_feats: FeatureTrack, aux_feats: FeatureTrack) -> FusedOutput:
    if heat_feats.frame_count != aux_feats.frame_count:
        raise ShapeError(f"feature tracks differ in length: {heat_feats.frame_count} vs {aux_feats.frame_count}")
    tape = Tape(training=False)
    return model.forward(tape, _input(heat_feats), _input(aux_feats))


def final_probs(model, feats: FeatureTrack, aux_feats: Optional[FeatureTrack] = None) -> np.ndarray:
    if isinstance(model, FusionModel):
        if aux_feats is None:
            raise ShapeError("fused model needs auxiliary features")
        return forward_fused(model, feats, aux_feats).fused[-1].value
    return forward_single(model, feats)[-1]


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-frame argmax; np.argmax returns the first maximum, so exact ties go to
    the lower class id."""
    return np.argmax(probs, axis=0).astype(np.int64)


def predict(model, feats: FeatureTrack, aux_feats: Optional[FeatureTrack] = None,
            class_names: Optional[Sequence[str]] = None) -> LabelTrack:
    probs = final_probs(model, feats, aux_feats)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(probs.shape[0]))
    return LabelTrack(argmax_labels(probs), names)


def count_parameters(model) -> int:
    return int(sum(p.value.size for p in model.params.values()))


def model_from_topology(topology: dict):
    kind = topology.get('kind')
    if kind == 'single':
        return SegModel(ModelConfig(**topology['model']))
    if kind == 'fused':
        return FusionModel(ModelConfig(**topology['heat']), ModelConfig(**topology['aux']),
                           topology.get('fusion_mode', 'recurrent'))
    raise ShapeError(f"unknown model kind '{kind}' in checkpoint topology")


def load_model(path) -> Tuple[object, dict]:
    """Rebuild a SegModel/FusionModel from a checkpoint alone."""
    topology, values = load_checkpoint(Path(path))
    model = model_from_topology(topology)
    model.load_params(values)
    logger.info(f"📂 Loaded {topology['kind']} model from {path} ({count_parameters(model):,} parameters)")
    return model, topology
