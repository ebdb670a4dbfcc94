#!/usr/bin/env python3
"""
Skeleton -> Gaussian heatmap rasterization.

Joint heatmaps put one Gaussian per joint, scaled by the joint confidence:
    h[j, i, k] = exp(-((i - x_k)^2 + (j - y_k)^2) / (2 sigma^2)) * c_k
Limb heatmaps decay with the distance D from pixel (i, j) to the bone segment,
scaled by the weaker endpoint:
    h[j, i, l] = exp(-D / (2 sigma^2)) * min(c_a, c_b)
with D the plain point-to-segment distance ('linear', as usually printed) or
its square ('squared', consistent with the joint term).

Pixels are sampled at integer centers, i along x (columns) and j along y
(rows), so rasters are indexed [frame, row, col, channel].

The model input pipeline then crops every frame to the box holding all
confident joints of the whole video, sums the channels, divides by the
per-video peak, bilinear-resizes to out_size x out_size and replicates the map
into replicate_channels identical channels. pooled_encoder averages that map
into a grid x grid feature vector per frame.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import cv2
import numpy as np

from pose_data import FeatureTrack, SkeletonSequence, ValidationError

logger = logging.getLogger(__name__)

SIGMA = 0.6
OUT_SIZE = 56
REPLICATE_CHANNELS = 3
CROP_PADDING = 2
DISTANCE_MODES = ('linear', 'squared')
HEATMAP_KINDS = ('joint', 'limb', 'joint+limb')
ENCODER_GRID = 7
PEAK_EPS = 1e-12

HMAP_MAGIC = 'HMAP'
HMAP_VERSION = 'v1'


@dataclass(frozen=True)
class RasterConfig:
    sigma: float = SIGMA
    out_size: int = OUT_SIZE
    replicate_channels: int = REPLICATE_CHANNELS
    crop_padding: int = CROP_PADDING
    distance_mode: str = 'linear'
    heatmap: str = 'joint+limb'
    grid: int = ENCODER_GRID

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"raster.sigma must be > 0, got {self.sigma}")
        if self.out_size < 1:
            raise ValidationError(f"raster.out_size must be >= 1, got {self.out_size}")
        if self.replicate_channels < 1:
            raise ValidationError(f"raster.replicate_channels must be >= 1, got {self.replicate_channels}")
        if self.crop_padding < 0:
            raise ValidationError(f"raster.crop_padding must be >= 0, got {self.crop_padding}")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValidationError(f"raster.distance_mode must be one of {DISTANCE_MODES}")
        if self.heatmap not in HEATMAP_KINDS:
            raise ValidationError(f"raster.heatmap must be one of {HEATMAP_KINDS}")
        if self.grid < 1:
            raise ValidationError(f"raster.grid must be >= 1, got {self.grid}")


@dataclass(frozen=True)
class HeatmapClip:
    """`frames` is (M, h, w, ch); every value in [0, 1]."""
    frames: np.ndarray

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]


Box = Tuple[int, int, int, int]  # x0, y0, x1, y1 - inclusive pixel bounds


# ── Per-frame evaluation ──────────────────────────────────────────────────────

def segment_distance(px: np.ndarray, py: np.ndarray, ax: float, ay: float,
                     bx: float, by: float) -> np.ndarray:
    """Euclidean distance from points (px, py) to the segment a-b: the foot of the
    perpendicular when it falls on the segment, else the nearer endpoint."""
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _joint_channels(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray, sigma: float) -> np.ndarray:
    px = xs[None, :, None]
    py = ys[:, None, None]
    sq = (px - frame[:, 0]) ** 2 + (py - frame[:, 1]) ** 2
    return np.exp(-sq / (2.0 * sigma * sigma)) * frame[:, 2]


def _limb_channels(frame: np.ndarray, topology, xs: np.ndarray, ys: np.ndarray,
                   sigma: float, distance_mode: str) -> np.ndarray:
    px = xs[None, :]
    py = ys[:, None]
    out = np.zeros((len(ys), len(xs), topology.limb_count), dtype=np.float64)
    for l, limb in enumerate(topology.limbs):
        ax, ay, ca = frame[limb.a]
        bx, by, cb = frame[limb.b]
        weight = min(ca, cb)
        if weight == 0.0:
            continue
        dist = segment_distance(px, py, ax, ay, bx, by)
        if distance_mode == 'squared':
            dist = dist * dist
        out[:, :, l] = np.exp(-dist / (2.0 * sigma * sigma)) * weight
    return out


def _frame_channels(frame: np.ndarray, topology, xs: np.ndarray, ys: np.ndarray,
                    cfg: RasterConfig, heatmap: str) -> np.ndarray:
    parts = []
    if heatmap in ('joint', 'joint+limb'):
        parts.append(_joint_channels(frame, xs, ys, cfg.sigma))
    if heatmap in ('limb', 'joint+limb'):
        parts.append(_limb_channels(frame, topology, xs, ys, cfg.sigma, cfg.distance_mode))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)


def _map_frames(fn, count: int, workers: int):
    if workers <= 1 or count <= 1:
        return [fn(m) for m in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _rasterize(seq: SkeletonSequence, cfg: RasterConfig, heatmap: str, workers: int = 1) -> HeatmapClip:
    if heatmap in ('limb', 'joint+limb') and seq.topology.limb_count < 1:
        raise ValidationError("limb heatmaps need a topology with at least one limb")
    xs = np.arange(seq.frame_width, dtype=np.float64)
    ys = np.arange(seq.frame_height, dtype=np.float64)
    frames = _map_frames(lambda m: _frame_channels(seq.joints[m], seq.topology, xs, ys, cfg, heatmap),
                         seq.frame_count, workers)
    return HeatmapClip(np.stack(frames))


def joint_heatmap(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig(), workers: int = 1) -> HeatmapClip:
    return _rasterize(seq, cfg, 'joint', workers)


def limb_heatmap(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig(), workers: int = 1) -> HeatmapClip:
    return _rasterize(seq, cfg, 'limb', workers)


def combined_heatmap(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig(), workers: int = 1) -> HeatmapClip:
    """Joint channels [0, K) followed by limb channels [K, K+L)."""
    return _rasterize(seq, cfg, 'joint+limb', workers)


def heatmap_of_kind(seq: SkeletonSequence, cfg: RasterConfig, workers: int = 1) -> HeatmapClip:
    return _rasterize(seq, cfg, cfg.heatmap, workers)


# ── Crop / collapse / resize ──────────────────────────────────────────────────

def video_crop_box(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig()) -> Box:
    """Smallest box holding every confident joint of the whole video, padded by
    crop_padding and clamped to the frame."""
    confident = seq.joints[:, :, 2] > 0
    if not confident.any():
        raise ValidationError("empty skeleton video")
    xs = seq.joints[:, :, 0][confident]
    ys = seq.joints[:, :, 1][confident]
    pad = cfg.crop_padding
    x0, x1 = _clamp_span(math.floor(xs.min()) - pad, math.ceil(xs.max()) + pad, seq.frame_width)
    y0, y1 = _clamp_span(math.floor(ys.min()) - pad, math.ceil(ys.max()) + pad, seq.frame_height)
    return x0, y0, x1, y1


def _clamp_span(lo: int, hi: int, size: int) -> Tuple[int, int]:
    lo = min(max(lo, 0), size - 1)
    hi = min(max(hi, 0), size - 1)
    if hi <= lo:
        if size < 2:
            raise ValidationError(f"frame dimension {size} is too small for a crop box")
        # widen a collapsed span by one pixel inside the frame
        if hi < size - 1:
            hi = lo + 1
        else:
            lo = hi - 1
    return lo, hi


def _normalize_resize_replicate(summed: np.ndarray, cfg: RasterConfig) -> HeatmapClip:
    peak = max(PEAK_EPS, float(summed.max()))
    normalized = (summed / peak).astype(np.float32)
    size = (cfg.out_size, cfg.out_size)
    resized = np.stack([cv2.resize(frame, size, interpolation=cv2.INTER_LINEAR)
                        for frame in normalized])
    np.clip(resized, 0.0, 1.0, out=resized)
    return HeatmapClip(np.repeat(resized[:, :, :, None], cfg.replicate_channels, axis=3))


def collapse_and_resize(clip: HeatmapClip, box: Box, cfg: RasterConfig = RasterConfig()) -> HeatmapClip:
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 < clip.width and 0 <= y0 < y1 < clip.height):
        raise ValidationError(f"crop box {box} is outside the {clip.width}x{clip.height} raster")
    summed = clip.frames[:, y0:y1 + 1, x0:x1 + 1, :].sum(axis=3)
    return _normalize_resize_replicate(summed, cfg)


def model_heatmaps(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig(),
                   workers: int = 1) -> HeatmapClip:
    """Crop -> sum -> renormalize -> resize -> replicate, evaluating channels only
    inside the video crop box. Same numbers as collapse_and_resize on the full
    raster without holding an M x H x W x (K+L) volume."""
    x0, y0, x1, y1 = video_crop_box(seq, cfg)
    if cfg.heatmap in ('limb', 'joint+limb') and seq.topology.limb_count < 1:
        raise ValidationError("limb heatmaps need a topology with at least one limb")
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    summed = _map_frames(
        lambda m: _frame_channels(seq.joints[m], seq.topology, xs, ys, cfg, cfg.heatmap).sum(axis=2),
        seq.frame_count, workers)
    return _normalize_resize_replicate(np.stack(summed), cfg)


# ── Encoder ───────────────────────────────────────────────────────────────────

def pooled_encoder(clip: HeatmapClip, grid: int = ENCODER_GRID) -> FeatureTrack:
    """Average-pool channel 0 of every frame into grid x grid cells, row-major."""
    if clip.height != clip.width:
        raise ValidationError(f"pooled encoder needs square frames, got {clip.width}x{clip.height}")
    side = clip.width
    if grid < 1 or side % grid:
        raise ValidationError(f"grid {grid} does not divide side length {side}")
    cell = side // grid
    first = clip.frames[:, :, :, 0].astype(np.float64)
    pooled = first.reshape(clip.frame_count, grid, cell, grid, cell).mean(axis=(2, 4))
    return FeatureTrack(pooled.reshape(clip.frame_count, grid * grid).T.astype(np.float32))


def heatmap_features(seq: SkeletonSequence, cfg: RasterConfig = RasterConfig(),
                     workers: int = 1) -> FeatureTrack:
    return pooled_encoder(model_heatmaps(seq, cfg, workers), cfg.grid)


# ── Files ─────────────────────────────────────────────────────────────────────

def write_hmap(clip: HeatmapClip, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, h, w, ch = clip.frames.shape
    header = f"{HMAP_MAGIC} {HMAP_VERSION} {m} {h} {w} {ch} f32le\n".encode('ascii')
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(clip.frames, dtype='<f4').tobytes())
    return path


def read_hmap(path) -> HeatmapClip:
    path = Path(path)
    with open(path, 'rb') as f:
        header = f.readline().decode('ascii', errors='replace').split()
        payload = f.read()
    if len(header) != 7 or header[0] != HMAP_MAGIC or header[1] != HMAP_VERSION or header[6] != 'f32le':
        raise ValidationError(f"{path}: not an {HMAP_MAGIC} {HMAP_VERSION} file")
    try:
        m, h, w, ch = (int(v) for v in header[2:6])
    except ValueError as e:
        raise ValidationError(f"{path}: bad {HMAP_MAGIC} header dimensions") from e
    count = m * h * w * ch
    if len(payload) != count * 4:
        raise ValidationError(f"{path}: expected {count} floats, found {len(payload) // 4}")
    frames = np.frombuffer(payload, dtype='<f4', count=count).reshape(m, h, w, ch)
    return HeatmapClip(frames.astype(np.float32))


def save_feature_track(track: FeatureTrack, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, track.values.astype(np.float32))
    return path


def load_feature_track(path, grid: int = ENCODER_GRID) -> FeatureTrack:
    """Read a (D, M) .npy feature file, or pool an .hmap raster dump on the fly."""
    path = Path(path)
    if path.suffix == '.hmap':
        return pooled_encoder(read_hmap(path), grid)
    try:
        values = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise ValidationError(f"cannot read feature file {path}: {e}") from e
    return FeatureTrack(np.asarray(values, dtype=np.float32))


def describe(clip: HeatmapClip, name: Optional[str] = None) -> str:
    label = f"{name}: " if name else ''
    return (f"{label}{clip.frame_count} frames {clip.width}x{clip.height}x{clip.channels} "
            f"peak {float(clip.frames.max()):.3f}")
