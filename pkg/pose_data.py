#!/usr/bin/env python3
"""
Skeleton sequences, framewise labels, class maps and dataset manifests.

Pure data model plus the file readers/writers every other script uses, so the
rasterizer, the trainer and the evaluator all agree on one in-memory shape:
  - SkeletonSequence: M frames x K joints of (x, y, c), plus the limb topology
    and the frame size. A missing joint is c = 0, never an absent entry.
  - LabelTrack: one class id per frame, resolved through an explicit class map
    (never inferred from the label files, so train/test ids can't drift).
  - DatasetManifest: the list of sequences with their split tag.

File formats:
    skeleton  JSON {"width", "height", "joint_names", "limbs": [[a, b, group]],
              "frames": [[[x, y, c] x K] x M]}
    labels    text, one class name per line
    class map text, "name<TAB>id" per line
    manifest  JSON list of {"id", "skeleton", "labels", "features"?, "split"}
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LIMB_GROUPS = ('left-arm', 'right-arm', 'left-leg', 'right-leg', 'torso-head')
EXTREMITY_GROUPS = LIMB_GROUPS[:4]
SPLITS = ('train', 'test')
CLASS_MAP_NAME = 'mapping.txt'


class ValidationError(ValueError):
    """Malformed input artifact or configuration. The CLI exits 1 on these."""


@dataclass(frozen=True)
class Joint:
    x: float
    y: float
    c: float


@dataclass(frozen=True)
class Limb:
    a: int
    b: int
    group: str


@dataclass(frozen=True)
class LimbTopology:
    limbs: Tuple[Limb, ...]
    joint_count: int
    joint_names: Tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for index, limb in enumerate(self.limbs):
            if not (0 <= limb.a < self.joint_count and 0 <= limb.b < self.joint_count):
                raise ValidationError(f"limb {index} ({limb.a}, {limb.b}) references a joint "
                                      f"outside [0, {self.joint_count})")
            if limb.a == limb.b:
                raise ValidationError(f"limb {index} is a self-loop on joint {limb.a}")
            if limb.group not in LIMB_GROUPS:
                raise ValidationError(f"limb {index} has unknown group '{limb.group}'")
            key = frozenset((limb.a, limb.b))
            if key in seen:
                raise ValidationError(f"limb {index} ({limb.a}, {limb.b}) is a duplicate")
            seen.add(key)

    @property
    def limb_count(self) -> int:
        return len(self.limbs)

    def exclusive_joints(self, group: str) -> List[int]:
        """Joints touched only by limbs of `group` - a joint shared with any other
        group (e.g. a shoulder shared with the torso) is not exclusive."""
        in_group = set()
        elsewhere = set()
        for limb in self.limbs:
            target = in_group if limb.group == group else elsewhere
            target.update((limb.a, limb.b))
        return sorted(in_group - elsewhere)


@dataclass(frozen=True)
class SkeletonSequence:
    """M frames of K joints. `joints` is an (M, K, 3) float64 array of (x, y, c)."""
    joints: np.ndarray
    topology: LimbTopology
    frame_width: int
    frame_height: int

    def __post_init__(self):
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise ValidationError(f"joint array must be (M, K, 3), got {self.joints.shape}")
        if self.joints.shape[0] < 1:
            raise ValidationError("skeleton sequence has no frames")
        if self.joints.shape[1] != self.topology.joint_count:
            raise ValidationError(f"frames carry {self.joints.shape[1]} joints but the topology "
                                  f"declares {self.topology.joint_count}")
        if self.frame_width < 1 or self.frame_height < 1:
            raise ValidationError(f"frame size {self.frame_width}x{self.frame_height} is empty")
        if not np.all(np.isfinite(self.joints)):
            frame, joint, _ = np.argwhere(~np.isfinite(self.joints))[0]
            raise ValidationError(f"non-finite coordinate at (frame {frame}, joint {joint})")
        conf = self.joints[:, :, 2]
        bad = np.argwhere((conf < 0) | (conf > 1))
        if len(bad):
            frame, joint = bad[0]
            raise ValidationError(f"confidence {conf[frame, joint]} outside [0,1] at "
                                  f"(frame {frame}, joint {joint})")
        self.joints.setflags(write=False)

    @property
    def frame_count(self) -> int:
        return self.joints.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joints.shape[1]

    def frame(self, index: int) -> List[Joint]:
        return [Joint(float(x), float(y), float(c)) for x, y, c in self.joints[index]]

    def with_confidences(self, conf: np.ndarray) -> 'SkeletonSequence':
        joints = self.joints.copy()
        joints[:, :, 2] = conf
        return SkeletonSequence(joints, self.topology, self.frame_width, self.frame_height)


@dataclass(frozen=True)
class LabelTrack:
    labels: np.ndarray  # (M,) int64
    class_names: Tuple[str, ...]

    def __post_init__(self):
        if self.labels.ndim != 1 or len(self.labels) == 0:
            raise ValidationError("empty label track")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ValidationError(f"label id outside [0, {len(self.class_names)})")
        self.labels.setflags(write=False)

    @property
    def frame_count(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class FeatureTrack:
    """Per-frame feature vectors, stored channels-first: `values` is (D, M)."""
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValidationError(f"feature track must be (D, M) with M >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature track contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def frame_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    end: int  # inclusive

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class ManifestEntry:
    sequence_id: str
    skeleton: Path
    labels: Path
    split: str
    features: Optional[Path] = None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def class_map_path(self) -> Path:
        return self.root / CLASS_MAP_NAME


# ── Skeleton files ────────────────────────────────────────────────────────────

def _read_json(path: Path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot parse {path}: {e}") from e


def topology_from_json(limbs: Sequence, joint_names: Sequence[str]) -> LimbTopology:
    parsed = []
    for index, limb in enumerate(limbs):
        if not isinstance(limb, (list, tuple)) or len(limb) != 3:
            raise ValidationError(f"limb {index} must be [a, b, group]")
        try:
            parsed.append(Limb(int(limb[0]), int(limb[1]), str(limb[2])))
        except (TypeError, ValueError) as e:
            raise ValidationError(f"limb {index} has non-integer joint ids: {limb}") from e
    return LimbTopology(tuple(parsed), len(joint_names), tuple(joint_names))


def load_skeleton_sequence(path) -> SkeletonSequence:
    path = Path(path)
    payload = _read_json(path)
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: skeleton file must be a JSON object")
    for key in ('width', 'height', 'joint_names', 'limbs', 'frames'):
        if key not in payload:
            raise ValidationError(f"{path}: missing key '{key}'")

    joint_names = payload['joint_names']
    frames = payload['frames']
    if not isinstance(frames, list) or not isinstance(joint_names, list):
        raise ValidationError(f"{path}: 'frames' and 'joint_names' must be lists")
    if not frames:
        raise ValidationError(f"{path}: skeleton sequence has no frames")
    for index, frame in enumerate(frames):
        if not isinstance(frame, list):
            raise ValidationError(f"{path}: frame {index} is not a list of joints")
    joint_count = len(frames[0])
    for index, frame in enumerate(frames):
        if len(frame) != joint_count:
            raise ValidationError(f"{path}: frame {index} has {len(frame)} joints, "
                                  f"frame 0 has {joint_count}")
        for joint_index, triplet in enumerate(frame):
            if not isinstance(triplet, list) or len(triplet) != 3:
                raise ValidationError(f"{path}: joint ({index},{joint_index}) is not [x, y, c]")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in triplet):
                raise ValidationError(f"{path}: non-numeric value in joint ({index},{joint_index}): {triplet}")
    if joint_count != len(joint_names):
        raise ValidationError(f"{path}: frames carry {joint_count} joints but "
                              f"{len(joint_names)} joint names are declared")

    joints = np.asarray(frames, dtype=np.float64)
    conf = joints[:, :, 2]
    bad = np.argwhere((conf < 0) | (conf > 1) | ~np.isfinite(conf))
    if len(bad):
        frame, joint = bad[0]
        raise ValidationError(f"{path}: confidence {conf[frame, joint]} outside [0,1] at "
                              f"(frame {frame}, joint {joint})")

    try:
        width, height = int(payload['width']), int(payload['height'])
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{path}: width/height must be integers, got "
                              f"{payload['width']!r} x {payload['height']!r}") from e
    topology = topology_from_json(payload['limbs'], joint_names)
    return SkeletonSequence(joints, topology, width, height)


def skeleton_to_json(seq: SkeletonSequence) -> dict:
    # repr-exact floats: json writes the shortest round-tripping representation
    return {
        'width': seq.frame_width,
        'height': seq.frame_height,
        'joint_names': list(seq.topology.joint_names) or [f'joint_{k}' for k in range(seq.joint_count)],
        'limbs': [[limb.a, limb.b, limb.group] for limb in seq.topology.limbs],
        'frames': seq.joints.tolist(),
    }


def write_skeleton_sequence(seq: SkeletonSequence, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(skeleton_to_json(seq), f)
    return path


# ── Labels and class maps ─────────────────────────────────────────────────────

def load_class_map(path) -> Tuple[str, ...]:
    """Read "name<TAB>id" lines into a tuple of names indexed by id. Ids must be
    exactly 0..C-1."""
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise ValidationError(f"cannot read class map {path}: {e}") from e
    by_id: Dict[int, str] = {}
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split('\t')
        if len(parts) != 2:
            raise ValidationError(f"{path}: line {number} is not 'name<TAB>id'")
        name, raw_id = parts[0], parts[1].strip()
        try:
            class_id = int(raw_id)
        except ValueError as e:
            raise ValidationError(f"{path}: line {number} has non-integer id '{raw_id}'") from e
        if class_id in by_id or name in by_id.values():
            raise ValidationError(f"{path}: line {number} duplicates '{name}' / id {class_id}")
        by_id[class_id] = name
    if not by_id:
        raise ValidationError(f"{path}: empty class map")
    if sorted(by_id) != list(range(len(by_id))):
        raise ValidationError(f"{path}: class ids must be exactly 0..{len(by_id) - 1}")
    return tuple(by_id[i] for i in range(len(by_id)))


def write_class_map(class_names: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{name}\t{i}\n" for i, name in enumerate(class_names)), encoding='utf-8')
    return path


def load_label_track(path, class_map) -> LabelTrack:
    """`class_map` is a class-map file path or an already loaded tuple of names."""
    path = Path(path)
    class_names = class_map if isinstance(class_map, tuple) else load_class_map(class_map)
    ids = {name: i for i, name in enumerate(class_names)}
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ValidationError(f"cannot read label file {path}: {e}") from e
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ValidationError(f"{path}: empty label track")
    labels = []
    for number, line in enumerate(lines, start=1):
        name = line.strip()
        if name not in ids:
            raise ValidationError(f"{path}: unknown action '{name}' at line {number}")
        labels.append(ids[name])
    return LabelTrack(np.asarray(labels, dtype=np.int64), class_names)


def write_label_track(track: LabelTrack, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{track.class_names[i]}\n" for i in track.labels), encoding='utf-8')
    return path


def segments_of(track) -> List[Segment]:
    """Maximal runs of equal labels, ordered by start. Accepts a LabelTrack or
    any 1-D integer sequence."""
    labels = np.asarray(track.labels if isinstance(track, LabelTrack) else track)
    if len(labels) == 0:
        return []
    boundaries = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries - 1, [len(labels) - 1]))
    return [Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def track_from_segments(segments: Sequence[Segment], class_names: Sequence[str]) -> LabelTrack:
    labels = np.concatenate([np.full(seg.length, seg.label, dtype=np.int64) for seg in segments])
    return LabelTrack(labels, tuple(class_names))


# ── Manifests ─────────────────────────────────────────────────────────────────

def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    payload = _read_json(path)
    if not isinstance(payload, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")
    root = path.parent
    entries = []
    seen = set()
    for index, raw in enumerate(payload):
        try:
            sequence_id = str(raw['id'])
            split = raw['split']
            skeleton = root / raw['skeleton']
            labels = root / raw['labels']
        except (KeyError, TypeError) as e:
            raise ValidationError(f"{path}: entry {index} is missing {e}") from e
        if sequence_id in seen:
            raise ValidationError(f"{path}: duplicate sequence id '{sequence_id}'")
        if split not in SPLITS:
            raise ValidationError(f"{path}: entry '{sequence_id}' has split '{split}', "
                                  f"expected one of {SPLITS}")
        seen.add(sequence_id)
        features = root / raw['features'] if raw.get('features') else None
        entry = ManifestEntry(sequence_id, skeleton, labels, split, features)
        if check_files:
            for p in (entry.skeleton, entry.labels, entry.features):
                if p is not None and not p.exists():
                    raise ValidationError(f"{path}: '{sequence_id}' references missing file {p}")
        entries.append(entry)
    logger.debug(f"📂 Loaded manifest {path} with {len(entries)} entries")
    return DatasetManifest(entries, root)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def rel(p: Optional[Path]):
        return None if p is None else Path(p).relative_to(manifest.root).as_posix()

    payload = []
    for e in manifest.entries:
        item = {'id': e.sequence_id, 'skeleton': rel(e.skeleton), 'labels': rel(e.labels),
                'split': e.split}
        if e.features is not None:
            item['features'] = rel(e.features)
        payload.append(item)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
    return path
