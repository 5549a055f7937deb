"""Multi-person motion recordings: data model, on-disk container, windowing.

A recording directory holds ``manifest.json`` plus two float32 little-endian
payloads, ``tracks.bin`` (person joints) and ``objects.bin`` (object point
clouds). Arrays are row-major with the shapes declared in the manifest.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_NAME = "scene-recording"
FORMAT_VERSION = 1

OBJECT_TYPES = (
    "wall",
    "table",
    "standing_table",
    "drawer",
    "cupboard",
    "chair",
    "sofa",
    "whiteboard",
    "coffee_machine",
    "dishwasher",
    "sink",
    "microwave",
    "fridge",
)
NUM_OBJECT_TYPES = len(OBJECT_TYPES)

DEFAULT_JOINT_NAMES = (
    "head",
    "neck",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "spine",
    "left_knee",
    "right_knee",
    "pelvis",
    "left_hip",
    "right_hip",
    "left_ankle",
    "right_ankle",
    "nose",
)

STANDING_LABEL = "stand"

_LE_F32 = np.dtype("<f4")


class RecordingError(ValueError):
    """Base class for recording container problems."""


class ManifestError(RecordingError):
    """manifest.json is missing, unparsable or structurally invalid."""


class ShapeMismatchError(RecordingError):
    """Declared array shapes disagree with the binary payload."""


class UnknownObjectTypeError(RecordingError):
    """An object type string is not one of OBJECT_TYPES."""


@dataclass(frozen=True)
class SkeletonSpec:
    joint_count: int = 17
    joint_names: tuple = DEFAULT_JOINT_NAMES
    left_hip_index: int = 12
    right_hip_index: int = 13
    fps: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if self.joint_count <= 0:
            raise ValueError("joint_count must be positive")
        if len(self.joint_names) != self.joint_count:
            raise ValueError(
                f"expected {self.joint_count} joint names, got {len(self.joint_names)}"
            )
        if self.left_hip_index == self.right_hip_index:
            raise ValueError("left and right hip must be distinct joints")
        for idx in (self.left_hip_index, self.right_hip_index):
            if not 0 <= idx < self.joint_count:
                raise ValueError(f"hip index {idx} outside [0, {self.joint_count})")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def hips(self) -> tuple[int, int]:
        return self.left_hip_index, self.right_hip_index

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "joint_names": list(self.joint_names),
            "left_hip_index": self.left_hip_index,
            "right_hip_index": self.right_hip_index,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(
            joint_count=int(d["joint_count"]),
            joint_names=tuple(d["joint_names"]),
            left_hip_index=int(d["left_hip_index"]),
            right_hip_index=int(d["right_hip_index"]),
            fps=float(d["fps"]),
        )


@dataclass(frozen=True, eq=False)
class PersonTrack:
    """One person's joints over the frames ``first_frame..last_frame`` (inclusive).

    ``joints`` has shape (frames, J, 3) in global coordinates, meters.
    ``labels`` optionally holds one activity string per frame.
    """

    person_id: str
    first_frame: int
    last_frame: int
    joints: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        joints = np.asarray(self.joints)
        if joints.ndim != 3 or joints.shape[2] != 3:
            raise ValueError(f"joints must be (frames, J, 3), got {joints.shape}")
        if self.last_frame < self.first_frame:
            raise ValueError("last_frame < first_frame")
        if joints.shape[0] != self.num_frames:
            raise ValueError(
                f"track {self.person_id}: {joints.shape[0]} frames of joints for "
                f"span {self.first_frame}..{self.last_frame}"
            )
        if not np.all(np.isfinite(joints)):
            raise ValueError(f"track {self.person_id}: non-finite coordinates")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != self.num_frames:
                raise ValueError(f"track {self.person_id}: label count mismatch")
        object.__setattr__(self, "joints", joints)

    @property
    def num_frames(self) -> int:
        return self.last_frame - self.first_frame + 1

    def __eq__(self, other):
        if not isinstance(other, PersonTrack):
            return NotImplemented
        return (
            self.person_id == other.person_id
            and self.first_frame == other.first_frame
            and self.last_frame == other.last_frame
            and self.labels == other.labels
            and _bit_equal(self.joints, other.joints)
        )


@dataclass(frozen=True, eq=False)
class SceneObject:
    """A rigid object given as a point cloud (M, 3).

    ``pose_frames``/``pose_params`` optionally describe rigid moves: from frame
    ``pose_frames[k]`` on, points are rotated about z by ``pose_params[k, 0]``
    and shifted by ``pose_params[k, 1:4]``.
    """

    object_id: str
    object_type: str
    points: np.ndarray
    pose_frames: Optional[tuple] = None
    pose_params: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.object_type not in OBJECT_TYPES:
            raise UnknownObjectTypeError(f"unknown object type {self.object_type!r}")
        points = np.asarray(self.points)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise ValueError(f"object {self.object_id}: points must be (M>=1, 3)")
        object.__setattr__(self, "points", points)
        if (self.pose_frames is None) != (self.pose_params is None):
            raise ValueError("pose_frames and pose_params go together")
        if self.pose_frames is not None:
            frames = tuple(int(f) for f in self.pose_frames)
            params = np.asarray(self.pose_params, dtype=np.float64).reshape(len(frames), 4)
            if list(frames) != sorted(frames):
                raise ValueError("pose_frames must be sorted")
            object.__setattr__(self, "pose_frames", frames)
            object.__setattr__(self, "pose_params", params)

    @property
    def type_index(self) -> int:
        return OBJECT_TYPES.index(self.object_type)

    def points_at(self, frame: int) -> np.ndarray:
        """Point cloud at ``frame`` with any rigid pose override applied."""
        if self.pose_frames is None:
            return self.points
        k = int(np.searchsorted(self.pose_frames, frame, side="right")) - 1
        if k < 0:
            return self.points
        yaw, dx, dy, dz = self.pose_params[k]
        c, s = np.cos(yaw), np.sin(yaw)
        p = self.points.astype(np.float64)
        out = np.empty_like(p)
        out[:, 0] = c * p[:, 0] - s * p[:, 1] + dx
        out[:, 1] = s * p[:, 0] + c * p[:, 1] + dy
        out[:, 2] = p[:, 2] + dz
        return out

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        if (self.pose_frames is None) != (other.pose_frames is None):
            return False
        same_pose = self.pose_frames is None or (
            self.pose_frames == other.pose_frames
            and np.array_equal(self.pose_params, other.pose_params)
        )
        return (
            self.object_id == other.object_id
            and self.object_type == other.object_type
            and same_pose
            and _bit_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class SceneRecording:
    skeleton: SkeletonSpec
    persons: tuple
    objects: tuple
    total_frames: int
    name: str = "recording"

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.total_frames <= 0:
            raise ValueError("total_frames must be positive")
        J = self.skeleton.joint_count
        ids = [p.person_id for p in self.persons]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate person ids")
        for p in self.persons:
            if p.first_frame < 0 or p.last_frame >= self.total_frames:
                raise ValueError(
                    f"track {p.person_id} spans {p.first_frame}..{p.last_frame}, "
                    f"outside [0, {self.total_frames})"
                )
            if p.joints.shape[1] != J:
                raise ValueError(f"track {p.person_id} has {p.joints.shape[1]} joints, skeleton {J}")

    def scene_state(self, frame: int) -> list:
        """Objects frozen at ``frame`` (pose overrides resolved, no further motion)."""
        return [
            SceneObject(o.object_id, o.object_type, o.points_at(frame)) for o in self.objects
        ]

    def __eq__(self, other):
        if not isinstance(other, SceneRecording):
            return NotImplemented
        return (
            self.skeleton == other.skeleton
            and self.total_frames == other.total_frames
            and self.name == other.name
            and self.persons == other.persons
            and self.objects == other.objects
        )


@dataclass(frozen=True, eq=False)
class MultiPersonWindow:
    """P concurrent sequences ``X`` of shape (P, J, 3, N) plus scene snapshot.

    ``presence_mask`` (P, N) is False exactly on zero-velocity padded frames.
    ``scene_state`` is the object list at the last input frame.
    """

    X: np.ndarray
    presence_mask: np.ndarray
    scene_state: list
    n: int
    N: int
    person_ids: tuple = ()
    start: int = 0
    source: str = ""
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)
    labels: Optional[tuple] = None

    def __post_init__(self):
        if not self.n < self.N:
            raise ValueError("window needs n < N")
        if self.X.shape[3] != self.N or self.presence_mask.shape != (self.X.shape[0], self.N):
            raise ValueError("inconsistent window shapes")
        if self.X.shape[0] and not np.all(self.presence_mask[:, : self.n].any(axis=1)):
            raise ValueError("every person needs a real frame in the input segment")

    @property
    def num_persons(self) -> int:
        return self.X.shape[0]


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# container I/O


def write_recording(rec: SceneRecording, path) -> None:
    """Write ``rec`` to directory ``path``; identical input gives identical bytes."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    persons, objects = [], []
    track_chunks, object_chunks = [], []
    offset = 0
    for p in rec.persons:
        buf = np.ascontiguousarray(p.joints, dtype=_LE_F32).tobytes()
        entry = {
            "person_id": p.person_id,
            "first_frame": p.first_frame,
            "last_frame": p.last_frame,
            "shape": list(p.joints.shape),
            "offset": offset,
        }
        if p.labels is not None:
            entry["labels"] = list(p.labels)
        persons.append(entry)
        track_chunks.append(buf)
        offset += len(buf)
    offset = 0
    for o in rec.objects:
        buf = np.ascontiguousarray(o.points, dtype=_LE_F32).tobytes()
        entry = {
            "object_id": o.object_id,
            "object_type": o.object_type,
            "shape": list(o.points.shape),
            "offset": offset,
        }
        if o.pose_frames is not None:
            entry["pose_frames"] = list(o.pose_frames)
            entry["pose_params"] = [[float(v) for v in row] for row in o.pose_params]
        objects.append(entry)
        object_chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": rec.name,
        "skeleton": rec.skeleton.to_dict(),
        "total_frames": rec.total_frames,
        "persons": persons,
        "objects": objects,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (path / "tracks.bin").write_bytes(b"".join(track_chunks))
    (path / "objects.bin").write_bytes(b"".join(object_chunks))


def _read_blocks(payload: bytes, entries: list, what: str, expect_tail: Optional[int]) -> list:
    arrays = []
    expected = 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        if len(shape) == 0 or any(s < 0 for s in shape):
            raise ManifestError(f"{what}: invalid shape {shape}")
        if expect_tail is not None and shape[1:] != (expect_tail, 3):
            raise ShapeMismatchError(f"{what}: shape {shape} does not match skeleton J={expect_tail}")
        count = int(np.prod(shape))
        start = int(e["offset"])
        if start != expected:
            raise ShapeMismatchError(f"{what}: offset {start}, expected {expected}")
        stop = start + 4 * count
        if stop > len(payload):
            raise ShapeMismatchError(f"{what}: payload too short for shape {shape}")
        arrays.append(np.frombuffer(payload, dtype=_LE_F32, count=count, offset=start).reshape(shape).astype(np.float32))
        expected = stop
    if expected != len(payload):
        raise ShapeMismatchError(f"{what}: payload has {len(payload)} bytes, manifest declares {expected}")
    return arrays


def load_recording(path) -> SceneRecording:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest in {path}: {exc}") from exc
    try:
        if manifest.get("format") != FORMAT_NAME:
            raise ManifestError(f"not a {FORMAT_NAME} manifest")
        skeleton = SkeletonSpec.from_dict(manifest["skeleton"])
        person_entries = manifest["persons"]
        object_entries = manifest["objects"]
        total_frames = int(manifest["total_frames"])
        name = manifest.get("name", path.name)
        for o in object_entries:
            if o["object_type"] not in OBJECT_TYPES:
                raise UnknownObjectTypeError(f"unknown object type {o['object_type']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, RecordingError):
            raise
        raise ManifestError(f"malformed manifest in {path}: {exc}") from exc

    tracks = _read_blocks((path / "tracks.bin").read_bytes(), person_entries, "tracks", skeleton.joint_count)
    clouds = _read_blocks((path / "objects.bin").read_bytes(), object_entries, "objects", None)
    try:
        persons = [
            PersonTrack(
                person_id=str(e["person_id"]),
                first_frame=int(e["first_frame"]),
                last_frame=int(e["last_frame"]),
                joints=arr,
                labels=e.get("labels"),
            )
            for e, arr in zip(person_entries, tracks)
        ]
        objects = [
            SceneObject(
                object_id=str(e["object_id"]),
                object_type=e["object_type"],
                points=arr,
                pose_frames=e.get("pose_frames"),
                pose_params=None if e.get("pose_params") is None else np.asarray(e["pose_params"]),
            )
            for e, arr in zip(object_entries, clouds)
        ]
        return SceneRecording(skeleton, persons, objects, total_frames, name=name)
    except RecordingError:
        raise
    except ValueError as exc:
        raise ShapeMismatchError(f"invalid recording {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# windowing


def zero_velocity_pad(track: PersonTrack, window_start: int, window_end: int):
    """Cut ``track`` to frames [window_start, window_end) and pad missing frames.

    Frames before the track replicate its first pose, frames after it replicate
    its last pose. Returns ``(seq, mask)`` with ``seq`` shaped (J, 3, L) and
    ``mask`` False on padded frames.
    """
    if window_end <= window_start:
        raise ValueError("empty window")
    lo = max(window_start, track.first_frame)
    hi = min(window_end - 1, track.last_frame)
    if lo > hi:
        raise ValueError(
            f"track {track.person_id} ({track.first_frame}..{track.last_frame}) "
            f"does not overlap window [{window_start}, {window_end})"
        )
    frames = np.clip(np.arange(window_start, window_end), lo, hi) - track.first_frame
    seq = track.joints[frames].transpose(1, 2, 0)
    absolute = np.arange(window_start, window_end)
    mask = (absolute >= track.first_frame) & (absolute <= track.last_frame)
    return np.ascontiguousarray(seq), mask


def make_windows(rec: SceneRecording, n: int, N: int, stride: int) -> list:
    """Slice ``rec`` into windows of N frames starting every ``stride`` frames.

    A window holds exactly the persons with a real frame among its first n.
    """
    if n >= N:
        raise ValueError(f"input length n={n} must be smaller than N={N}")
    if N > rec.total_frames:
        raise ValueError(f"window length {N} exceeds recording length {rec.total_frames}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows = []
    for start in range(0, rec.total_frames - N + 1, stride):
        w = window_at(rec, start, n, N)
        if w is not None:
            windows.append(w)
    return windows


def window_at(rec: SceneRecording, start: int, n: int, N: int) -> Optional[MultiPersonWindow]:
    """The window of N frames beginning at ``start``, or None if nobody is present."""
    if not 0 <= start <= rec.total_frames - N:
        raise ValueError(f"window [{start}, {start + N}) outside recording of {rec.total_frames} frames")
    seqs, masks, ids, labels = [], [], [], []
    for p in rec.persons:
        if p.last_frame < start or p.first_frame > start + n - 1:
            continue
        seq, mask = zero_velocity_pad(p, start, start + N)
        seqs.append(seq)
        masks.append(mask)
        ids.append(p.person_id)
        if p.labels is not None:
            idx = np.clip(np.arange(start, start + N), p.first_frame, p.last_frame) - p.first_frame
            labels.append(tuple(p.labels[i] for i in idx))
        else:
            labels.append(None)
    if not seqs:
        return None
    return MultiPersonWindow(
        X=np.stack(seqs),
        presence_mask=np.stack(masks),
        scene_state=rec.scene_state(start + n - 1),
        n=n,
        N=N,
        person_ids=tuple(ids),
        start=start,
        source=rec.name,
        skeleton=rec.skeleton,
        labels=None if any(lab is None for lab in labels) else tuple(labels),
    )


# ---------------------------------------------------------------------------
# undersampling of standing-only windows


@dataclass
class UndersampleResult:
    windows: list
    dropped: int
    warning: Optional[str] = None


def is_standing_only(
    window: MultiPersonWindow,
    use_labels: bool = True,
    max_displacement: float = 0.2,
    max_hip_range: float = 0.1,
) -> bool:
    """True if every person in the window only stands.

    Uses per-frame labels when present; otherwise the hip center may not move
    more than ``max_displacement`` meters from its start in the plane and its
    height may vary by less than ``max_hip_range``.
    """
    if use_labels and window.labels is not None:
        return all(lab == STANDING_LABEL for person in window.labels for lab in person)
    lh, rh = window.skeleton.hips
    hip = 0.5 * (window.X[:, lh] + window.X[:, rh])  # (P, 3, N)
    planar = hip[:, :2] - hip[:, :2, :1]
    disp = np.sqrt((planar**2).sum(axis=1)).max()
    height = hip[:, 2].max(axis=1) - hip[:, 2].min(axis=1)
    return bool(disp < max_displacement and height.max() < max_hip_range)


def _window_uniform(seed: int, window: MultiPersonWindow) -> float:
    key = zlib.crc32(window.source.encode("utf-8"))
    return float(np.random.default_rng([seed, key, window.start]).random())


def undersample_standing(
    windows: Sequence[MultiPersonWindow],
    fraction: float,
    seed: int,
    detector: bool = True,
) -> UndersampleResult:
    """Drop each standing-only window with probability ``fraction``.

    The keep/drop draw depends only on (seed, window source, window start), so
    the same window gets the same decision in any collection.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    windows = list(windows)
    if not detector and any(w.labels is None for w in windows):
        msg = "no activity labels and no standing detector; windows left untouched"
        logger.warning(msg)
        return UndersampleResult(windows, 0, msg)
    kept = []
    for w in windows:
        if fraction > 0 and is_standing_only(w) and _window_uniform(seed, w) < fraction:
            continue
        kept.append(w)
    return UndersampleResult(kept, len(windows) - len(kept))
