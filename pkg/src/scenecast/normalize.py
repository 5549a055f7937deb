"""Person-centric planar normalization and per-channel min-max scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .motion_data import MultiPersonWindow, SkeletonSpec

SCALE_RANGE = 3.0
DEGENERATE_EPS = 1e-6


@dataclass(frozen=True)
class AffineTransform2D:
    """Planar rigid map ``p -> R(angle) @ (p + translation)`` acting on (x, y).

    z passes through untouched.
    """

    rotation_angle: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation_angle", float(self.rotation_angle))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    def _apply(self, arr, axis, inverse=False):
        arr = np.asarray(arr, dtype=np.float64)
        x = np.take(arr, 0, axis=axis)
        y = np.take(arr, 1, axis=axis)
        c, s = np.cos(self.rotation_angle), np.sin(self.rotation_angle)
        dx, dy = self.translation
        if inverse:
            nx = c * x + s * y - dx
            ny = -s * x + c * y - dy
        else:
            x, y = x + dx, y + dy
            nx = c * x - s * y
            ny = s * x + c * y
        out = arr.copy()
        idx = [slice(None)] * arr.ndim
        idx[axis] = 0
        out[tuple(idx)] = nx
        idx[axis] = 1
        out[tuple(idx)] = ny
        return out

    def apply_points(self, pts):
        """Transform points with coordinates on the last axis."""
        return self._apply(pts, -1)

    def invert_points(self, pts):
        return self._apply(pts, -1, inverse=True)

    def to_dict(self) -> dict:
        return {"rotation_angle": self.rotation_angle, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d) -> "AffineTransform2D":
        return cls(d["rotation_angle"], tuple(d["translation"]))


def apply_norm(transform: AffineTransform2D, seq):
    """Apply to sequences laid out (..., J, 3, N)."""
    return transform._apply(seq, -2)


def invert_norm(transform: AffineTransform2D, seq):
    return transform._apply(seq, -2, inverse=True)


def fit_norm(x_primary, n: int, skeleton: SkeletonSpec) -> AffineTransform2D:
    """Transform that puts the hip midpoint of frame ``n`` (1-based) at the origin
    with the left hip on -x and the right hip on +x, so the person faces +y.
    """
    x_primary = np.asarray(x_primary, dtype=np.float64)
    if not 1 <= n <= x_primary.shape[-1]:
        raise ValueError(f"frame n={n} outside sequence of {x_primary.shape[-1]} frames")
    lh, rh = skeleton.hips
    left = x_primary[lh, :2, n - 1]
    right = x_primary[rh, :2, n - 1]
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
        raise ValueError(f"non-finite hip joints at frame {n}")
    mid = 0.5 * (left + right)
    d = right - left
    angle = 0.0 if not np.any(d) else -float(np.arctan2(d[1], d[0]))
    return AffineTransform2D(angle, (-mid[0], -mid[1]))


class Datapoint(NamedTuple):
    x: np.ndarray          # (J, 3, N) primary, normalized
    O: np.ndarray          # (P-1, J, 3, N) others under the primary's transform
    s: np.ndarray          # (G, d_obj) scene encoding under the primary's transform
    mask: np.ndarray       # (N,) presence of the primary
    transform: AffineTransform2D


def build_datapoint(window: MultiPersonWindow, i: int, basis) -> Datapoint:
    from .scene_bps import encode_scene

    P = window.num_persons
    if not 0 <= i < P:
        raise IndexError(f"person index {i} outside window with {P} persons")
    tf = fit_norm(window.X[i], window.n, window.skeleton)
    x = apply_norm(tf, window.X[i])
    others = [j for j in range(P) if j != i]
    J = window.X.shape[1]
    O = apply_norm(tf, window.X[others]) if others else np.zeros((0, J, 3, window.N))
    s = encode_scene(window.scene_state, basis, tf).matrix()
    return Datapoint(x, O, s, window.presence_mask[i].copy(), tf)


@dataclass
class MinMaxScaler:
    """Maps every (joint, axis) channel's training range onto [-3, 3]."""

    minimum: np.ndarray  # (J, 3)
    maximum: np.ndarray  # (J, 3)

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if not np.all(self.maximum > self.minimum):
            raise ValueError("scaler needs max > min on every channel")

    def _bounds(self, x):
        shape = self.minimum.shape + (1,)
        return self.minimum.reshape(shape), self.maximum.reshape(shape)

    def scale(self, x):
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self._bounds(x)
        return (x - lo) / (hi - lo) * (2 * SCALE_RANGE) - SCALE_RANGE

    def unscale(self, x):
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self._bounds(x)
        return (x + SCALE_RANGE) / (2 * SCALE_RANGE) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MinMaxScaler":
        return cls(np.array(d["minimum"]), np.array(d["maximum"]))


def fit_minmax(sequences, eps: float = DEGENERATE_EPS) -> MinMaxScaler:
    """Fit per-channel extrema over all frames of ``sequences`` (each (J, 3, N))."""
    lo = hi = None
    count = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.size == 0:
            continue
        cur_lo, cur_hi = seq.min(axis=-1), seq.max(axis=-1)
        if seq.ndim == 4:
            cur_lo, cur_hi = cur_lo.min(axis=0), cur_hi.max(axis=0)
        lo = cur_lo if lo is None else np.minimum(lo, cur_lo)
        hi = cur_hi if hi is None else np.maximum(hi, cur_hi)
        count += 1
    if count == 0:
        raise ValueError("cannot fit a scaler on an empty training set")
    flat = hi <= lo
    lo = np.where(flat, lo - eps, lo)
    hi = np.where(flat, hi + eps, hi)
    return MinMaxScaler(lo, hi)
