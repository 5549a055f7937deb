"""Fixed-length object descriptors from basis point sets plus a type one-hot."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .motion_data import NUM_OBJECT_TYPES, OBJECT_TYPES, SceneObject
from .normalize import AffineTransform2D

DEFAULT_BASIS_SIZE = 2048
DEFAULT_RADIUS = 5.0
D_OBJ = DEFAULT_BASIS_SIZE + NUM_OBJECT_TYPES  # 2061


@dataclass(frozen=True, eq=False)
class BasisPointSet:
    points: np.ndarray
    seed: int
    sampling_radius: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def encoding_dim(self) -> int:
        return self.size + NUM_OBJECT_TYPES


def generate_basis(seed: int = 0, B: int = DEFAULT_BASIS_SIZE, radius: float = DEFAULT_RADIUS) -> BasisPointSet:
    """B points uniform in the ball of ``radius`` around the origin."""
    if B < 1 or not radius > 0:
        raise ValueError("need B >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal((B, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(B) ** (1.0 / 3.0)
    return BasisPointSet(direction * r[:, None], seed, radius)


@dataclass(frozen=True)
class ObjectEncoding:
    distances: np.ndarray
    type_onehot: np.ndarray

    def vector(self) -> np.ndarray:
        # distances first, then the 13 type slots
        return np.concatenate([self.distances, self.type_onehot])


@dataclass(frozen=True)
class SceneEncoding:
    objects: list = field(default_factory=list)
    dim: int = D_OBJ

    def __len__(self):
        return len(self.objects)

    def matrix(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, self.dim))
        return np.stack([o.vector() for o in self.objects])


def type_onehot(object_type: str) -> np.ndarray:
    v = np.zeros(NUM_OBJECT_TYPES)
    v[OBJECT_TYPES.index(object_type)] = 1.0
    return v


def bps_encode(obj: SceneObject, basis: BasisPointSet, transform: Optional[AffineTransform2D] = None) -> ObjectEncoding:
    """Distance from every basis point to the nearest point of the object's cloud."""
    pts = np.asarray(obj.points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError(f"object {obj.object_id} has an empty point cloud")
    if transform is not None:
        pts = transform.apply_points(pts)
    dist, _ = cKDTree(pts).query(basis.points, k=1)
    return ObjectEncoding(np.asarray(dist, dtype=np.float64), type_onehot(obj.object_type))


def encode_scene(scene_state, basis: BasisPointSet, transform: Optional[AffineTransform2D] = None) -> SceneEncoding:
    return SceneEncoding([bps_encode(o, basis, transform) for o in scene_state], basis.encoding_dim)
