"""Procedural kitchen-like scenes with scripted walkers, standers and sitters.

Objects are axis-aligned boxes sampled as surface point clouds. People move on
an occupancy grid (BFS paths around inflated boxes), so hip centers never enter
an object's interior; sitting lowers the hips onto a chair seat from above.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .motion_data import PersonTrack, SceneObject, SceneRecording, SkeletonSpec

# (size_x, size_y, height) in meters
OBJECT_SIZES = {
    "wall": (0.1, 0.1, 2.5),
    "table": (1.2, 0.8, 0.75),
    "standing_table": (0.8, 0.8, 1.1),
    "drawer": (0.5, 0.5, 0.8),
    "cupboard": (1.0, 0.5, 2.0),
    "chair": (0.45, 0.45, 0.45),
    "sofa": (1.6, 0.8, 0.45),
    "whiteboard": (1.5, 0.1, 2.0),
    "coffee_machine": (0.4, 0.4, 1.2),
    "dishwasher": (0.6, 0.6, 0.85),
    "sink": (0.6, 0.6, 0.9),
    "microwave": (0.5, 0.4, 1.2),
    "fridge": (0.7, 0.7, 1.8),
}

FURNITURE_CYCLE = (
    "table", "chair", "chair", "cupboard", "standing_table", "drawer", "chair",
    "sofa", "whiteboard", "coffee_machine", "dishwasher", "sink", "microwave", "fridge",
)

BODY_RADIUS = 0.3
GRID = 0.1
STRIDE_LENGTH = 1.3


class InfeasibleConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    persons: int = 2
    objects: int = 8
    duration: float = 20.0
    room: tuple = (8.0, 6.0)
    fps: float = 25.0
    entry_exit_prob: float = 0.0
    point_spacing: float = 0.1
    max_points_per_object: int = 3000
    name: str = "synthetic"
    # optional hook(rng, free_xy, chairs) -> list of actions; see _random_script
    script: Optional[Callable] = field(default=None, repr=False)


@dataclass
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    @property
    def center(self):
        return 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)

    def contains(self, p, eps=1e-9) -> bool:
        return (
            self.x0 + eps < p[0] < self.x1 - eps
            and self.y0 + eps < p[1] < self.y1 - eps
            and eps < p[2] < self.height - eps
        )


def box_surface_points(box: Box, spacing: float, cap: int) -> np.ndarray:
    """Grid samples on the five visible faces (no floor face)."""
    dims = np.array([box.x1 - box.x0, box.y1 - box.y0, box.height])
    area = 2 * (dims[0] * dims[2] + dims[1] * dims[2]) + dims[0] * dims[1]
    spacing = max(spacing, float(np.sqrt(area / cap)) * 1.05)

    def axis(lo, hi):
        k = max(2, int(np.ceil((hi - lo) / spacing)) + 1)
        return np.linspace(lo, hi, k)

    xs, ys, zs = axis(box.x0, box.x1), axis(box.y0, box.y1), axis(0.0, box.height)
    faces = []
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    for y in (box.y0, box.y1):
        faces.append(np.stack([gx.ravel(), np.full(gx.size, y), gz.ravel()], 1))
    gy, gz = np.meshgrid(ys, zs, indexing="ij")
    for x in (box.x0, box.x1):
        faces.append(np.stack([np.full(gy.size, x), gy.ravel(), gz.ravel()], 1))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    faces.append(np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, box.height)], 1))
    pts = np.unique(np.round(np.concatenate(faces), 6), axis=0)
    return pts.astype(np.float32)


def _wall_boxes(width: float, depth: float) -> list:
    t, h = 0.1, OBJECT_SIZES["wall"][2]
    return [
        Box(-t, -t, width + t, 0.0, h),
        Box(-t, depth, width + t, depth + t, h),
        Box(-t, 0.0, 0.0, depth, h),
        Box(width, 0.0, width + t, depth, h),
    ]


def _place_objects(cfg: SynthConfig, rng: np.random.Generator):
    width, depth = cfg.room
    types, boxes = [], []
    n_furniture = cfg.objects
    if cfg.objects >= 6:
        for b in _wall_boxes(width, depth):
            types.append("wall")
            boxes.append(b)
        n_furniture -= 4
    gap = 2 * BODY_RADIUS + GRID
    for k in range(n_furniture):
        kind = FURNITURE_CYCLE[k % len(FURNITURE_CYCLE)]
        sx, sy, h = OBJECT_SIZES[kind]
        for _ in range(2000):
            scale = rng.uniform(0.85, 1.15)
            fx, fy = (sx, sy) if rng.random() < 0.5 else (sy, sx)
            fx, fy, fh = fx * scale, fy * scale, h * min(scale, 1.2)
            margin = gap
            if width - fx - 2 * margin <= 0 or depth - fy - 2 * margin <= 0:
                continue
            x0 = rng.uniform(margin, width - fx - margin)
            y0 = rng.uniform(margin, depth - fy - margin)
            cand = Box(x0, y0, x0 + fx, y0 + fy, fh)
            if all(
                cand.x0 >= b.x1 + gap or cand.x1 <= b.x0 - gap
                or cand.y0 >= b.y1 + gap or cand.y1 <= b.y0 - gap
                for b, t in zip(boxes, types) if t != "wall"
            ):
                types.append(kind)
                boxes.append(cand)
                break
        else:
            raise InfeasibleConfigError(
                f"could not place {cfg.objects} objects in a {width}x{depth} m room"
            )
    return types, boxes


class _Grid:
    def __init__(self, width: float, depth: float, boxes: list):
        self.nx = int(round(width / GRID))
        self.ny = int(round(depth / GRID))
        cx = (np.arange(self.nx) + 0.5) * GRID
        cy = (np.arange(self.ny) + 0.5) * GRID
        X, Y = np.meshgrid(cx, cy, indexing="ij")
        free = (X >= BODY_RADIUS) & (X <= width - BODY_RADIUS)
        free &= (Y >= BODY_RADIUS) & (Y <= depth - BODY_RADIUS)
        for b in boxes:
            dx = np.maximum(np.maximum(b.x0 - X, X - b.x1), 0)
            dy = np.maximum(np.maximum(b.y0 - Y, Y - b.y1), 0)
            free &= np.hypot(dx, dy) >= BODY_RADIUS
        self.free = free
        self.component = self._largest_component()
        self.component_set = set(self.component)

    def center(self, cell):
        return np.array([(cell[0] + 0.5) * GRID, (cell[1] + 0.5) * GRID])

    def cell_of(self, xy):
        return int(xy[0] // GRID), int(xy[1] // GRID)

    def _neighbors(self, c):
        i, j = c
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                a, b = i + di, j + dj
                if not (0 <= a < self.nx and 0 <= b < self.ny) or not self.free[a, b]:
                    continue
                if di and dj and not (self.free[i + di, j] and self.free[i, j + dj]):
                    continue
                yield a, b

    def _largest_component(self):
        seen = np.zeros_like(self.free, dtype=bool)
        best = []
        for start in zip(*(idx.tolist() for idx in np.nonzero(self.free))):
            if seen[start]:
                continue
            comp, queue = [], deque([start])
            seen[start] = True
            while queue:
                c = queue.popleft()
                comp.append(c)
                for nb in self._neighbors(c):
                    if not seen[nb]:
                        seen[nb] = True
                        queue.append(nb)
            if len(comp) > len(best):
                best = comp
        return best

    def path(self, start, goal):
        prev = {start: None}
        queue = deque([start])
        while queue:
            c = queue.popleft()
            if c == goal:
                break
            for nb in self._neighbors(c):
                if nb not in prev:
                    prev[nb] = c
                    queue.append(nb)
        if goal not in prev:
            return None
        cells = [goal]
        while prev[cells[-1]] is not None:
            cells.append(prev[cells[-1]])
        return [self.center(c) for c in reversed(cells)]


def _random_script(rng, free_xy, chairs):
    """Default behaviour: random mix of standing, walking and sitting."""
    actions = []
    for _ in range(64):
        u = rng.random()
        if u < 0.35:
            actions.append(("stand", rng.uniform(1.0, 4.0)))
        elif u < 0.75 or not chairs:
            actions.append(("walk", free_xy[rng.integers(len(free_xy))]))
        else:
            actions.append(("sit", int(rng.integers(len(chairs))), rng.uniform(2.0, 5.0)))
    return actions


class _Motion:
    """Per-frame root state accumulated by the behaviour script."""

    def __init__(self, xy, heading):
        self.xy = [np.asarray(xy, float)]
        self.heading = [float(heading)]
        self.sit = [0.0]
        self.seat = [0.5]
        self.walk = [0.0]
        self.phase = [0.0]
        self.label = ["stand"]

    def __len__(self):
        return len(self.xy)

    def push(self, xy, heading, sit, seat, walk, phase, label):
        self.xy.append(np.asarray(xy, float))
        self.heading.append(float(heading))
        self.sit.append(sit)
        self.seat.append(seat)
        self.walk.append(walk)
        self.phase.append(phase)
        self.label.append(label)

    def hold(self, frames, label="stand"):
        for _ in range(frames):
            self.push(self.xy[-1], self.heading[-1], self.sit[-1], self.seat[-1], 0.0, self.phase[-1], label)

    def turn_to(self, target, fps, rate=4.0):
        h = self.heading[-1]
        delta = (target - h + np.pi) % (2 * np.pi) - np.pi
        steps = int(np.ceil(abs(delta) / (rate / fps)))
        for k in range(1, steps + 1):
            self.push(self.xy[-1], h + delta * k / steps, self.sit[-1], self.seat[-1], 0.0, self.phase[-1], "stand")

    def follow(self, points, speed, fps):
        step = speed / fps
        poly = np.asarray(points)
        seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
        total = seg.sum()
        if total < 1e-6:
            return
        arclen = np.concatenate([[0.0], np.cumsum(seg)])
        samples = np.arange(step, total + 1e-9, step)
        if samples.size == 0 or samples[-1] < total:
            samples = np.append(samples, total)
        xs = np.interp(samples, arclen, poly[:, 0])
        ys = np.interp(samples, arclen, poly[:, 1])
        max_turn = 4.0 / fps
        for x, y in zip(xs, ys):
            prev = self.xy[-1]
            d = np.array([x, y]) - prev
            dist = float(np.hypot(*d))
            h = self.heading[-1]
            if dist > 1e-9:
                target = np.arctan2(d[1], d[0])
                delta = (target - h + np.pi) % (2 * np.pi) - np.pi
                h = h + np.clip(delta, -max_turn, max_turn)
            phase = self.phase[-1] + 2 * np.pi * dist / STRIDE_LENGTH
            self.push((x, y), h, 0.0, self.seat[-1], 1.0, phase, "walk")


def _body_offsets(sit, seat, walk, phase, scale):
    """Joint positions in the body frame (lateral, forward, up), shape (F, 17, 3)."""
    F = sit.shape[0]
    a = 0.25 * np.sin(phase) * walk
    lift = 0.08 * np.maximum(np.sin(phase), 0) * walk
    lift_r = 0.08 * np.maximum(-np.sin(phase), 0) * walk
    hip_z = (1 - sit) * 0.95 + sit * (seat + 0.05)
    drop = 0.95 - hip_z
    lean = 0.08 * sit
    J = np.zeros((F, 17, 3))

    def put(idx, lat, fwd, up):
        J[:, idx, 0] = lat
        J[:, idx, 1] = fwd
        J[:, idx, 2] = up

    put(0, 0.0, 0.02 - lean, 1.68 - drop)   # head
    put(16, 0.0, 0.10 - lean, 1.62 - drop)  # nose
    put(1, 0.0, -lean, 1.50 - drop)         # neck
    put(8, 0.0, -0.5 * lean, 1.20 - drop)   # spine
    put(11, 0.0, 0.0, 1.00 - drop)          # pelvis
    put(2, -0.18, -lean, 1.45 - drop)
    put(5, 0.18, -lean, 1.45 - drop)
    put(3, -0.20, -0.5 * a - lean + 0.1 * sit, 1.17 - drop)
    put(6, 0.20, 0.5 * a - lean + 0.1 * sit, 1.17 - drop)
    put(4, -0.20, -a + 0.3 * sit, 0.92 - drop + 0.05 * sit)
    put(7, 0.20, a + 0.3 * sit, 0.92 - drop + 0.05 * sit)
    put(12, -0.10, 0.0, hip_z)
    put(13, 0.10, 0.0, hip_z)
    knee_z = (1 - sit) * 0.50 + sit * (seat + 0.05)
    put(9, -0.10, 0.5 * a + 0.45 * sit, knee_z + lift)
    put(10, 0.10, -0.5 * a + 0.45 * sit, knee_z + lift_r)
    put(14, -0.10, a + 0.5 * sit, 0.08 + lift)
    put(15, 0.10, -a + 0.5 * sit, 0.08 + lift_r)
    J[:, :, 2] *= scale
    J[:, :, :2] *= scale
    # keep the hips exactly at the commanded seat height when sitting
    J[:, 12, 2] = J[:, 13, 2] = hip_z * scale + (1 - scale) * sit * (seat + 0.05)
    return J


def _to_world(offsets, xy, heading):
    fwd = np.stack([np.cos(heading), np.sin(heading)], 1)
    right = np.stack([np.sin(heading), -np.cos(heading)], 1)
    out = np.empty_like(offsets)
    out[..., :2] = (
        xy[:, None, :]
        + offsets[..., 0:1] * right[:, None, :]
        + offsets[..., 1:2] * fwd[:, None, :]
    )
    out[..., 2] = offsets[..., 2]
    return out


def _simulate_person(grid, chairs, cfg, rng, frames):
    comp = grid.component
    start = comp[rng.integers(len(comp))]
    motion = _Motion(grid.center(start), rng.uniform(-np.pi, np.pi))
    free_xy = [grid.center(c) for c in comp]
    script = (cfg.script or _random_script)(rng, free_xy, chairs)
    fps = cfg.fps
    for action in script:
        if len(motion) >= frames:
            break
        kind = action[0]
        if kind == "stand":
            motion.hold(max(1, int(action[1] * fps)))
        elif kind == "walk":
            path = grid.path(grid.cell_of(motion.xy[-1]), grid.cell_of(action[1]))
            if path is None or len(path) < 3:
                motion.hold(int(fps))
                continue
            motion.follow([motion.xy[-1]] + path[1:], rng.uniform(1.0, 1.4), fps)
        elif kind == "sit":
            chair = chairs[action[1]]
            approach = _approach_point(grid, chair)
            path = None if approach is None else grid.path(grid.cell_of(motion.xy[-1]), grid.cell_of(approach))
            if path is None:
                motion.hold(int(fps))
                continue
            motion.follow([motion.xy[-1]] + path[1:], rng.uniform(1.0, 1.4), fps)
            cxy = np.array(chair.center)
            start_xy = motion.xy[-1].copy()
            away = np.arctan2(*(start_xy - cxy)[::-1])
            motion.turn_to(away, fps)
            seat = chair.height
            down = int(fps)
            for k in range(1, down + 1):
                u = k / down
                motion.push(start_xy + u * (cxy - start_xy), away, u, seat, 0.0, motion.phase[-1], "sit_down")
            motion.hold(int(action[2] * fps), "sit")
            for k in range(1, down + 1):
                u = k / down
                motion.push(cxy + u * (start_xy - cxy), away, 1 - u, seat, 0.0, motion.phase[-1], "stand_up")
    while len(motion) < frames:
        motion.hold(frames - len(motion))
    sl = slice(0, frames)
    xy = np.asarray(motion.xy[sl])
    heading = np.asarray(motion.heading[sl])
    sit = np.asarray(motion.sit[sl])
    seat = np.asarray(motion.seat[sl])
    walk = np.convolve(np.pad(np.asarray(motion.walk[sl]), 3, mode="edge"), np.ones(7) / 7, "valid")
    phase = np.asarray(motion.phase[sl])
    scale = rng.uniform(0.92, 1.08)
    joints = _to_world(_body_offsets(sit, seat, walk, phase, scale), xy, heading)
    t = np.arange(frames) / fps
    sway = 0.01 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))
    joints[:, :, 0] += sway[:, None] * (1 - sit[:, None])
    joints[:, [12, 13], 0] -= sway[:, None] * (1 - sit[:, None])
    return joints, motion.label[sl]


def _approach_point(grid, chair: Box):
    cx, cy = chair.center
    half = 0.5 * max(chair.x1 - chair.x0, chair.y1 - chair.y0)
    d = half + BODY_RADIUS + 0.15
    for ox, oy in ((0, -d), (0, d), (-d, 0), (d, 0)):
        p = np.array([cx + ox, cy + oy])
        c = grid.cell_of(p)
        if 0 <= c[0] < grid.nx and 0 <= c[1] < grid.ny and c in grid.component_set:
            return grid.center(c)
    return None


def synth_generate(config: SynthConfig, seed: int) -> SceneRecording:
    """Generate a recording; identical (config, seed) gives identical arrays."""
    width, depth = config.room
    if width <= 2 * BODY_RADIUS + GRID or depth <= 2 * BODY_RADIUS + GRID:
        raise InfeasibleConfigError(f"room {config.room} is too small to walk in")
    if config.persons < 0 or config.objects < 0 or config.duration <= 0 or config.fps <= 0:
        raise InfeasibleConfigError("counts must be >= 0 and duration, fps > 0")
    rng = np.random.default_rng(seed)
    types, boxes = _place_objects(config, rng)
    grid = _Grid(width, depth, boxes)
    if len(grid.component) < 2:
        raise InfeasibleConfigError("no walkable free space left between objects")
    frames = int(round(config.duration * config.fps))
    chairs = [b for b, t in zip(boxes, types) if t in ("chair", "sofa")]
    objects = [
        SceneObject(f"obj{k:02d}", t, box_surface_points(b, config.point_spacing, config.max_points_per_object))
        for k, (t, b) in enumerate(zip(types, boxes))
    ]
    skeleton = SkeletonSpec(fps=config.fps)
    persons = []
    for i in range(config.persons):
        joints, labels = _simulate_person(grid, chairs, config, rng, frames)
        first, last = 0, frames - 1
        if config.entry_exit_prob > 0 and rng.random() < config.entry_exit_prob:
            if rng.random() < 0.5:
                first = int(rng.integers(1, max(2, frames // 3)))
            else:
                last = int(rng.integers(2 * frames // 3, frames - 1))
        persons.append(
            PersonTrack(
                f"p{i:02d}",
                first,
                last,
                joints[first : last + 1].astype(np.float32),
                labels=tuple(labels[first : last + 1]),
            )
        )
    return SceneRecording(skeleton, persons, objects, frames, name=config.name)


def object_boxes(rec: SceneRecording) -> list:
    """Axis-aligned bounding box of each object's points (exact for generated boxes)."""
    out = []
    for o in rec.objects:
        lo, hi = o.points.min(axis=0), o.points.max(axis=0)
        out.append(Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]), float(hi[2])))
    return out
