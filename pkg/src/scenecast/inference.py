"""Joint multi-person sampling.

One diffusion chain runs per person, each in that person's own normalized
frame. After every denoising step the clean-sequence estimates of all chains
are mapped back to world coordinates and re-expressed in every other person's
frame, so each chain sees the current guess of everybody else's future.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import ForecastModel
from .denoiser import Conditioning, ablate
from .diffusion import reverse_step
from .motion_data import PersonTrack, SceneRecording, write_recording
from .normalize import AffineTransform2D, MinMaxScaler, apply_norm, fit_norm, invert_norm
from .scene_bps import encode_scene
from .training import pad_input

DEFAULT_MAX_PERSONS = 32


class ForecastError(ValueError):
    pass


@dataclass
class ForecastRequest:
    """Inputs ``X`` (P, J, 3, n) in world coordinates plus the scene snapshot.

    ``person_seeds`` optionally names each person's noise stream; by default
    person i uses stream i. Giving a person the same stream in two requests
    makes its chain draw identical noise in both.
    """

    X: np.ndarray
    scene_state: list
    K: int = 1
    seed: int = 0
    zero_scene: bool = False
    zero_others: bool = False
    person_seeds: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 4 or self.X.shape[0] < 1 or self.X.shape[2] != 3:
            raise ForecastError(f"input must be (P>=1, J, 3, n), got {self.X.shape}")
        if self.K < 1:
            raise ForecastError("K must be >= 1")
        if self.person_seeds is not None and len(self.person_seeds) != self.X.shape[0]:
            raise ForecastError("one person seed per person is required")


@dataclass
class ForecastResult:
    samples: np.ndarray           # (K, P, J, 3, N), world coordinates
    transforms: list              # per person AffineTransform2D
    seed: int = 0
    flags: dict = field(default_factory=dict)


def exchange_context(x0_hats, transforms, scaler: MinMaxScaler, inputs_padded, n: int):
    """Per-person other-person context from every chain's current estimate.

    ``x0_hats``: P scaled estimates, each in its own person's frame.
    ``inputs_padded``: (P, J, 3, N) world-frame inputs (frames past n ignored).
    Returns (world estimates (P, J, 3, N), list of scaled O arrays (P-1, J, 3, N)).
    """
    P = len(x0_hats)
    world = np.stack([invert_norm(transforms[j], scaler.unscale(x0_hats[j])) for j in range(P)])
    world[..., :n] = inputs_padded[..., :n]
    return world, others_from_world(world, transforms, scaler)


def others_from_world(world, transforms, scaler: MinMaxScaler):
    P = world.shape[0]
    out = []
    for i in range(P):
        idx = [j for j in range(P) if j != i]
        if idx:
            out.append(scaler.scale(apply_norm(transforms[i], world[idx])))
        else:
            out.append(np.zeros((0,) + world.shape[1:]))
    return out


def _tensor(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None]


def forecast(request: ForecastRequest, bundle: ForecastModel, max_persons: int = DEFAULT_MAX_PERSONS) -> ForecastResult:
    """Draw K joint samples. Deterministic per (seed, person streams)."""
    if bundle.scaler is None or bundle.basis is None:
        raise ForecastError("checkpoint lacks its scaler or basis")
    X = request.X
    P, J, _, n_in = X.shape
    n, N = bundle.n, bundle.N
    if n_in != n:
        raise ForecastError(f"model expects {n} input frames, got {n_in}")
    if J != bundle.config.joints:
        raise ForecastError(f"model expects {bundle.config.joints} joints, got {J}")
    if P > max_persons:
        raise ForecastError(f"{P} persons exceed the cap of {max_persons}")
    model = ablate(bundle.model, request.zero_scene, request.zero_others)
    model.eval()
    scaler, sched = bundle.scaler, bundle.schedule
    skeleton = bundle.skeleton

    padded = np.concatenate([X, np.repeat(X[..., -1:], N - n, axis=-1)], axis=-1)
    transforms = [fit_norm(X[i], n, skeleton) for i in range(P)]
    x_inputs = [_tensor(pad_input(scaler.scale(apply_norm(transforms[i], padded[i])), n)) for i in range(P)]
    scenes = []
    for i in range(P):
        s = encode_scene(request.scene_state, bundle.basis, transforms[i]).matrix()
        scenes.append(torch.from_numpy(s.astype(np.float32))[None])
    streams = list(request.person_seeds) if request.person_seeds is not None else list(range(P))

    samples = np.empty((request.K, P, J, 3, N))
    for k in range(request.K):
        rngs = [np.random.default_rng([request.seed, k, int(s)]) for s in streams]
        x_t = [torch.from_numpy(r.standard_normal((1, J, 3, N)).astype(np.float32)) for r in rngs]
        # zero-velocity continuation of the inputs bootstraps the first step
        others = others_from_world(padded, transforms, scaler)
        for t in range(sched.T, 0, -1):
            tt = torch.tensor([t])
            hats = []
            for i in range(P):
                o = _tensor(others[i])
                cond = Conditioning(
                    x_input=x_inputs[i],
                    others=o,
                    others_mask=torch.ones(1, o.shape[1], dtype=torch.bool),
                    scene=scenes[i],
                    scene_mask=torch.ones(1, scenes[i].shape[1], dtype=torch.bool),
                )
                with torch.no_grad():
                    hats.append(model(x_t[i], tt, cond))
            for i in range(P):
                noise = None
                if t > 1 or bundle.final_noise:
                    noise = torch.from_numpy(rngs[i].standard_normal((1, J, 3, N)).astype(np.float32))
                x_t[i] = reverse_step(x_t[i], hats[i], t, sched, noise) if t > 1 else hats[i]
            if t > 1:
                _, others = exchange_context([h[0].double().numpy() for h in hats], transforms, scaler, padded, n)
        for i in range(P):
            world = invert_norm(transforms[i], scaler.unscale(x_t[i][0].double().numpy()))
            world[..., :n] = X[i]
            samples[k, i] = world
    flags = {"zero_scene": bool(request.zero_scene), "zero_others": bool(request.zero_others)}
    return ForecastResult(samples, transforms, request.seed, flags)


def write_forecast(path, result: ForecastResult, k: int, skeleton, person_ids, scene_state,
                   meta: dict) -> None:
    """One sample as a recording directory plus a ``forecast.json`` sidecar."""
    P = result.samples.shape[1]
    N = result.samples.shape[-1]
    persons = [
        PersonTrack(str(person_ids[i]), 0, N - 1, result.samples[k, i].transpose(2, 0, 1).astype(np.float32))
        for i in range(P)
    ]
    rec = SceneRecording(skeleton, persons, tuple(scene_state), N, name=meta.get("name", "forecast"))
    write_recording(rec, path)
    side = dict(meta, sample_index=k, seed=result.seed, K=int(result.samples.shape[0]), **result.flags)
    side["transforms"] = [tf.to_dict() for tf in result.transforms]
    (Path(path) / "forecast.json").write_text(json.dumps(side, indent=1, sort_keys=True))
