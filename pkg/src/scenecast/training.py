"""Dataset preparation and the masked-L1 training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import ForecastModel, load_checkpoint, save_checkpoint
from .denoiser import Conditioning, Denoiser
from .diffusion import DiffusionSchedule, cosine_schedule, q_sample, training_loss
from .motion_data import MultiPersonWindow
from .normalize import MinMaxScaler, build_datapoint, fit_minmax
from .scene_bps import BasisPointSet

logger = logging.getLogger(__name__)

PROBE_STREAM = 2**32 - 1


@dataclass
class TrainConfig:
    T: int = 1000
    total_steps: int = 20000
    batch_size: int = 32
    lr_start: float = 2e-7
    lr_end: float = 5e-5
    weight_decay: float = 0.01
    undersample_fraction: float = 0.5
    seed: int = 0
    grad_clip: Optional[float] = None
    ema_decay: Optional[float] = None
    probe_every: int = 100
    probe_size: int = 16
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.T < 1 or self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("T, total_steps and batch_size must be positive")
        if not (0 < self.lr_start and 0 < self.lr_end):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, step: int) -> float:
        """Linear schedule from lr_start (step 1) to lr_end (last step)."""
        if self.total_steps == 1:
            return self.lr_end
        frac = (step - 1) / (self.total_steps - 1)
        return self.lr_start + frac * (self.lr_end - self.lr_start)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Sample:
    """One scaled training datapoint (float32)."""

    x: np.ndarray        # (J, 3, N)
    x_input: np.ndarray  # (J, 3, N), zero-velocity padded past frame n
    others: np.ndarray   # (K, J, 3, N)
    scene: np.ndarray    # (G, d_obj)
    mask: np.ndarray     # (N,) bool
    source: str = ""


def pad_input(x, n: int):
    """Keep frames 1..n and repeat frame n up to the full length."""
    x = np.asarray(x)
    out = x.copy()
    out[..., n:] = x[..., n - 1 : n]
    return out


def window_datapoints(windows: Sequence[MultiPersonWindow], basis: BasisPointSet) -> list:
    """Unscaled datapoints for every person in every window that has real output frames."""
    out = []
    for w in windows:
        for i in range(w.num_persons):
            if not w.presence_mask[i, w.n :].any():
                continue
            out.append((build_datapoint(w, i, basis), w.n, f"{w.source}@{w.start}#{w.person_ids[i] if w.person_ids else i}"))
    return out


def fit_scaler(datapoints) -> MinMaxScaler:
    return fit_minmax(dp.x for dp, _, _ in datapoints)


def to_samples(datapoints, scaler: MinMaxScaler) -> list:
    samples = []
    for dp, n, tag in datapoints:
        x = scaler.scale(dp.x)
        samples.append(
            Sample(
                x=x.astype(np.float32),
                x_input=pad_input(x, n).astype(np.float32),
                others=scaler.scale(dp.O).astype(np.float32) if len(dp.O) else np.zeros((0,) + x.shape, np.float32),
                scene=np.asarray(dp.s, np.float32),
                mask=np.asarray(dp.mask, bool),
                source=tag,
            )
        )
    return samples


def collate(samples: Sequence[Sample], d_obj: int):
    """Stack samples, padding the other-person and object axes with masks."""
    B = len(samples)
    J, _, N = samples[0].x.shape
    K = max(s.others.shape[0] for s in samples)
    G = max(s.scene.shape[0] for s in samples)
    others = np.zeros((B, K, J, 3, N), np.float32)
    others_mask = np.zeros((B, K), bool)
    scene = np.zeros((B, G, d_obj), np.float32)
    scene_mask = np.zeros((B, G), bool)
    for b, s in enumerate(samples):
        k, g = s.others.shape[0], s.scene.shape[0]
        others[b, :k] = s.others
        others_mask[b, :k] = True
        scene[b, :g] = s.scene
        scene_mask[b, :g] = True
    x = torch.from_numpy(np.stack([s.x for s in samples]))
    cond = Conditioning(
        x_input=torch.from_numpy(np.stack([s.x_input for s in samples])),
        others=torch.from_numpy(others),
        others_mask=torch.from_numpy(others_mask),
        scene=torch.from_numpy(scene),
        scene_mask=torch.from_numpy(scene_mask),
    )
    mask = torch.from_numpy(np.stack([s.mask for s in samples]))
    return x, cond, mask


def _draw(rng: np.random.Generator, count: int, B: int, T: int, shape):
    idx = rng.integers(0, count, size=B)
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal((B,) + tuple(shape)).astype(np.float32)
    return idx, t, eps


def batch_loss(model: Denoiser, schedule: DiffusionSchedule, samples, idx, t, eps, n: int):
    x, cond, mask = collate([samples[i] for i in idx], model.config.d_obj)
    t = torch.from_numpy(np.asarray(t))
    x_t = q_sample(x, t, torch.from_numpy(eps), schedule)
    pred = model(x_t, t, cond)
    return training_loss(pred, x, mask, n)


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)   # (step, loss, lr)
    probes: list = field(default_factory=list)    # (step, probe loss)


def probe_loss(model, schedule, samples, n: int, seed: int, size: int = 16) -> float:
    """Masked L1 on a fixed set of (datapoint, t, noise) draws; comparable across steps."""
    rng = np.random.default_rng([seed, PROBE_STREAM])
    size = max(1, size)
    idx = np.arange(size) % len(samples)
    t = np.linspace(1, schedule.T, size).round().astype(np.int64)
    eps = rng.standard_normal((size,) + samples[0].x.shape).astype(np.float32)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        value = float(batch_loss(model, schedule, samples, idx, t, eps, n))
    model.train(was_training)
    return value


def train(
    model: Denoiser,
    samples: Sequence[Sample],
    n: int,
    config: TrainConfig,
    schedule: Optional[DiffusionSchedule] = None,
    state: Optional[TrainState] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    stop_at: Optional[int] = None,
    on_checkpoint=None,
):
    """Run the loop from ``state.step + 1`` up to ``stop_at`` (default: total_steps).

    Every step draws its batch, diffusion steps and noise from a generator keyed
    on (seed, step), so a resumed run continues exactly like an uninterrupted one.
    Returns ``(model, state, optimizer)``.
    """
    if not samples:
        raise ValueError("training set is empty")
    schedule = schedule or cosine_schedule(config.T)
    state = state or TrainState()
    if optimizer is None:
        optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr_start, weight_decay=config.weight_decay)
    ema = copy.deepcopy(model) if config.ema_decay else None
    stop_at = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    shape = samples[0].x.shape
    model.train()
    while state.step < stop_at:
        step = state.step + 1
        rng = np.random.default_rng([config.seed, step])
        torch.manual_seed(config.seed * 1_000_003 + step)
        lr = config.lr_at(step)
        for g in optimizer.param_groups:
            g["lr"] = lr
        idx, t, eps = _draw(rng, len(samples), config.batch_size, schedule.T, shape)
        loss = batch_loss(model, schedule, samples, idx, t, eps, n)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {step} (lr={lr:.3g}, t={t.tolist()}, "
                f"windows={[samples[i].source for i in idx]})"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), model.parameters()):
                    pe.mul_(config.ema_decay).add_(p, alpha=1 - config.ema_decay)
        state.step = step
        state.history.append((step, value, lr))
        if config.probe_every and step % config.probe_every == 0:
            state.probes.append((step, probe_loss(model, schedule, samples, n, config.seed, config.probe_size)))
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d loss %.5f lr %.3g", step, value, lr)
        if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(model, state, optimizer)
    if ema is not None:
        model.load_state_dict(ema.state_dict())
    return model, state, optimizer


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in rows]


def resume(path, samples, config: TrainConfig):
    """Rebuild model, optimizer and history from a checkpoint written mid-run."""
    bundle, opt_state, manifest = load_checkpoint(path, with_optimizer=True)
    model = bundle.model
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr_start, weight_decay=config.weight_decay)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)
    extra = manifest.get("extra") or {}
    state = TrainState(
        step=bundle.step,
        history=[tuple(h) for h in manifest.get("loss_history", [])],
        probes=[tuple(p) for p in extra.get("probes", [])],
    )
    return bundle, state, optimizer


def snapshot(model, state: TrainState, optimizer, base: ForecastModel, path, run_config=None) -> str:
    base.model = model
    base.step = state.step
    base.extra = dict(base.extra, probes=[list(p) for p in state.probes])
    return save_checkpoint(path, base, optimizer, [list(h) for h in state.history], run_config)
