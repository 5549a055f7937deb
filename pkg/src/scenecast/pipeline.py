"""Pipeline stages behind the command line: data, training, sampling,
evaluation and plots. Every stage reads and writes plain directories."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import ForecastModel, load_checkpoint
from .config import RunConfig
from .denoiser import Denoiser, count_params
from .diffusion import cosine_schedule
from .inference import ForecastRequest, forecast, write_forecast
from .motion_data import (
    load_recording,
    make_windows,
    undersample_standing,
    window_at,
    write_recording,
)
from .normalize import apply_norm, fit_norm
from . import metrics as M
from .scene_bps import generate_basis
from .synth import SynthConfig, synth_generate
from .training import (
    TrainConfig,
    fit_scaler,
    resume,
    snapshot,
    to_samples,
    train,
    window_datapoints,
    write_loss_csv,
)

logger = logging.getLogger(__name__)

UMWR_SECONDS = (2, 4, 6, 8, 10)
REALISM_SECONDS = tuple(range(2, 11))


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# gen-data


def gen_data(cfg: RunConfig, out: Path) -> dict:
    d = cfg.data
    written = {"train": [], "test": []}
    for split, count, offset in (("train", d.train_recordings, 0), ("test", d.test_recordings, 100_000)):
        for i in range(count):
            name = f"{split}_{i:03d}"
            sc = SynthConfig(
                persons=d.persons,
                objects=d.objects,
                duration=d.duration,
                room=tuple(d.room),
                fps=d.fps,
                entry_exit_prob=d.entry_exit_prob,
                name=name,
            )
            rec = synth_generate(sc, cfg.seed * 1_000_003 + offset + i)
            path = out / "data" / split / name
            write_recording(rec, path)
            written[split].append(str(path))
    return written


def load_recordings(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise PipelineError(f"no recordings directory at {directory}")
    recs = [load_recording(p) for p in sorted(directory.iterdir()) if (p / "manifest.json").exists()]
    if not recs:
        raise PipelineError(f"no recordings found in {directory}")
    return recs


# ---------------------------------------------------------------------------
# train


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        T=cfg.diffusion.steps,
        total_steps=t.steps,
        batch_size=t.batch_size,
        lr_start=t.lr_start,
        lr_end=t.lr_end,
        weight_decay=t.weight_decay,
        undersample_fraction=cfg.windows.undersample_fraction,
        seed=cfg.seed,
        grad_clip=t.grad_clip,
        ema_decay=t.ema_decay,
        probe_every=t.probe_every,
        log_every=t.log_every,
        checkpoint_every=t.checkpoint_every,
    )


def training_samples(cfg: RunConfig, recs, basis):
    w = cfg.windows
    windows = [win for rec in recs for win in make_windows(rec, w.n, w.N, w.stride)]
    kept = undersample_standing(windows, w.undersample_fraction, cfg.seed)
    if not kept.windows:
        raise PipelineError("no training windows left after undersampling")
    dps = window_datapoints(kept.windows, basis)
    if not dps:
        raise PipelineError("no training datapoints with real output frames")
    scaler = fit_scaler(dps)
    return to_samples(dps, scaler), scaler, kept


def run_train(cfg: RunConfig, data_dir: Path, ckpt_dir: Path, out: Path, resume_run: bool = False,
              stop_at: Optional[int] = None) -> dict:
    recs = load_recordings(data_dir)
    skeleton = recs[0].skeleton
    basis = generate_basis(cfg.seed)
    samples, scaler, kept = training_samples(cfg, recs, basis)
    tc = train_config(cfg)
    dcfg = cfg.denoiser_config(skeleton.joint_count)
    torch.manual_seed(cfg.seed)
    if resume_run and (ckpt_dir / "manifest.json").exists():
        bundle, state, optimizer = resume(ckpt_dir, samples, tc)
        if bundle.config.to_dict() != dcfg.to_dict():
            raise PipelineError("checkpoint model config differs from the run config")
        model = bundle.model
    else:
        model = Denoiser(dcfg)
        bundle = ForecastModel(model, cosine_schedule(tc.T), scaler, basis, skeleton, cfg.windows.n,
                               cfg.windows.N, cfg.diffusion.final_noise)
        state, optimizer = None, None
    params = count_params(model)
    logger.info("denoiser parameters: %d", params)
    print(f"denoiser parameters: {params:,} ({params / 1e6:.2f}M)")
    run_cfg = cfg.to_dict()

    def on_checkpoint(m, st, opt):
        snapshot(m, st, opt, bundle, ckpt_dir, run_cfg)

    t0 = time.time()
    model, state, optimizer = train(model, samples, cfg.windows.n, tc, bundle.schedule, state, optimizer,
                                    stop_at=stop_at, on_checkpoint=on_checkpoint)
    digest = snapshot(model, state, optimizer, bundle, ckpt_dir, run_cfg)
    write_loss_csv(state.history, out / "loss.csv")
    with open(out / "probe.csv", "w") as fh:
        fh.write("step,probe_loss\n")
        for step, value in state.probes:
            fh.write(f"{step},{value!r}\n")
    return {
        "checkpoint": str(ckpt_dir),
        "digest": digest,
        "steps": state.step,
        "parameters": params,
        "samples": len(samples),
        "windows_dropped": kept.dropped,
        "seconds": time.time() - t0,
    }


# ---------------------------------------------------------------------------
# sample


def run_sample(cfg: RunConfig, ckpt_dir: Path, input_dir: Path, out_dir: Path, K: Optional[int] = None) -> dict:
    bundle = load_checkpoint(ckpt_dir)
    if bundle.n != cfg.windows.n or bundle.N != cfg.windows.N:
        raise PipelineError("checkpoint window sizes differ from the run config")
    recs = load_recordings(input_dir)
    s = cfg.sampling
    K = s.K if K is None else K
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in recs:
        if rec.skeleton.joint_count != bundle.config.joints:
            raise PipelineError(f"{rec.name}: skeleton does not match the checkpoint")
        windows = make_windows(rec, bundle.n, bundle.N, cfg.windows.stride)
        for w in windows:
            if s.max_windows is not None and len(index) >= s.max_windows * K:
                break
            req = ForecastRequest(w.X[..., : w.n], w.scene_state, K, cfg.seed, s.zero_scene, s.zero_others)
            res = forecast(req, bundle, s.max_persons)
            for k in range(K):
                name = f"{rec.name}_{w.start:06d}_k{k}"
                meta = {
                    "name": name,
                    "source": rec.name,
                    "start": w.start,
                    "n": w.n,
                    "N": w.N,
                    "person_ids": list(w.person_ids),
                    "checkpoint": bundle.digest,
                }
                write_forecast(out_dir / name, res, k, rec.skeleton, w.person_ids, w.scene_state, meta)
                index.append(name)
    (out_dir / "index.json").write_text(json.dumps({"forecasts": index, "K": K, "seed": cfg.seed}, indent=1))
    return {"forecasts": len(index), "out": str(out_dir)}


# ---------------------------------------------------------------------------
# evaluate


def _forecast_entries(forecast_dir: Path, gt_by_name: dict, n: int, N: int, stride: int):
    """(predicted window X, ground-truth window) pairs from a forecast directory.

    Directories without a ``forecast.json`` sidecar are plain recordings; they are
    windowed like the ground truth, which lets ground truth be scored against itself.
    """
    entries = []
    dirs = sorted(p for p in Path(forecast_dir).iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise PipelineError(f"no forecasts found in {forecast_dir}")
    for p in dirs:
        rec = load_recording(p)
        side = p / "forecast.json"
        if side.exists():
            meta = json.loads(side.read_text())
            gt = gt_by_name.get(meta["source"])
            if gt is None:
                raise PipelineError(f"forecast {p.name}: no ground truth named {meta['source']!r}")
            if meta["n"] != n or meta["N"] != N:
                raise PipelineError(f"forecast {p.name}: window sizes differ from the config")
            gw = window_at(gt, meta["start"], n, N)
            ids = [t.person_id for t in rec.persons]
            if gw is None or list(gw.person_ids) != ids:
                raise PipelineError(f"forecast {p.name}: window mismatch with ground truth")
            X = np.stack([t.joints.transpose(1, 2, 0) for t in rec.persons]).astype(np.float64)
            entries.append((X, gw))
        else:
            gt = gt_by_name.get(rec.name)
            if gt is None:
                raise PipelineError(f"recording {rec.name}: no ground truth with that name")
            for w in make_windows(rec, n, N, stride):
                gw = window_at(gt, w.start, n, N)
                if gw is None or gw.person_ids != w.person_ids:
                    raise PipelineError(f"recording {rec.name}: window mismatch at {w.start}")
                entries.append((w.X.astype(np.float64), gw))
    return entries


def evaluate(cfg: RunConfig, forecast_dir: Path, gt_dir: Path) -> dict:
    gts = load_recordings(gt_dir)
    gt_by_name = {r.name: r for r in gts}
    skeleton = gts[0].skeleton
    fps = int(round(skeleton.fps))
    n, N = cfg.windows.n, cfg.windows.N
    mc = cfg.metrics
    kappa = mc.kappa
    entries = _forecast_entries(forecast_dir, gt_by_name, n, N, cfg.windows.stride)

    preds, truths = [], []
    for X, gw in entries:
        for i in range(X.shape[0]):
            if gw.presence_mask[i].all():
                preds.append(X[i])
                truths.append(gw.X[i].astype(np.float64))
    if not preds:
        raise PipelineError("no fully observed persons to evaluate")

    refset = M.build_reference_set(
        [t.joints.transpose(1, 2, 0) for r in gts for t in r.persons], skeleton, kappa, source=str(gt_dir)
    )
    prefix = mc.ndms_prefix
    ndms = float(np.mean([M.ndms_score(p[..., n:], p[..., n - prefix : n], refset, skeleton) for p in preds]))
    chis = [p[..., n - kappa + 1 :] for p in preds]
    umwr = {
        f"umwr@{k}s": float(np.mean([M.umwr_at(c, k, refset, skeleton, fps) for c in chis]))
        for k in UMWR_SECONDS
        if fps * k + kappa - 1 <= chis[0].shape[-1]
    }

    # realism: real ground-truth windows against perturbed copies plus some forecasts
    rng = np.random.default_rng([cfg.seed, 7])
    real = np.concatenate(
        [M.realism_windows(t.joints.transpose(1, 2, 0), skeleton) for r in gts for t in r.persons
         if t.num_frames >= M.REALISM_FRAMES]
    )
    noisy = np.stack([
        M.normalize_window(w + rng.normal(0.0, mc.realism_noise_sigma, w.shape), skeleton) for w in real
    ])
    fc_windows = np.concatenate([M.realism_windows(p[..., n:], skeleton) for p in preds])
    take = max(1, int(round(0.1 * len(fc_windows))))
    fake = np.concatenate([noisy, fc_windows[rng.permutation(len(fc_windows))[:take]]])
    clf, report = M.train_realism(real, fake, skeleton.joint_count, mc.realism_epochs, mc.realism_batch_size,
                                  mc.realism_lr, seed=cfg.seed)
    realism = {
        f"realism@{k}s": float(np.mean([M.realism_at_k(p[..., n:], clf, k, skeleton) for p in preds]))
        for k in REALISM_SECONDS
        if k * fps >= M.REALISM_FRAMES and k * fps <= N - n
    }

    d_pred = np.array([M.trajectory_length(M.root_trajectory(p, skeleton), n, N) for p in preds])
    d_true = np.array([M.trajectory_length(M.root_trajectory(t, skeleton), n, N) for t in truths])
    curve = M.velocity_curve([p[..., n - 1 :] for p in preds], skeleton)
    gt_curve = M.velocity_curve([t[..., n - 1 :] for t in truths], skeleton)
    report_doc = {
        "ndms": ndms,
        **umwr,
        **realism,
        "trajectory": {
            "mean": float(d_pred.mean()),
            "std": float(d_pred.std()),
            "w1": M.wasserstein1(d_pred, d_true),
            "gt_mean": float(d_true.mean()),
            "gt_std": float(d_true.std()),
        },
        "velocity_curve": curve.tolist(),
        "gt_velocity_curve": gt_curve.tolist(),
        "realism_classifier": {
            "accuracy": report.accuracy,
            "auc": report.auc,
            "train_size": report.train_size,
            "test_size": report.test_size,
        },
        "counts": {"sequences": len(preds), "reference_words": len(refset)},
    }
    return report_doc


# ---------------------------------------------------------------------------
# plot


def plot(cfg: RunConfig, metrics_path: Path, forecast_dir: Path, gt_dir: Optional[Path], out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = json.loads(Path(metrics_path).read_text())
    n = cfg.windows.n
    seqs = []
    dirs = sorted(p for p in Path(forecast_dir).iterdir() if (p / "manifest.json").exists()) \
        if Path(forecast_dir).is_dir() else []
    skeleton = None
    for p in dirs:
        rec = load_recording(p)
        skeleton = rec.skeleton
        for t in rec.persons:
            if t.num_frames > n:
                seqs.append(t.joints.transpose(1, 2, 0).astype(np.float64))
    if not seqs:
        raise PipelineError(f"no forecast trajectories in {forecast_dir}")
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.permutation(len(seqs))[: cfg.metrics.plot_trajectories]
    out_dir.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(5, 5))
    for i in sorted(chosen):
        s = seqs[i]
        r = M.root_trajectory(apply_norm(fit_norm(s, n, skeleton), s), skeleton)[n - 1 :]
        ax.plot(r[:, 0], r[:, 1], lw=1)
    ax.scatter([0], [0], c="k", s=12, zorder=3)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m] (facing +y)")
    ax.set_title(f"{len(chosen)} forecast root trajectories")
    traj_path = out_dir / "trajectories.png"
    fig.savefig(traj_path, dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3))
    fps = skeleton.fps
    curve = np.asarray(report["velocity_curve"])
    ax.plot(np.arange(1, len(curve) + 1) / fps, curve, label="forecast")
    if "gt_velocity_curve" in report:
        gt = np.asarray(report["gt_velocity_curve"])
        ax.plot(np.arange(1, len(gt) + 1) / fps, gt, label="ground truth")
    ax.set_xlabel("time into forecast [s]")
    ax.set_ylabel("mean speed [m/s]")
    ax.legend()
    vel_path = out_dir / "velocity.png"
    fig.savefig(vel_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [str(traj_path), str(vel_path)]
