"""Checkpoint container: manifest.json plus one little-endian binary blob.

Float parameters are stored as ``<f4``. The basis point set is stored as
``<f8`` so that a loaded checkpoint reproduces its encodings bit for bit, and
it is checked against regeneration from its seed on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, cosine_schedule
from .motion_data import SkeletonSpec
from .normalize import MinMaxScaler
from .scene_bps import BasisPointSet, generate_basis

CHECKPOINT_FORMAT = "scenecast-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, manifest: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) into ``data.bin`` indexed by the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<f8" if arr.dtype == np.float64 and name.startswith("f8:") else "<f4"
        buf = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = dict(manifest, arrays=entries, data_bytes=offset)
    (path / "data.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_container(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "data.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read container at {path}: {exc}") from exc
    if len(payload) != manifest.get("data_bytes"):
        raise CheckpointError("data.bin size disagrees with the manifest")
    arrays = {}
    for e in manifest["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"array {e['name']} runs past the end of data.bin")
        arrays[e["name"]] = np.frombuffer(payload, dtype, count, e["offset"]).reshape(e["shape"]).copy()
    return manifest, arrays


@dataclass
class ForecastModel:
    """Everything needed to sample: network, schedule, scaler, basis, window sizes."""

    model: Denoiser
    schedule: DiffusionSchedule
    scaler: MinMaxScaler
    basis: BasisPointSet
    skeleton: SkeletonSpec
    n: int
    N: int
    final_noise: bool = False
    step: int = 0
    digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> DenoiserConfig:
        return self.model.config


def _state_arrays(module: torch.nn.Module) -> dict:
    return {f"param:{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, bundle: ForecastModel, optimizer: Optional[torch.optim.Optimizer] = None,
                    loss_history: Optional[list] = None, run_config: Optional[dict] = None) -> str:
    """Write the bundle (and optionally optimizer state) and return its digest."""
    arrays = _state_arrays(bundle.model)
    arrays["f8:basis"] = bundle.basis.points
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"param_groups": [], "steps": {}}
        state = optimizer.state_dict()
        for g in state["param_groups"]:
            opt_meta["param_groups"].append({k: v for k, v in g.items()})
        for idx, st in state["state"].items():
            opt_meta["steps"][str(idx)] = float(st["step"])
            for key in ("exp_avg", "exp_avg_sq"):
                arrays[f"opt:{idx}:{key}"] = st[key].cpu().numpy()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "denoiser": bundle.config.to_dict(),
        "schedule": {"T": bundle.schedule.T, "kind": "cosine", "digest": bundle.schedule.digest()},
        "scaler": bundle.scaler.to_dict(),
        "basis": {"seed": bundle.basis.seed, "radius": bundle.basis.sampling_radius, "size": bundle.basis.size},
        "skeleton": bundle.skeleton.to_dict(),
        "window": {"n": bundle.n, "N": bundle.N},
        "final_noise": bundle.final_noise,
        "step": bundle.step,
        "optimizer": opt_meta,
        "loss_history": loss_history or [],
        "run_config": run_config,
        "extra": bundle.extra,
    }
    write_container(path, manifest, arrays)
    digest = checkpoint_digest(path)
    bundle.digest = digest
    return digest


def checkpoint_digest(path) -> str:
    h = hashlib.sha256()
    for name in ("manifest.json", "data.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()[:16]


def load_checkpoint(path, with_optimizer: bool = False):
    """Returns the :class:`ForecastModel`; with ``with_optimizer`` also
    ``(optimizer_state_dict or None, manifest)``."""
    manifest, arrays = read_container(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint container")
    for key in ("scaler", "basis", "schedule", "denoiser"):
        if not manifest.get(key):
            raise CheckpointError(f"checkpoint is missing its {key}")
    cfg = DenoiserConfig(**manifest["denoiser"])
    model = Denoiser(cfg)
    state = {k[len("param:"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param:")}
    model.load_state_dict(state)
    model.eval()

    sched = cosine_schedule(manifest["schedule"]["T"])
    if sched.digest() != manifest["schedule"]["digest"]:
        raise CheckpointError("schedule digest mismatch")
    b = manifest["basis"]
    if "f8:basis" not in arrays:
        raise CheckpointError("checkpoint is missing its basis points")
    basis = BasisPointSet(arrays["f8:basis"], b["seed"], b["radius"])
    regenerated = generate_basis(b["seed"], b["size"], b["radius"])
    if not np.array_equal(regenerated.points, basis.points):
        raise CheckpointError("basis points do not match their recorded seed/radius")
    bundle = ForecastModel(
        model=model,
        schedule=sched,
        scaler=MinMaxScaler.from_dict(manifest["scaler"]),
        basis=basis,
        skeleton=SkeletonSpec.from_dict(manifest["skeleton"]),
        n=manifest["window"]["n"],
        N=manifest["window"]["N"],
        final_noise=bool(manifest.get("final_noise", False)),
        step=int(manifest.get("step", 0)),
        digest=checkpoint_digest(path),
        extra=manifest.get("extra") or {},
    )
    if not with_optimizer:
        return bundle
    opt_state = None
    meta = manifest.get("optimizer")
    if meta:
        st = {}
        for idx, step in meta["steps"].items():
            st[int(idx)] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(arrays[f"opt:{idx}:exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt:{idx}:exp_avg_sq"]),
            }
        opt_state = {"state": st, "param_groups": meta["param_groups"]}
    return bundle, opt_state, manifest
