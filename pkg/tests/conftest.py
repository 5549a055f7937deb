import numpy as np
import pytest
import torch

from scenecast.checkpoint import ForecastModel
from scenecast.config import make_denoiser_config
from scenecast.denoiser import Denoiser
from scenecast.diffusion import cosine_schedule
from scenecast.motion_data import SkeletonSpec, make_windows
from scenecast.scene_bps import generate_basis
from scenecast.synth import SynthConfig, synth_generate
from scenecast.training import fit_scaler, window_datapoints


@pytest.fixture(scope="session")
def skeleton():
    return SkeletonSpec()


@pytest.fixture(scope="session")
def small_recording():
    cfg = SynthConfig(persons=3, objects=6, duration=6.0, name="small")
    return synth_generate(cfg, seed=11)


@pytest.fixture(scope="session")
def basis():
    return generate_basis(0)


def make_tiny_bundle(rec, basis, n=8, N=32, T=12, seed=0):
    torch.manual_seed(seed)
    model = Denoiser(make_denoiser_config("tiny", frames=N, diffusion_steps=T))
    model.eval()
    windows = make_windows(rec, n, N, 16)
    scaler = fit_scaler(window_datapoints(windows, basis))
    return ForecastModel(model, cosine_schedule(T), scaler, basis, rec.skeleton, n, N)


@pytest.fixture(scope="session")
def tiny_bundle(small_recording, basis):
    return make_tiny_bundle(small_recording, basis)


def random_pose(rng, J=17):
    """Standing-ish pose with distinct hips, arbitrary heading and position."""
    pts = rng.normal(0.0, 0.3, size=(J, 3))
    pts[:, 2] = np.abs(pts[:, 2]) + 0.5
    return pts
