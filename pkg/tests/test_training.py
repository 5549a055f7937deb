import numpy as np
import pytest
import torch

from scenecast.checkpoint import CheckpointError, ForecastModel, load_checkpoint, save_checkpoint
from scenecast.config import make_denoiser_config
from scenecast.denoiser import Denoiser
from scenecast.diffusion import cosine_schedule
from scenecast.motion_data import make_windows
from scenecast.training import (
    TrainConfig,
    TrainingDiverged,
    collate,
    fit_scaler,
    pad_input,
    read_loss_csv,
    resume,
    snapshot,
    to_samples,
    train,
    window_datapoints,
    write_loss_csv,
)

n, N = 8, 32


@pytest.fixture(scope="module")
def setup(small_recording, basis):
    windows = make_windows(small_recording, n, N, 16)
    dps = window_datapoints(windows, basis)
    scaler = fit_scaler(dps)
    return to_samples(dps, scaler), scaler


def _model(seed=0, T=50):
    torch.manual_seed(seed)
    return Denoiser(make_denoiser_config("tiny", frames=N, diffusion_steps=T))


def _cfg(**kw):
    base = dict(T=50, total_steps=6, batch_size=4, lr_start=1e-4, lr_end=1e-3, probe_every=3, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule_is_linear():
    c = TrainConfig(total_steps=5, lr_start=2e-7, lr_end=5e-5)
    assert c.lr_at(1) == 2e-7 and c.lr_at(5) == pytest.approx(5e-5)
    assert c.lr_at(3) == pytest.approx((2e-7 + 5e-5) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=0.0)


def test_pad_input_repeats_frame_n():
    x = np.arange(10.0).reshape(1, 10)
    assert pad_input(x, 4).tolist() == [[0, 1, 2, 3, 3, 3, 3, 3, 3, 3]]


def test_samples_are_scaled(setup):
    samples, _ = setup
    assert np.abs(np.stack([s.x for s in samples])).max() <= 3.0 + 1e-6
    for s in samples:
        assert not np.diff(s.x_input[..., n - 1 :], axis=-1).any()


def test_collate_pads_and_masks(setup):
    samples, _ = setup
    a, b = samples[0], samples[1]
    b2 = type(b)(b.x, b.x_input, b.others[:1], b.scene[:2], b.mask)
    x, cond, mask = collate([a, b2], 2061)
    assert cond.others.shape[1] == a.others.shape[0]
    assert cond.others_mask[1].tolist() == [True] + [False] * (a.others.shape[0] - 1)
    assert cond.scene_mask[1].sum() == 2
    assert not cond.scene[1, 2:].any()


def test_same_seed_same_history(setup):
    samples, _ = setup
    _, s1, _ = train(_model(), samples, n, _cfg())
    _, s2, _ = train(_model(), samples, n, _cfg())
    assert s1.history == s2.history and s1.probes == s2.probes
    _, s3, _ = train(_model(), samples, n, _cfg(seed=1))
    assert s3.history != s1.history


def _bundle(model, setup, basis, small_recording):
    _, scaler = setup
    return ForecastModel(model, cosine_schedule(50), scaler, basis, small_recording.skeleton, n, N)


def test_resume_continues_identically(setup, basis, small_recording, tmp_path):
    samples, _ = setup
    cfg = _cfg(total_steps=8)
    full_model, full, _ = train(_model(), samples, n, cfg)

    model, part, opt = train(_model(), samples, n, cfg, stop_at=4)
    snapshot(model, part, opt, _bundle(model, setup, basis, small_recording), tmp_path / "ck")
    bundle, state, opt2 = resume(tmp_path / "ck", samples, cfg)
    model2, rest, _ = train(bundle.model, samples, n, cfg, bundle.schedule, state, opt2)
    assert rest.history == full.history
    for p, q in zip(model2.parameters(), full_model.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_round_trip(setup, basis, small_recording, tmp_path):
    model = _model().eval()
    b = _bundle(model, setup, basis, small_recording)
    digest = save_checkpoint(tmp_path / "ck", b)
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.digest == digest
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    np.testing.assert_array_equal(loaded.basis.points, basis.points)
    np.testing.assert_array_equal(loaded.scaler.minimum, b.scaler.minimum)
    assert loaded.schedule.digest() == b.schedule.digest()


def test_checkpoint_rejects_tampered_basis(setup, basis, small_recording, tmp_path):
    import json

    save_checkpoint(tmp_path / "ck", _bundle(_model(), setup, basis, small_recording))
    m = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    m["basis"]["seed"] = 99
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_nan_loss_aborts(setup):
    samples, _ = setup
    model = _model()
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(model, samples, n, _cfg(total_steps=2))


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(_model(), [], n, _cfg())


def test_loss_csv_round_trip(tmp_path):
    hist = [(1, 0.5, 1e-4), (2, 0.25, 2e-4)]
    write_loss_csv(hist, tmp_path / "loss.csv")
    assert read_loss_csv(tmp_path / "loss.csv") == hist
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,loss,lr"


def test_grad_clip_and_ema_options_run(setup):
    samples, _ = setup
    _, st, _ = train(_model(), samples, n, _cfg(total_steps=3, grad_clip=1.0, ema_decay=0.9))
    assert len(st.history) == 3
