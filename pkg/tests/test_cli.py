import json

import numpy as np
import pytest
import yaml

from scenecast import metrics as M
from scenecast.cli import main
from scenecast.config import ConfigError, RunConfig, config_from_dict, load_config, set_dotted
from scenecast.motion_data import load_recording, make_windows

SMALL = {
    "seed": 3,
    "data": {"train_recordings": 1, "test_recordings": 1, "persons": 2, "objects": 5, "duration": 12.0},
    "model": {"preset": "tiny"},
    "diffusion": {"steps": 10},
    "training": {"steps": 6, "batch_size": 4, "probe_every": 3, "log_every": 0, "checkpoint_every": 3},
    "sampling": {"K": 2, "max_windows": 1},
    "metrics": {"realism_epochs": 1},
}


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    base = ["--config", str(cfg), "--out", str(root)]
    for cmd in ("gen-data", "train", "sample", "evaluate", "plot"):
        assert main([cmd, *base]) == 0, cmd
    return root, base


def test_unknown_config_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"training": {"stepz": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"preset": "huge"}})
    with pytest.raises(ConfigError):
        set_dotted(RunConfig(), "training.nope", 1)
    p = tmp_path / "c.yaml"
    p.write_text("windows: {n: 10, N: 50}\n")
    assert load_config(p).windows.N == 50


def test_cli_reports_config_errors(tmp_path, capsys):
    code, _, err = _run(capsys, "gen-data", "--out", str(tmp_path), "--set", "data.colour=red")
    assert code == 1 and json.loads(err)["error"] == "ConfigError"


def test_gen_data_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert _run(capsys, "gen-data", "--out", str(tmp_path / d), "--seed", "4",
                    "--set", "data.duration=3.0", "--set", "data.train_recordings=2")[0] == 0
    for split, name in (("train", "train_000"), ("train", "train_001"), ("test", "test_000")):
        for f in ("manifest.json", "tracks.bin", "objects.bin"):
            a = (tmp_path / "a" / "data" / split / name / f).read_bytes()
            assert a == (tmp_path / "b" / "data" / split / name / f).read_bytes()
    assert load_recording(tmp_path / "a/data/train/train_000") != load_recording(tmp_path / "a/data/train/train_001")


def test_infeasible_room_exits_nonzero(tmp_path, capsys):
    code, _, err = _run(capsys, "gen-data", "--out", str(tmp_path), "--set", "data.room=[0.5, 0.5]")
    assert code == 1
    assert json.loads(err)["error"] == "InfeasibleConfigError"


def test_pipeline_outputs(run):
    root, _ = run
    assert (root / "checkpoint" / "manifest.json").exists()
    index = json.loads((root / "forecasts" / "index.json").read_text())
    assert len(index["forecasts"]) == 2 and index["K"] == 2
    for name in ("loss.csv", "probe.csv", "metrics.json", "plots/trajectories.png", "plots/velocity.png"):
        assert (root / name).exists(), name
    for cmd in ("gen-data", "train", "sample", "evaluate", "plot"):
        assert json.loads((root / f"{cmd}.config.json").read_text())["seed"] == 3
    report = json.loads((root / "metrics.json").read_text())
    for key in ("ndms", "umwr@2s", "trajectory", "velocity_curve", "realism_classifier", "counts"):
        assert key in report
    assert 0.0 <= report["ndms"] <= 1.0


def test_forecasts_keep_input_frames(run):
    root, _ = run
    name = json.loads((root / "forecasts" / "index.json").read_text())["forecasts"][0]
    meta = json.loads((root / "forecasts" / name / "forecast.json").read_text())
    fc = load_recording(root / "forecasts" / name)
    gt = load_recording(root / "data" / "test" / meta["source"])
    w = [w for w in make_windows(gt, 25, 275, 25) if w.start == meta["start"]][0]
    for i, pid in enumerate(w.person_ids):
        track = [t for t in fc.persons if t.person_id == pid][0]
        np.testing.assert_array_equal(track.joints[:25].transpose(1, 2, 0), w.X[i][..., :25])


@pytest.fixture(scope="module")
def gtgt(run):
    root, base = run
    gt = str(root / "data" / "test")
    dest = root / "gtgt.json"
    assert main(["evaluate", *base, "--forecasts", gt, "--ground-truth", gt, "--metrics", str(dest)]) == 0
    return json.loads(dest.read_text())


def test_ground_truth_against_itself(gtgt):
    report = gtgt
    assert report["ndms"] == 1.0
    assert report["trajectory"]["w1"] == 0.0
    assert report["velocity_curve"] == report["gt_velocity_curve"]
    for k in (2, 4, 6, 8, 10):
        assert f"umwr@{k}s" in report
    for k in range(2, 11):
        assert 0.0 <= report[f"realism@{k}s"] <= 1.0


def test_umwr_report_matches_direct_metric(run, gtgt):
    root, _ = run
    report = gtgt
    gt = load_recording(root / "data" / "test" / "test_000")
    sk = gt.skeleton
    refset = M.build_reference_set([t.joints.transpose(1, 2, 0) for t in gt.persons], sk)
    chis = []
    for w in make_windows(gt, 25, 275, 25):
        for i in range(w.num_persons):
            if w.presence_mask[i].all():
                chis.append(w.X[i].astype(np.float64)[..., 25 - 7 :])
    for k in (2, 6, 10):
        direct = np.mean([M.umwr_at(c, k, refset, sk) for c in chis])
        assert report[f"umwr@{k}s"] == pytest.approx(direct, abs=1e-12)


def test_plot_needs_forecasts(run, tmp_path, capsys):
    root, base = run
    (tmp_path / "empty").mkdir()
    code, _, err = _run(capsys, "plot", *base, "--forecasts", str(tmp_path / "empty"))
    assert code == 1 and json.loads(err)["error"] == "PipelineError"


def test_plot_is_deterministic(run, tmp_path, capsys):
    root, base = run
    first = (root / "plots" / "trajectories.png").read_bytes()
    assert _run(capsys, "plot", *base)[0] == 0
    assert (root / "plots" / "trajectories.png").read_bytes() == first


def test_paper_preset_reports_parameter_count(run, tmp_path, capsys):
    root, base = run
    code, out, _ = _run(capsys, "train", *base, "--preset", "paper", "--steps", "1",
                        "--set", "training.batch_size=1", "--checkpoint", str(tmp_path / "ck"),
                        "--out", str(tmp_path), "--data", str(root / "data" / "train"))
    assert code == 0
    line = [l for l in out.splitlines() if l.startswith("denoiser parameters:")][0]
    count = int(line.split(":")[1].split("(")[0].replace(",", ""))
    assert abs(count - 15.3e6) / 15.3e6 <= 0.10
