import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenecast.motion_data import (
    ManifestError,
    MultiPersonWindow,
    PersonTrack,
    SceneObject,
    SceneRecording,
    ShapeMismatchError,
    SkeletonSpec,
    UnknownObjectTypeError,
    is_standing_only,
    load_recording,
    make_windows,
    undersample_standing,
    window_at,
    write_recording,
    zero_velocity_pad,
)
from scenecast.synth import InfeasibleConfigError, SynthConfig, object_boxes, synth_generate


def _track(pid, first, last, J=17, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    return PersonTrack(pid, first, last, rng.normal(size=(last - first + 1, J, 3)).astype(np.float32), labels)


def _recording(total=300, tracks=None, objects=None):
    tracks = tracks if tracks is not None else [_track("a", 0, total - 1)]
    objects = objects if objects is not None else [SceneObject("o", "table", np.ones((4, 3), np.float32))]
    return SceneRecording(SkeletonSpec(), tracks, objects, total, name="rec")


def test_skeleton_rejects_bad_hips():
    with pytest.raises(ValueError):
        SkeletonSpec(left_hip_index=3, right_hip_index=3)
    with pytest.raises(ValueError):
        SkeletonSpec(left_hip_index=17)


def test_round_trip_is_bit_exact(tmp_path, small_recording):
    write_recording(small_recording, tmp_path / "r")
    loaded = load_recording(tmp_path / "r")
    assert loaded == small_recording
    write_recording(loaded, tmp_path / "r2")
    for name in ("manifest.json", "tracks.bin", "objects.bin"):
        assert (tmp_path / "r" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_round_trip_keeps_object_poses(tmp_path):
    obj = SceneObject("c", "chair", np.zeros((3, 3), np.float32), pose_frames=(5,), pose_params=[[0.5, 1.0, 2.0, 0.0]])
    rec = _recording(objects=[obj])
    write_recording(rec, tmp_path / "r")
    assert load_recording(tmp_path / "r") == rec
    assert np.allclose(rec.scene_state(4)[0].points, 0)
    assert np.allclose(rec.scene_state(5)[0].points[:, :2], [1.0, 2.0])


def test_truncated_payload_is_rejected(tmp_path):
    write_recording(_recording(), tmp_path / "r")
    data = (tmp_path / "r" / "tracks.bin").read_bytes()
    (tmp_path / "r" / "tracks.bin").write_bytes(data[:-4])
    with pytest.raises(ShapeMismatchError):
        load_recording(tmp_path / "r")


def test_unknown_object_type_is_rejected(tmp_path):
    write_recording(_recording(), tmp_path / "r")
    m = json.loads((tmp_path / "r" / "manifest.json").read_text())
    m["objects"][0]["object_type"] = "piano"
    (tmp_path / "r" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(UnknownObjectTypeError):
        load_recording(tmp_path / "r")


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_recording(tmp_path)


def test_zero_velocity_pad_full_coverage_is_identity():
    t = _track("a", 0, 49)
    seq, mask = zero_velocity_pad(t, 10, 40)
    assert mask.all()
    np.testing.assert_array_equal(seq, t.joints[10:40].transpose(1, 2, 0))


@settings(max_examples=40, deadline=None)
@given(first=st.integers(0, 30), length=st.integers(1, 30), start=st.integers(0, 40), size=st.integers(1, 30))
def test_padding_only_where_mask_false(first, length, start, size):
    last = first + length - 1
    if last < start or first > start + size - 1:
        return
    t = _track("a", first, last, seed=first)
    seq, mask = zero_velocity_pad(t, start, start + size)
    frames = np.arange(start, start + size)
    np.testing.assert_array_equal(mask, (frames >= first) & (frames <= last))
    vel = np.diff(seq, axis=-1)
    # every transition into or between padded frames has zero velocity
    for f in range(1, size):
        if not mask[f] and (not mask[f - 1] or frames[f] > last):
            assert not vel[..., f - 1].any()
        if not mask[f - 1] and frames[f - 1] < first:
            assert not vel[..., f - 1].any()


def test_window_count_formula():
    rec = _recording(total=300)
    windows = make_windows(rec, 25, 275, 25)
    assert [w.start for w in windows] == [0, 25]


def test_person_entering_after_input_is_excluded():
    n = 25
    rec = _recording(total=300, tracks=[_track("a", 0, 299), _track("b", n + 10, 299, seed=1)])
    w = make_windows(rec, n, 275, 25)[0]
    assert w.person_ids == ("a",)


@given(st.integers(0, 60), st.integers(1, 40))
@settings(max_examples=30, deadline=None)
def test_windows_never_hold_absent_people(first, length):
    rec = _recording(total=120, tracks=[_track("a", 0, 119), _track("b", first, min(119, first + length), seed=2)])
    for w in make_windows(rec, 10, 40, 5):
        assert w.presence_mask[:, :10].any(axis=1).all()


def test_window_at_matches_make_windows(small_recording):
    for w in make_windows(small_recording, 8, 32, 16):
        v = window_at(small_recording, w.start, 8, 32)
        np.testing.assert_array_equal(v.X, w.X)


def _standing_window(start, standing, source="s"):
    X = np.zeros((1, 17, 3, 20))
    X[:, :, 2] = 1.0
    if not standing:
        X[:, :, 0] += np.linspace(0, 2, 20)
    return MultiPersonWindow(X, np.ones((1, 20), bool), [], 5, 20, ("a",), start, source)


def test_undersample_extremes():
    ws = [_standing_window(i, i % 3 == 0) for i in range(30)]
    assert len(undersample_standing(ws, 0.0, 1).windows) == 30
    kept = undersample_standing(ws, 1.0, 1).windows
    assert all(not is_standing_only(w) for w in kept) and len(kept) == 20


def test_undersample_removes_about_half_of_standing_share():
    # 30% standing-only windows, fraction 0.5 -> about 15% removed
    ws = [_standing_window(i, i % 10 < 3) for i in range(4000)]
    res = undersample_standing(ws, 0.5, seed=3)
    assert abs(res.dropped / len(ws) - 0.15) < 0.02
    again = undersample_standing(ws, 0.5, seed=3)
    assert [w.start for w in again.windows] == [w.start for w in res.windows]


def test_labels_drive_standing_decision():
    w = _standing_window(0, False)
    labelled = MultiPersonWindow(w.X, w.presence_mask, [], 5, 20, ("a",), 0, "s", labels=(("stand",) * 20,))
    assert is_standing_only(labelled)
    assert not is_standing_only(labelled, use_labels=False)


def test_synth_single_person_length():
    rec = synth_generate(SynthConfig(persons=1, objects=3, duration=20.0), seed=0)
    assert rec.total_frames == 500 and len(rec.persons) == 1 and len(rec.objects) == 3


def test_synth_is_deterministic():
    cfg = SynthConfig(persons=2, objects=5, duration=4.0)
    assert synth_generate(cfg, 5) == synth_generate(cfg, 5)
    assert synth_generate(cfg, 5) != synth_generate(cfg, 6)


def test_synth_people_avoid_furniture():
    rec = synth_generate(SynthConfig(persons=3, objects=10, duration=8.0, room=(9.0, 7.0)), seed=4)
    boxes = object_boxes(rec)
    lh, rh = rec.skeleton.hips
    for p in rec.persons:
        hip = 0.5 * (p.joints[:, lh, :2] + p.joints[:, rh, :2])
        labels = np.array(p.labels)
        upright = hip[np.isin(labels, ["stand", "walk"])]
        for b in boxes:
            inside = (upright[:, 0] > b.x0) & (upright[:, 0] < b.x1) & (upright[:, 1] > b.y0) & (upright[:, 1] < b.y1)
            assert not inside.any()


def test_synth_rejects_tiny_room():
    with pytest.raises(InfeasibleConfigError):
        synth_generate(SynthConfig(room=(0.5, 0.5)), seed=0)
