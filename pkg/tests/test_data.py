import json
import math

import numpy as np
import pytest

from deesco.data import (DataError, GazeSample, SynthParams, decode_record, denormalize_targets, encode_record,
                         load_dataset, make_folds, normalize_targets, render_eye, synth_generate, synth_sample)
from deesco.data import _subject_appearance


def test_loso_fifteen_subjects():
    folds = make_folds(range(15), "loso")
    assert len(folds) == 15
    for f in folds:
        assert len(f.test_subjects) == 1
        assert not set(f.train_subjects) & set(f.test_subjects)
        assert sorted(f.train_subjects + f.test_subjects) == list(range(15))
    assert sorted(s for f in folds for s in f.test_subjects) == list(range(15))


def test_kfold_three_over_fifty():
    folds = make_folds(range(50), "kfold", k=3)
    assert [len(f.test_subjects) for f in folds] == [17, 17, 16]
    tests = [set(f.test_subjects) for f in folds]
    assert set.union(*tests) == set(range(50))
    assert all(not (a & b) for i, a in enumerate(tests) for b in tests[i + 1:])
    for f in folds:
        assert not set(f.train_subjects) & set(f.test_subjects)


@pytest.mark.parametrize("args", [((0,), "loso", None), (range(3), "kfold", 4), (range(3), "kfold", 1),
                                  (range(3), "bootstrap", None)])
def test_fold_errors(args):
    with pytest.raises(DataError):
        make_folds(*args)


def test_record_round_trip(rng):
    s = GazeSample(rng.uniform(0, 1, (4, 6, 3)), rng.uniform(0, 1, (4, 6, 3)), rng.uniform(0, 1, (16, 16)),
                   "gaze2d", (0.25, -0.5), 7, (150.0, 95.0))
    back = decode_record(encode_record(s))
    np.testing.assert_array_equal(back.left_crop, s.left_crop.astype(np.float32))
    np.testing.assert_array_equal(back.position_mask, s.position_mask.astype(np.float32))
    assert back.target == (0.25, -0.5) and back.subject_id == 7 and back.target_kind == "gaze2d"
    assert back.screen_half_extent_mm == (150.0, 95.0) and back.gaze2d == (0.25, -0.5) and back.gaze3d is None


def test_record_corruption_detected(rng):
    s = GazeSample(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((16, 16)), "gaze3d", (0.1, 0.2), 0)
    buf = bytearray(encode_record(s))
    with pytest.raises(DataError, match="truncated|expected"):
        decode_record(bytes(buf[:-10]), "x")
    flipped = bytearray(buf)
    flipped[40] ^= 0xFF
    with pytest.raises(DataError, match="checksum"):
        decode_record(bytes(flipped))
    with pytest.raises(DataError, match="magic"):
        decode_record(b"XXXXXX" + bytes(buf[6:]))


def test_generation_is_byte_identical(tmp_path):
    p = SynthParams(crop_size=(16, 16))
    synth_generate(tmp_path / "a", 5, 2, 4, p)
    synth_generate(tmp_path / "b", 5, 2, 4, p)
    synth_generate(tmp_path / "c", 6, 2, 4, p)
    files = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*") if f.is_file())
    assert len(files) == 9
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / files[1]).read_bytes() != (tmp_path / "c" / files[1]).read_bytes()


def test_generation_needs_two_subjects(tmp_path):
    with pytest.raises(DataError, match="at least 2 subjects"):
        synth_generate(tmp_path, 0, 1, 4)


def test_truncated_sample_names_the_file(tiny_dataset, tmp_path):
    import shutil

    ds_path = tmp_path / "ds"
    shutil.copytree(tiny_dataset, ds_path)
    victim = ds_path / "samples" / "s001_00003.dgzs"
    victim.write_bytes(victim.read_bytes()[:100])
    ds = load_dataset(ds_path)
    with pytest.raises(DataError, match="s001_00003"):
        ds.arrays()


def test_manifest_validation(tiny_dataset, tmp_path):
    import shutil

    ds_path = tmp_path / "ds"
    shutil.copytree(tiny_dataset, ds_path)
    m = json.loads((ds_path / "manifest.json").read_text())
    m["count"] = 3
    (ds_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="declares"):
        load_dataset(ds_path)
    with pytest.raises(DataError, match="no manifest"):
        load_dataset(tmp_path / "nowhere")


def test_dataset_arrays_and_batches(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    assert len(ds) == 48 and ds.subjects == [0, 1, 2]
    a = ds.arrays()
    assert a["left"].shape == (48, 3, 16, 16) and a["mask"].shape == (48, 1, 16, 16)
    idx = ds.indices_for_subjects([1])
    assert len(idx) == 16 and set(a["subject"][idx]) == {1}
    b = ds.batch(idx[:5])
    np.testing.assert_allclose(b.targets * np.array(ds.gaze_range), b.raw_targets, rtol=1e-15)
    assert np.all(np.abs(b.targets) <= 1.0)
    order1 = [s.target for s in ds.iter_shuffled(3)]
    assert order1 == [s.target for s in ds.iter_shuffled(3)]


def test_target_normalisation_round_trip(rng):
    rng_ = (math.pi / 4, math.pi / 6)
    t = rng.uniform(-1, 1, (10, 2)) * rng_
    np.testing.assert_allclose(denormalize_targets(normalize_targets(t, "gaze3d", rng_), "gaze3d", rng_), t)
    with pytest.raises(DataError, match="outside"):
        normalize_targets(np.array([[2.0, 0.0]]), "gaze2d", rng_)


def test_gaze2d_dataset_keeps_screen_extent(tmp_path):
    synth_generate(tmp_path, 0, 2, 3, SynthParams(crop_size=(16, 16), target_kind="gaze2d"))
    ds = load_dataset(tmp_path)
    assert ds.target_kind == "gaze2d"
    np.testing.assert_array_equal(ds.arrays()["screen"][0], [150.0, 95.0])


def test_invalid_synth_params():
    with pytest.raises(DataError):
        SynthParams(iris_radius=(0.3, 0.5)).validate()
    with pytest.raises(DataError):
        SynthParams(target_kind="gaze4d").validate()


def test_pupil_position_is_linear_in_gaze():
    """Noiseless renders: the dark-pupil centroid predicts the normalised target almost perfectly."""
    params = SynthParams(crop_size=(32, 32), noise_std=0.0)
    feats, targets = [], []
    for subject in range(3):
        app = _subject_appearance(np.random.default_rng([0, 0, subject]), params)
        for i in range(80):
            norm = np.random.default_rng([9, subject, i]).uniform(-1, 1, 2)
            img = render_eye(norm, app, params).mean(axis=2)
            w = np.clip(0.2 - img, 0.0, None)
            ys, xs = np.mgrid[0:32, 0:32]
            feats.append([np.sum(w * xs) / w.sum(), np.sum(w * ys) / w.sum(), 1.0])
            targets.append(norm)
    X, Y = np.array(feats), np.array(targets)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    r2 = 1 - resid.var(axis=0) / Y.var(axis=0)
    assert np.all(r2 > 0.99), r2


def test_samples_are_seeded_per_index():
    params = SynthParams(crop_size=(16, 16))
    app = _subject_appearance(np.random.default_rng([0, 0, 1]), params)
    a, b = synth_sample(0, 1, 5, app, params), synth_sample(0, 1, 5, app, params)
    np.testing.assert_array_equal(a.left_crop, b.left_crop)
    assert a.target != synth_sample(0, 1, 6, app, params).target
