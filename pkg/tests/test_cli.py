import json

import numpy as np
import pytest

from conftest import tiny_config
from deesco.cli import main, read_pgm, write_pgm

TINY = ["--crop", "16", "--heatmap-size", "16", "--channels", "4,8", "--fc-widths", "16",
        "--batch-size", "4", "--steps", "3"]


@pytest.fixture(scope="module")
def trained_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "run"
    assert main(["train", "--dataset", str(tiny_dataset), "--out", str(out), "--max-folds", "2", *TINY]) == 0
    return out


def test_pgm_scaling(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 64], [128, 255]])
    write_pgm(tmp_path / "c.pgm", np.full((3, 4), 7.0))
    img = read_pgm(tmp_path / "c.pgm")
    assert img.shape == (3, 4) and np.all(img == img[0, 0])


def test_gen_and_subject_check(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--subjects", "2", "--per-subject", "3", "--crop", "16"]) == 0
    assert (tmp_path / "d" / "manifest.json").is_file()
    assert main(["gen", "--out", str(tmp_path / "e"), "--subjects", "1"]) == 2
    assert "at least 2 subjects" in capsys.readouterr().err


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_train_writes_run_directory(trained_run):
    assert json.loads((trained_run / "run.json").read_text())["tool"] == "deesco"
    cfg = json.loads((trained_run / "config.json").read_text())
    assert cfg["schedule"]["total_steps"] == 3 and cfg["max_folds"] == 2
    for f in (0, 1):
        assert (trained_run / f"fold{f}" / f"fold{f}.ckpt").is_file()
        assert len((trained_run / f"fold{f}" / "steps.jsonl").read_text().splitlines()) == 3


def test_eval_reports_per_fold(trained_run, capsys):
    assert main(["eval", "--run", str(trained_run)]) == 0
    assert "overall:" in capsys.readouterr().out
    rep = json.loads((trained_run / "report.json").read_text())
    assert [r["fold"] for r in rep["per_fold"]] == [0, 1] and rep["unit"] == "deg"
    assert (trained_run / "report.csv").is_file()
    assert main(["eval", "--run", str(trained_run), "--metric", "2d"]) == 2


def test_introspect_emits_all_maps(trained_run, tmp_path):
    out = tmp_path / "maps"
    assert main(["introspect", "--run", str(trained_run), "--samples", "3", "--out", str(out), "--raw"]) == 0
    assert len(list(out.glob("sample3_subset*.pgm"))) == 6
    assert len(list(out.glob("sample3_branch*.pgm"))) == 3
    assert (out / "sample3_full.pgm").is_file()
    side = json.loads((out / "sample3.json").read_text())
    assert set(side) >= {"prediction", "ground_truth", "subsets"} and len(side["subsets"]) == 6
    raw = np.load(out / "sample3_raw.npz")
    assert raw["full_prob"].sum() == pytest.approx(1.0)


def test_introspect_bad_sample(trained_run, capsys):
    assert main(["introspect", "--run", str(trained_run), "--samples", "999"]) == 2
    assert "valid ids are 0..47" in capsys.readouterr().err


def test_config_file_precedence(tiny_dataset, tmp_path):
    cfg = tiny_config(tiny_dataset, nu=5.0, steps=2)
    cfg.max_folds = 1
    cfg.save(tmp_path / "c.json")
    out = tmp_path / "run"
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(out), "--nu", "0.5"]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["nu"] == 0.5 and saved["schedule"]["total_steps"] == 2
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_no_comb_flag(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(tiny_dataset), "--out", str(out), "--max-folds", "1", "--no-comb", *TINY]) == 0
    assert json.loads((out / "config.json").read_text())["nu"] == 0.0


def test_sweep_requires_values(tiny_dataset, tmp_path):
    assert main(["sweep", "--dataset", str(tiny_dataset), "--out", str(tmp_path), "--nu", ""]) == 2
    assert main(["sweep", "--dataset", str(tiny_dataset), "--out", str(tmp_path), "--nu", "a,b"]) == 2


def test_sweep_loss_ablation(tiny_dataset, tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--dataset", str(tiny_dataset), "--out", str(out), "--max-folds", "1",
                 "--loss-ablation", "--seeds", "2", *TINY]) == 0
    rows = json.loads((out / "sweep.json").read_text())
    assert [r["label"] for r in rows] == ["without L_comb", "with L_comb"]
    assert rows[0]["subset_lambda_max_change"] == 0.0 and len(rows[0]["errors"]) == 2
    assert "±" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--op", "dense,relu", "--seeds", "2"]) == 0
    assert capsys.readouterr().out.count("PASS") == 2
    assert main(["gradcheck", "--op", "dense", "--seeds", "1", "--inject-fault"]) == 1
    assert main(["gradcheck", "--op", "nope"]) == 2


def test_argparse_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_eval_rerun_is_byte_identical(trained_run):
    assert main(["eval", "--run", str(trained_run)]) == 0
    first = (trained_run / "report.json").read_bytes()
    assert main(["eval", "--run", str(trained_run)]) == 0
    assert (trained_run / "report.json").read_bytes() == first


def test_sidecar_matches_eval_predictions(trained_run, tmp_path):
    from deesco.metrics import predict
    from deesco.runner import load_run_models

    out = tmp_path / "maps"
    assert main(["introspect", "--run", str(trained_run), "--fold", "1", "--samples", "2,40", "--out", str(out)]) == 0
    _, ds, _, models = load_run_models(trained_run)
    full, _ = predict(models[1], ds, np.array([2, 40]))
    for k, sid in enumerate((2, 40)):
        side = json.loads((out / f"sample{sid}.json").read_text())
        np.testing.assert_allclose(side["prediction"]["normalized"], full[k], rtol=0, atol=1e-12)
        np.testing.assert_allclose(side["ground_truth"]["target_units"], ds.arrays()["target"][sid])


def test_zero_model_gives_uniform_gray_map(trained_run, tmp_path):
    import shutil

    from deesco import checkpoint

    run = tmp_path / "zero"
    shutil.copytree(trained_run, run)
    ckpt = run / "fold0" / "fold0.ckpt"
    state = checkpoint.load(ckpt)
    checkpoint.save(ckpt, {k: (np.zeros_like(v) if "lambda" in k else v) for k, v in state.items()})
    assert main(["introspect", "--run", str(run), "--samples", "0", "--out", str(tmp_path / "m")]) == 0
    img = read_pgm(tmp_path / "m" / "sample0_full.pgm")
    assert np.all(img == 128)
