import csv
import shutil

import numpy as np
import pytest

from ctnet import cli
from ctnet.checkpoint import load_checkpoint
from ctnet.metrics import classification_report, confusion_matrix
from ctnet.synthetic import write_metadata_fixture, write_texture_tree
from ctnet.train import read_log

TRAIN_FLAGS = ["--image-size", "64", "--batch-size", "8", "--seed", "3", "--prefetch", "0"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows_without_seconds(path):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in read_log(path)]


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    return write_texture_tree(tmp_path_factory.mktemp("cli") / "data", {"train": 8, "valid": 4, "test": 4}, 64, 2)


@pytest.fixture(scope="module")
def memorized(tree, tmp_path_factory):
    """A run that fits the training split exactly (constant lr, fast-moving BN statistics)."""
    run_dir = tmp_path_factory.mktemp("mem") / "run"
    rc = run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 20, "--bn-momentum", 0.5,
             "--clr", "false", "--lr", 1e-3, *TRAIN_FLAGS)
    assert rc == 0
    return run_dir / "last.ckpt"


# --- preprocess / stats -----------------------------------------------------------


def test_preprocess_tree(tmp_path, capsys):
    meta, images = write_metadata_fixture(tmp_path / "raw", size=64)
    out = tmp_path / "out"
    assert run("preprocess", "--metadata", meta, "--images", images, "--out", out, "--size", 32) == 0
    pngs = sorted(out.rglob("*.png"))
    assert len(pngs) == 9
    assert {p.parent.parent.name for p in pngs} == {"train", "valid", "test"}
    assert "rejected: 0" in capsys.readouterr().out
    assert (out / "rejections.csv").read_text().strip() == "row,reason"


def test_preprocess_bad_row(tmp_path):
    meta, images = write_metadata_fixture(tmp_path / "raw", size=64, bad_rows=1)
    out = tmp_path / "out"
    assert run("preprocess", "--metadata", meta, "--images", images, "--out", out, "--size", 32) == 0
    assert len(list(out.rglob("*.png"))) == 8
    with open(out / "rejections.csv") as f:
        rejected = list(csv.DictReader(f))
    assert len(rejected) == 1 and rejected[0]["row"] == "10"


def test_preprocess_missing_images_dir(tmp_path):
    meta, _ = write_metadata_fixture(tmp_path / "raw", size=64)
    assert run("preprocess", "--metadata", meta, "--images", tmp_path / "nope", "--out", tmp_path / "o") == 2


def test_stats(tmp_path, capsys):
    meta, _ = write_metadata_fixture(tmp_path / "raw", size=64)
    assert run("stats", "--metadata", meta, "--out", tmp_path / "s.csv") == 0
    text = capsys.readouterr().out
    with open(tmp_path / "s.csv") as f:
        cls = [r for r in csv.DictReader(f) if r["table"] == "class"]
    assert [round(float(r["percent"]), 1) for r in cls] == [33.3, 33.3, 33.3]
    assert "33.3" in text


# --- train ------------------------------------------------------------------------


def test_one_epoch_writes_log_and_checkpoints(tree, tmp_path):
    run_dir = tmp_path / "r"
    assert run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 1, *TRAIN_FLAGS) == 0
    assert len(read_log(run_dir / "log.csv")) == 1
    assert sorted(p.name for p in run_dir.glob("*.ckpt")) == ["best.ckpt", "last.ckpt"]
    assert "seed = 3" in (run_dir / "config.snapshot").read_text()


def test_same_seed_same_log(tree, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data", tree, "--run-dir", tmp_path / name, "--epochs", 2, *TRAIN_FLAGS) == 0
    assert rows_without_seconds(tmp_path / "a" / "log.csv") == rows_without_seconds(tmp_path / "b" / "log.csv")


def test_resume_continues_epoch_and_step_counter(tree, tmp_path):
    run_dir = tmp_path / "r"
    assert run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 3, *TRAIN_FLAGS) == 0
    steps_before = load_checkpoint(run_dir / "last.ckpt").optimizer.iterations
    assert steps_before == 3 * 3  # 24 images in batches of 8
    flags = [f if f != "8" else "6" for f in TRAIN_FLAGS]  # batch size 8 -> 6
    rc = run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 5, "--resume", run_dir / "last.ckpt", *flags)
    assert rc == 0
    log = read_log(run_dir / "log.csv")
    assert [r["epoch"] for r in log] == ["1", "2", "3", "4", "5"]
    ck = load_checkpoint(run_dir / "last.ckpt")
    assert ck.epoch == 5 and ck.optimizer.iterations == steps_before + 2 * 4


def test_existing_run_needs_resume(tree, tmp_path):
    run_dir = tmp_path / "r"
    assert run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 1, *TRAIN_FLAGS) == 0
    assert run("train", "--data", tree, "--run-dir", run_dir, "--epochs", 1, *TRAIN_FLAGS) == 1


def test_config_file_and_errors_write_nothing(tree, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data_dir = {tree}\nrun_dir = {tmp_path / 'r'}\nepochs = 1\nimage_size = 100  # not a multiple of 64\n")
    assert run("train", "--config", cfg) == 1
    assert "image_size" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()
    cfg.write_text(f"data_dir = {tree}\nrun_dir = {tmp_path / 'r'}\nepochs = 1\nlearning_rate = 0.1\n")
    assert run("train", "--config", cfg) == 1
    assert not (tmp_path / "r").exists()
    assert run("train", "--data", tmp_path / "missing", "--run-dir", tmp_path / "r", "--epochs", 1, *TRAIN_FLAGS) == 2
    assert not (tmp_path / "r").exists()


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as e:
        cli.main(["eval"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 1


def test_internal_error_exit_three(tmp_path, monkeypatch, capsys):
    meta, _ = write_metadata_fixture(tmp_path / "raw", size=64)

    def boom(records):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli.dp, "dataset_stats", boom)
    assert run("stats", "--metadata", meta) == 3
    assert "internal error" in capsys.readouterr().err


# --- eval / interpretation -----------------------------------------------------


def test_eval_memorized_split(memorized, tree, tmp_path):
    out = tmp_path / "ev"
    assert run("eval", "--checkpoint", memorized, "--data", tree, "--split", "train", "--out", out) == 0
    with open(out / "report.csv") as f:
        rows = list(csv.reader(f))
    assert [r[0] for r in rows[1:]] == ["Normal", "Pneumonia", "COVID-19", "accuracy", "macro avg", "weighted avg"]
    with open(out / "predictions.csv") as f:
        preds = list(csv.DictReader(f))
    t = np.array([int(r["true"]) for r in preds])
    p = np.array([int(r["predicted"]) for r in preds])
    rep = classification_report(confusion_matrix(t, p))
    assert rep.accuracy == 1.0 and rep.kappa == 1.0
    assert float(rows[4][2]) == rep.accuracy
    for name in ("confusion.csv", "confusion_normalized.csv", "report.txt"):
        assert (out / name).exists()


def test_eval_metrics_match_predictions(memorized, tree, tmp_path):
    out = tmp_path / "ev"
    assert run("eval", "--checkpoint", memorized, "--data", tree, "--split", "valid", "--out", out) == 0
    with open(out / "predictions.csv") as f:
        preds = list(csv.DictReader(f))
    cm = confusion_matrix([int(r["true"]) for r in preds], [int(r["predicted"]) for r in preds])
    with open(out / "confusion.csv") as f:
        written = [[int(v) for v in row[1:]] for row in list(csv.reader(f))[1:]]
    assert written == cm.counts.tolist()
    assert f"{classification_report(cm).kappa:.4f}" in (out / "report.txt").read_text()


def test_eval_class_count_mismatch(memorized, tree, tmp_path):
    data = tmp_path / "two"
    shutil.copytree(tree / "test", data / "test")
    shutil.rmtree(data / "test" / "COVID-19")
    assert run("eval", "--checkpoint", memorized, "--data", data, "--out", tmp_path / "ev") == 2


def test_gradcam_and_activations(memorized, tree, tmp_path):
    image = sorted((tree / "test" / "COVID-19").glob("*.png"))[0]
    out = tmp_path / "cam"
    assert run("gradcam", "--checkpoint", memorized, "--image", image, "--out", out, "--class", 2) == 0
    assert len(list(out.glob("*.png"))) == 1 and len(list(out.glob("*.csv"))) == 1
    with open(next(out.glob("*.csv"))) as f:
        heat = np.array([[float(v) for v in row] for row in csv.reader(f)])
    assert heat.shape == (64, 64) and heat.min() >= 0 and heat.max() <= 1
    assert run("gradcam", "--checkpoint", memorized, "--image", image, "--out", out, "--class", 7) == 1
    acts = tmp_path / "acts"
    assert run("activations", "--checkpoint", memorized, "--image", image, "--out", acts, "--layer", 1) == 0
    assert len(list(acts.glob("*.png"))) == 1
    assert run("activations", "--checkpoint", memorized, "--image", image, "--out", acts, "--layer", 0) == 1


def test_lr_range(tree, tmp_path):
    out = tmp_path / "lr.csv"
    assert run("lr-range", "--data", tree, "--out", out, "--steps", 3, "--batch-size", 8,
               "--image-size", 64, "--low", 1e-5, "--high", 1e-2, "--prefetch", 0) == 0
    with open(out) as f:
        lrs = [float(r["lr"]) for r in csv.DictReader(f)]
    assert len(lrs) == 3 and lrs[0] == pytest.approx(1e-5) and all(b > a for a, b in zip(lrs, lrs[1:]))
