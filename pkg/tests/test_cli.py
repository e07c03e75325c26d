import argparse
import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dctbev.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, OUTPUT_ROOT_ENV, cmd_gradcheck, main
from dctbev.data import load_class_png
from dctbev.losses import focal_loss
from dctbev.metrics import MetricsReport

from conftest import tiny_model_config


def write_config(path, dataset, ckpt, mode="single_class", **kw):
    n = 2 if mode == "single_class" else 3
    doc = {"dataset": str(dataset), "checkpoint_dir": str(ckpt), "mode": mode, "batch_size": 2, "lr": 1e-3,
           "epochs": 2, "decay_epoch": 1, "model": tiny_model_config(n).__dict__, "focal": {"n_classes": n}}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "cfg.json", tiny_dataset, root / "ckpt")
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return root / "ckpt"


def test_help_and_usage_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dctbev", "synth", "--n", "2"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "--out" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "dctbev", "eval", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--checkpoint" in proc.stdout
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "4", "--seed", "0", "--out", str(tmp_path / name),
                     "--image-size", "32", "--grid-size", "16"]) == EXIT_OK
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("images", "layouts", "scenes"):
        files = os.listdir(tmp_path / "a" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, files, shallow=False)
        assert not mismatch and not errors


def test_synth_validation(tmp_path, capsys):
    assert main(["synth", "--n", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--n" in capsys.readouterr().err
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--n", "1", "--out", str(blocker), "--image-size", "32", "--grid-size", "16"]) \
        == EXIT_RUNTIME


def test_train_outputs(trained):
    for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "loss_curve.png"):
        assert (trained / name).is_file()


def test_train_config_errors(tiny_dataset, tmp_path, capsys):
    bad = write_config(tmp_path / "bad.json", tiny_dataset, tmp_path / "c", batch_size="four")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert "batch_size" in capsys.readouterr().err
    mismatch = write_config(tmp_path / "mm.json", tiny_dataset, tmp_path / "c", mode="multi_class",
                            model=tiny_model_config(2).__dict__)
    assert main(["train", "--config", str(mismatch)]) == EXIT_USAGE
    assert "n_classes" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "broken.json")]) == EXIT_USAGE


def test_eval_report(trained, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_dataset),
                 "--split", "val", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    rep = MetricsReport.from_json(out.read_text())
    assert rep.class_set == ("background", "foreground") and rep.n_samples == 2
    assert f"{100 * rep.iou['foreground']:.2f}" in printed and f"{100 * rep.map:.2f}" in printed


def test_eval_gt_as_prediction(trained, tiny_dataset, tmp_path):
    out = tmp_path / "gt.json"
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_dataset),
                 "--split", "all", "--gt-as-prediction", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["miou"] == 1.0
    assert main(["eval", "--data", str(tiny_dataset), "--mode", "multi_class", "--gt-as-prediction",
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["miou"] == 1.0
    assert main(["eval", "--data", str(tiny_dataset)]) == EXIT_USAGE


def test_eval_class_set_mismatch(trained, tiny_dataset, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_dataset),
                 "--mode", "multi_class", "--out", str(tmp_path / "x.json")]) == EXIT_RUNTIME


def test_eval_default_output_root(trained, tiny_dataset, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_dataset)]) == EXIT_OK
    assert (tmp_path / "root" / "eval_val.json").is_file()


def test_predict_outputs(trained, tiny_dataset, tmp_path):
    images = tiny_dataset / "images"
    ckpt = str(trained / "best.ckpt")
    assert main(["predict", "--checkpoint", ckpt, "--image", str(images / "0000.png"),
                 "--out", str(tmp_path / "one")]) == EXIT_OK
    pred = load_class_png(tmp_path / "one" / "0000_pred.png")
    assert pred.shape == (32, 32) and set(np.unique(pred)) <= {0, 1}
    for name in ("0000_prob_background.png", "0000_prob_foreground.png", "0000_composite.png"):
        assert (tmp_path / "one" / name).is_file()
    assert main(["predict", "--checkpoint", ckpt, "--image", str(images / "0000.png"),
                 "--out", str(tmp_path / "two")]) == EXIT_OK
    for name in os.listdir(tmp_path / "one"):
        if not name.endswith("composite.png"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    assert main(["predict", "--checkpoint", ckpt, "--image", str(images), "--out", str(tmp_path / "dir")]) \
        == EXIT_OK
    assert len(list((tmp_path / "dir").glob("*_pred.png"))) == len(list(images.glob("*.png")))


def test_predict_errors(trained, tmp_path):
    from dctbev.data import save_image_png
    from dctbev.geometry import FrontViewImage

    save_image_png(FrontViewImage(np.zeros((16, 16, 3), np.float32)), tmp_path / "small.png")
    ckpt = str(trained / "best.ckpt")
    assert main(["predict", "--checkpoint", ckpt, "--image", str(tmp_path / "small.png"),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["predict", "--checkpoint", ckpt, "--image", str(tmp_path / "nope.png"),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["predict", "--checkpoint", str(tmp_path / "small.png"), "--image", str(tmp_path / "small.png"),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("focal_oracle", "focal_gamma0_equals_ce", "focal_grad_closed_form_vs_fd",
                 "dual_cycle_identity_zero", "dual_cycle_toy_values", "attention_rows_sum_to_one"):
        assert name in out


def test_gradcheck_catches_sign_bug(capsys):
    def flipped(*args, **kwargs):
        return -focal_loss(*args, **kwargs)

    result = cmd_gradcheck(argparse.Namespace(), focal_fn=flipped)
    assert result.exit_code != EXIT_OK
    assert "FAIL" in capsys.readouterr().out
