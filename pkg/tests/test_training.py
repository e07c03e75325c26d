import dataclasses
import json
import zipfile

import numpy as np
import pytest
import torch

from dctbev.checkpoint import CheckpointError, load_archive, save_archive
from dctbev.losses import FocalConfig, ObjectiveWeights
from dctbev.model import DCTNet
from dctbev.training import (
    ADAM_BETAS, ADAM_EPS, ConfigError, TrainConfig, TrainingDiverged, load_config, load_model, lr_at, train,
)

from conftest import tiny_model_config


def make_cfg(dataset, ckpt_dir, mode="single_class", **kw):
    n = 2 if mode == "single_class" else 3
    base = dict(dataset=str(dataset), checkpoint_dir=str(ckpt_dir), mode=mode, batch_size=2, lr=1e-3,
                epochs=3, decay_epoch=2, seed=0, model=tiny_model_config(n), focal=FocalConfig(2.0, n))
    base.update(kw)
    return TrainConfig(**base)


def reference_cfg(decay_epoch):
    return TrainConfig(dataset="d", checkpoint_dir="c", lr=1e-4, epochs=120, decay_epoch=decay_epoch,
                       decay_factor=0.1)


def test_lr_schedule_reference_regimes():
    single, multi = reference_cfg(50), reference_cfg(100)
    assert lr_at(49, single) == 1e-4 and lr_at(50, single) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(99, multi) == 1e-4 and lr_at(100, multi) == pytest.approx(1e-5, rel=1e-12)
    # exactly one decay
    values = [lr_at(e, single) for e in range(120)]
    assert len(set(values)) == 2 and values == sorted(values, reverse=True)
    const = dataclasses.replace(single, decay_factor=1.0)
    assert {lr_at(e, const) for e in range(120)} == {1e-4}
    with pytest.raises(ValueError):
        lr_at(120, single)
    with pytest.raises(ValueError):
        lr_at(-1, single)


def test_config_invariants():
    with pytest.raises(ConfigError, match="decay_epoch"):
        TrainConfig(dataset="d", checkpoint_dir="c", epochs=10, decay_epoch=10)
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(dataset="d", checkpoint_dir="c", batch_size=0)
    with pytest.raises(ConfigError, match="n_classes"):
        TrainConfig(dataset="d", checkpoint_dir="c", mode="multi_class")
    assert ADAM_BETAS == (0.9, 0.999) and ADAM_EPS == 1e-8
    default = TrainConfig(dataset="d", checkpoint_dir="c")
    assert (default.epochs, default.decay_epoch, default.batch_size) == (30, 15, 4)
    assert default.weight_decay == 0.0 and default.grad_clip is None


def test_config_from_dict_diagnostics():
    ok = {"dataset": "d", "checkpoint_dir": "c", "mode": "multi_class",
          "model": {"n_classes": 3}, "focal": {"n_classes": 3}}
    cfg = TrainConfig.from_dict(ok)
    assert cfg.model.n_classes == 3 and cfg.class_set == ("background", "road", "vehicle")
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig.from_dict({**ok, "lr": "fast"})
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_dict({**ok, "learning_rate": 1e-3})
    with pytest.raises(ConfigError, match="model.depth"):
        TrainConfig.from_dict({**ok, "model": {"depth": 3}})
    with pytest.raises(ConfigError, match="dataset"):
        TrainConfig.from_dict({"checkpoint_dir": "c"})


def test_load_config_json_and_toml(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"dataset": "d", "checkpoint_dir": "c", "lr": 0.01}))
    assert load_config(tmp_path / "c.json").lr == 0.01
    (tmp_path / "c.toml").write_text('dataset = "d"\ncheckpoint_dir = "c"\nepochs = 4\ndecay_epoch = 2\n'
                                     '[weights]\nlambda1 = 5.0\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.epochs == 4 and cfg.weights.lambda1 == 5.0
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_training_deterministic(tiny_dataset, tmp_path):
    a = train(make_cfg(tiny_dataset, tmp_path / "a", epochs=2, decay_epoch=1))
    b = train(make_cfg(tiny_dataset, tmp_path / "b", epochs=2, decay_epoch=1))
    assert a.history[0] == b.history[0]
    assert a.history == b.history
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == a.history
    assert list(a.history[0]) == ["step", "focal_main", "focal_aux", "l_fw", "l_bw", "l_dual", "total"]


def test_zero_weights_leave_parameters(tiny_dataset, tmp_path):
    cfg = make_cfg(tiny_dataset, tmp_path, epochs=1, decay_epoch=0, weights=ObjectiveWeights(0.0, 0.0))
    torch.manual_seed(cfg.seed)
    before = {k: v.clone() for k, v in DCTNet(cfg.model).named_parameters()}
    train(cfg)
    model, _ = load_model(tmp_path / "last.ckpt")
    for name, p in model.named_parameters():
        assert torch.equal(p, before[name]), name


def test_resume_reproduces_unbroken_trace(tiny_dataset, tmp_path):
    full = train(make_cfg(tiny_dataset, tmp_path / "full", epochs=4, decay_epoch=2))
    part_cfg = make_cfg(tiny_dataset, tmp_path / "part", epochs=4, decay_epoch=2)
    first = train(make_cfg(tiny_dataset, tmp_path / "part", epochs=4, decay_epoch=2, max_steps=4))
    assert first.state.epoch == 2
    rest = train(part_cfg, resume_from=tmp_path / "part" / "last.ckpt")
    trace = first.history + rest.history
    assert [r["step"] for r in trace] == [r["step"] for r in full.history]
    for got, ref in zip(trace, full.history):
        for key in ("focal_main", "focal_aux", "l_fw", "l_bw", "total"):
            assert abs(got[key] - ref[key]) <= 1e-6 * max(abs(ref[key]), 1e-12), (got["step"], key)
    assert rest.state.epoch == 4 and rest.state.current_lr == pytest.approx(1e-4)


def test_resume_rejects_wrong_classes(tiny_dataset, tmp_path):
    train(make_cfg(tiny_dataset, tmp_path / "s", epochs=1, decay_epoch=0))
    multi = make_cfg(tiny_dataset, tmp_path / "m", mode="multi_class", epochs=1, decay_epoch=0)
    with pytest.raises(CheckpointError):
        train(multi, resume_from=tmp_path / "s" / "last.ckpt")


def test_best_and_last_differ(tiny_dataset, tmp_path):
    # a learning rate this small leaves validation flat, so only epoch 1 improves
    res = train(make_cfg(tiny_dataset, tmp_path, epochs=3, decay_epoch=2, lr=1e-30))
    best, _ = load_archive(res.best_checkpoint)
    last, _ = load_archive(res.last_checkpoint)
    assert best["epoch"] == 1 and last["epoch"] == 3
    assert len(res.val_reports) == 3
    cfg = make_cfg(tiny_dataset, tmp_path / "again", epochs=3, decay_epoch=2, lr=1e-30)
    from dctbev.training import _optimizer, resume
    model = DCTNet(cfg.model)
    assert resume(res.best_checkpoint, cfg, model, _optimizer(model, cfg)).epoch == 1
    assert resume(res.last_checkpoint, cfg, model, _optimizer(model, cfg)).epoch == 3


def test_checkpoint_bit_exact(tmp_path):
    torch.manual_seed(0)
    model = DCTNet(tiny_model_config())
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    save_archive(tmp_path / "m.ckpt", tensors, model.cfg.to_dict(), ("background", "foreground"), 2, 7)
    manifest, back = load_archive(tmp_path / "m.ckpt")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v), k
    assert manifest["epoch"] == 2 and manifest["seed"] == 7
    assert [e["name"] for e in manifest["tensors"]] == list(tensors)
    with zipfile.ZipFile(tmp_path / "m.ckpt") as zf:
        assert sorted(zf.namelist()) == ["manifest.json", "tensors.bin"]
        payload = zf.read("tensors.bin")
    first = next(iter(tensors.values())).numpy().ravel()
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4", count=first.size), first)


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "junk.ckpt")
    save_archive(tmp_path / "t.ckpt", {"a": torch.ones(3)}, {}, ("background", "foreground"), 0, 0)
    with zipfile.ZipFile(tmp_path / "t.ckpt") as zf:
        manifest = json.loads(zf.read("manifest.json"))
    manifest["tensors"][0]["shape"] = [4]
    with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("tensors.bin", np.ones(3, "<f4").tobytes())
    with pytest.raises(CheckpointError, match="truncated"):
        load_archive(tmp_path / "bad.ckpt")


def test_load_model_rejects_shape_mismatch(tmp_path):
    model = DCTNet(tiny_model_config())
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    wrong = tiny_model_config(3).to_dict()
    save_archive(tmp_path / "w.ckpt", tensors, wrong, ("background", "road", "vehicle"), 0, 0)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_model(tmp_path / "w.ckpt")


def test_nan_aborts_with_dump(tiny_dataset, tmp_path):
    # a float32 overflow of the weighted total stands in for a diverging run
    cfg = make_cfg(tiny_dataset, tmp_path, epochs=1, decay_epoch=0, weights=ObjectiveWeights(1e39, 0.0))
    with pytest.raises(TrainingDiverged) as info:
        train(cfg)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and "lr" in dump and "focal_main" in dump
    assert info.value.diagnostic["step"] == 0


def test_max_steps_and_save_every(tiny_dataset, tmp_path):
    res = train(make_cfg(tiny_dataset, tmp_path, epochs=3, decay_epoch=2, max_steps=3, save_every=10))
    assert res.state.global_step == 3 and len(res.history) == 3
    assert load_archive(res.last_checkpoint)[0]["epoch"] == 2
