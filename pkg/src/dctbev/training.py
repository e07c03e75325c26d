"""Training harness: config, step-decay schedule, Adam loop, checkpoints,
resume and per-epoch validation."""
from __future__ import annotations

import base64
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch

from .checkpoint import CheckpointError, load_archive, load_into_module, save_archive
from .data import MULTI_CLASS, SINGLE_CLASS, TARGET_CLASSES, LayoutDataset
from .geometry import MULTI_CLASS_SET, SINGLE_CLASS_SET
from .losses import FocalConfig, LossBreakdown, ObjectiveWeights, compute_losses
from .metrics import MetricsReport, evaluate
from .model import DCTNet, ModelConfig

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid training configuration. ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingDiverged(RuntimeError):
    def __init__(self, diagnostic: dict):
        super().__init__(f"non-finite loss at step {diagnostic['step']}: {diagnostic}")
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    dataset: str
    checkpoint_dir: str
    mode: str = SINGLE_CLASS
    target_class: Optional[str] = "vehicle"
    batch_size: int = 4
    lr: float = 1e-4
    epochs: int = 30
    decay_epoch: int = 15
    decay_factor: float = 0.1
    seed: int = 0
    val_every: int = 1
    save_every: int = 1
    train_split: str = "train"
    val_split: str = "val"
    max_steps: Optional[int] = None
    cycle_reduction: str = "sum"
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    focal: FocalConfig = field(default_factory=FocalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in (SINGLE_CLASS, MULTI_CLASS):
            raise ConfigError("mode", f"must be {SINGLE_CLASS!r} or {MULTI_CLASS!r}, got {self.mode!r}")
        if self.mode == SINGLE_CLASS and self.target_class not in TARGET_CLASSES:
            raise ConfigError("target_class", f"must be one of {sorted(TARGET_CLASSES)}")
        expected = 2 if self.mode == SINGLE_CLASS else 3
        if self.model.n_classes != expected:
            raise ConfigError("model.n_classes",
                              f"mode {self.mode} needs {expected} classes, got {self.model.n_classes}")
        if self.focal.n_classes != expected:
            raise ConfigError("focal.n_classes",
                              f"mode {self.mode} needs {expected} classes, got {self.focal.n_classes}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not 0 <= self.decay_epoch < self.epochs:
            raise ConfigError("decay_epoch", f"must satisfy 0 <= decay_epoch < epochs ({self.epochs})")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor", "must be > 0")
        if self.val_every < 1:
            raise ConfigError("val_every", "must be >= 1")
        if self.save_every < 1:
            raise ConfigError("save_every", "must be >= 1")
        if self.cycle_reduction not in ("sum", "mean"):
            raise ConfigError("cycle_reduction", "must be 'sum' or 'mean'")

    @property
    def class_set(self) -> tuple[str, ...]:
        return SINGLE_CLASS_SET if self.mode == SINGLE_CLASS else MULTI_CLASS_SET

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a mapping")
        nested = {"weights": ObjectiveWeights, "focal": FocalConfig, "model": ModelConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(key, "unknown field")
            if key in nested:
                kwargs[key] = _build_nested(key, nested[key], value)
            else:
                kwargs[key] = value
        for f in dataclasses.fields(cls):
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING \
                    and f.name not in kwargs:
                raise ConfigError(f.name, "required field missing")
        _check_types(cls, kwargs)
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("<root>", str(exc)) from exc


def _check_types(cls, kwargs, prefix=""):
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for key, value in kwargs.items():
        hint = str(hints.get(key, ""))
        name = prefix + key
        if value is None:
            if "Optional" not in hint:
                raise ConfigError(name, "must not be null")
            continue
        if hint.startswith(("int", "Optional[int]")) and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        if hint.startswith(("float", "Optional[float]")) and (
                not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        if hint.startswith(("str", "Optional[str]")) and not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")


def _build_nested(key, klass, value):
    if not isinstance(value, dict):
        raise ConfigError(key, "must be a mapping")
    known = {f.name for f in dataclasses.fields(klass)}
    for sub in value:
        if sub not in known:
            raise ConfigError(f"{key}.{sub}", "unknown field")
    _check_types(klass, value, prefix=f"{key}.")
    try:
        return klass(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from exc


def load_config(path) -> TrainConfig:
    """Read a JSON or TOML training config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            import tomli
            doc = tomli.loads(text)
        else:
            doc = json.loads(text)
    except Exception as exc:  # parse errors from either backend
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc
    return TrainConfig.from_dict(doc)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule with exactly one decay at ``decay_epoch``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.decay_factor if epoch >= cfg.decay_epoch else cfg.lr


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    current_lr: float = 0.0
    best_val_miou: float = -1.0
    best_epoch: int = -1
    rng_state: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    state: TrainState
    last_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    history: list[dict]
    val_reports: list[dict]


def _optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                            weight_decay=cfg.weight_decay)


def _encode_rng() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def _decode_rng(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def save_checkpoint(path, model: DCTNet, optimizer, state: TrainState, cfg: TrainConfig) -> Path:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    steps = {}
    for i, p in enumerate(model.parameters()):
        st = optimizer.state.get(p)
        if not st:
            continue
        tensors[f"optim/{i}/exp_avg"] = st["exp_avg"]
        tensors[f"optim/{i}/exp_avg_sq"] = st["exp_avg_sq"]
        steps[str(i)] = float(st["step"])
    state.rng_state = _encode_rng()
    extra = {
        "train_state": state.to_dict(),
        "optimizer": {"steps": steps, "lr": optimizer.param_groups[0]["lr"]},
        "train_config": cfg.to_dict(),
    }
    return save_archive(path, tensors, cfg.model.to_dict(), cfg.class_set, state.epoch, cfg.seed, extra)


def load_model(path) -> tuple[DCTNet, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, manifest)``."""
    manifest, tensors = load_archive(path)
    try:
        cfg = ModelConfig(**manifest["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model_config: {exc}") from exc
    model = DCTNet(cfg)
    load_into_module(model, tensors)
    model.eval()
    return model, manifest


def resume(checkpoint, cfg: TrainConfig, model: DCTNet, optimizer) -> TrainState:
    """Restore parameters, optimizer moments, RNG and counters in place."""
    manifest, tensors = load_archive(checkpoint)
    if manifest["model_config"] != cfg.model.to_dict():
        raise CheckpointError(
            f"checkpoint model config {manifest['model_config']} differs from {cfg.model.to_dict()}"
        )
    if tuple(manifest["class_set"]) != cfg.class_set:
        raise CheckpointError(f"checkpoint class_set {manifest['class_set']} differs from {list(cfg.class_set)}")
    load_into_module(model, tensors)
    extra = manifest.get("extra", {})
    params = list(model.parameters())
    opt_state = {}
    for key, step in extra.get("optimizer", {}).get("steps", {}).items():
        i = int(key)
        opt_state[i] = {
            "step": torch.tensor(step),
            "exp_avg": tensors[f"optim/{i}/exp_avg"].to(params[i].dtype),
            "exp_avg_sq": tensors[f"optim/{i}/exp_avg_sq"].to(params[i].dtype),
        }
    sd = optimizer.state_dict()
    sd["state"] = opt_state
    optimizer.load_state_dict(sd)
    state = TrainState(**extra["train_state"])
    if state.rng_state:
        torch.set_rng_state(_decode_rng(state.rng_state))
    return state


def _params_finite(model) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def train(cfg: TrainConfig, resume_from=None, on_step: Optional[Callable[[int, LossBreakdown], None]] = None,
          train_data: Optional[LayoutDataset] = None, val_data: Optional[LayoutDataset] = None) -> TrainResult:
    """Run (or continue) training; writes ``last.ckpt``, ``best.ckpt`` and a
    JSON-lines step log under ``cfg.checkpoint_dir``."""
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    hw = cfg.model.input_hw
    if train_data is None:
        train_data = LayoutDataset.load(cfg.dataset, cfg.train_split, cfg.mode, cfg.target_class, hw)
    if val_data is None:
        try:
            val_data = LayoutDataset.load(cfg.dataset, cfg.val_split, cfg.mode, cfg.target_class, hw)
        except ValueError:
            logger.warning("split %r is empty; validation disabled", cfg.val_split)

    model = DCTNet(cfg.model)
    optimizer = _optimizer(model, cfg)
    state = TrainState(current_lr=lr_at(0, cfg))
    log_path = ckpt_dir / "train_log.jsonl"
    val_log_path = ckpt_dir / "val_log.jsonl"
    last_path, best_path = ckpt_dir / "last.ckpt", ckpt_dir / "best.ckpt"
    if resume_from is not None:
        state = resume(resume_from, cfg, model, optimizer)
    else:
        log_path.write_text("")
        val_log_path.write_text("")

    history: list[dict] = []
    val_reports: list[dict] = []
    n = len(train_data)
    done = False
    with open(log_path, "a") as log:
        for epoch in range(state.epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            state.current_lr = lr
            model.train()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                images, layouts, ids = (torch.from_numpy(a) for a in train_data.batch(idx))
                out = model.forward_train(images, layouts)
                breakdown = compute_losses(out, ids, cfg.focal, cfg.weights, cfg.cycle_reduction)
                if not breakdown.is_finite():
                    diagnostic = {"step": state.global_step, "epoch": epoch, "lr": lr, **breakdown.as_floats()}
                    (ckpt_dir / "nan_dump.json").write_text(json.dumps(diagnostic, indent=2))
                    raise TrainingDiverged(diagnostic)
                optimizer.zero_grad(set_to_none=False)
                if breakdown.total.requires_grad:
                    breakdown.total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                if not _params_finite(model):
                    diagnostic = {"step": state.global_step, "epoch": epoch, "lr": lr,
                                  "error": "non-finite parameter", **breakdown.as_floats()}
                    (ckpt_dir / "nan_dump.json").write_text(json.dumps(diagnostic, indent=2))
                    raise TrainingDiverged(diagnostic)
                record = {"step": state.global_step, **breakdown.as_floats()}
                log.write(json.dumps(record) + "\n")
                history.append(record)
                if on_step is not None:
                    on_step(state.global_step, breakdown)
                state.global_step += 1
                if cfg.max_steps is not None and state.global_step >= cfg.max_steps:
                    done = True
                    break
            log.flush()
            state.epoch = epoch + 1
            if val_data is not None and (state.epoch % cfg.val_every == 0):
                report = evaluate(model, val_data, cfg.class_set)
                rec = {"epoch": state.epoch, "step": state.global_step, "miou": report.miou, "map": report.map,
                       "iou": report.iou, "ap": report.ap}
                val_reports.append(rec)
                with open(val_log_path, "a") as vl:
                    vl.write(json.dumps(rec) + "\n")
                if report.miou > state.best_val_miou:
                    state.best_val_miou = report.miou
                    state.best_epoch = state.epoch
                    save_checkpoint(best_path, model, optimizer, state, cfg)
            if done or state.epoch % cfg.save_every == 0 or state.epoch == cfg.epochs:
                save_checkpoint(last_path, model, optimizer, state, cfg)
            if done:
                break
    if not best_path.exists():
        save_checkpoint(best_path, model, optimizer, state, cfg)
    return TrainResult(state, last_path, best_path, log_path, history, val_reports)
