"""Run configuration, the training loop and split evaluation."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchStream, scan_tree
from .errors import ConfigError, DataError
from .layers import per_sample_losses
from .metrics import classification_report, confusion_matrix
from .network import Network, build_network, reference_spec
from .optim import ClrSchedule, PlateauPolicy, PlateauTracker, clr_lr, make_optimizer
from .tensor import SeededRng

LOG_HEADER = ("epoch", "lr", "train_loss", "train_acc", "train_kappa", "val_loss", "val_acc", "val_kappa", "seconds")


@dataclass
class RunConfig:
    data_dir: str = ""
    run_dir: str = ""
    epochs: int = 0
    image_size: int = 128
    batch_size: int = 128
    seed: int = 1234
    optimizer: str = "adabelief"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-14
    weight_decay: float = 0.0
    activation: str = "mish"
    dropout: float = 0.3
    bn_momentum: float = 0.99
    clr: bool = True
    clr_min: float = 1e-4
    clr_max: float = 1e-3
    clr_step_size: int = 0  # 0: two epochs' worth of batches per half-cycle
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_floor: float = 1e-6
    prefetch: int = 2
    cache_images: bool = False
    resume: str = ""

    def validate(self) -> "RunConfig":
        def need(cond, name, what):
            if not cond:
                raise ConfigError(f"{name}: {what}, got {getattr(self, name)!r}")

        need(bool(self.data_dir), "data_dir", "required")
        need(bool(self.run_dir), "run_dir", "required")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.image_size >= 64 and self.image_size % 64 == 0, "image_size", "must be a positive multiple of 64")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0 <= self.seed < 2**64, "seed", "must fit in 64 unsigned bits")
        need(self.optimizer in ("adabelief", "sgd"), "optimizer", "must be adabelief or sgd")
        need(self.lr > 0, "lr", "must be > 0")
        need(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        need(self.epsilon > 0, "epsilon", "must be > 0")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.activation in ("relu", "gelu", "selu", "mish", "swish", "lisht"), "activation", "unknown activation")
        need(0 <= self.dropout < 1, "dropout", "must be in [0, 1)")
        need(0 < self.bn_momentum < 1, "bn_momentum", "must be in (0, 1)")
        need(0 < self.clr_min < self.clr_max, "clr_min", "need 0 < clr_min < clr_max")
        need(self.clr_step_size >= 0, "clr_step_size", "must be >= 0")
        need(0 < self.plateau_factor < 1, "plateau_factor", "must be in (0, 1)")
        need(self.plateau_patience >= 0, "plateau_patience", "must be >= 0")
        need(self.plateau_floor >= 0, "plateau_floor", "must be >= 0")
        need(self.prefetch >= 0, "prefetch", "must be >= 0")
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, known[name].type, value)
        return cls(**kwargs)

    def snapshot(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(name: str, typ, value):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {typ}") from None
    return value.strip()


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    labels: np.ndarray
    predictions: np.ndarray
    losses: np.ndarray

    def confusion(self, k: int = 3):
        return confusion_matrix(self.labels, self.predictions, k)

    def report(self, k: int = 3):
        return classification_report(self.confusion(k), self.losses)


def evaluate(net: Network, stream: BatchStream) -> EvalResult:
    net.eval()
    labels, preds, losses = [], [], []
    for x, y in stream.epoch(0):
        logits, _ = net.forward(x)
        labels.append(y)
        preds.append(logits.argmax(axis=1))
        losses.append(per_sample_losses(logits, y))
    return EvalResult(np.concatenate(labels), np.concatenate(preds), np.concatenate(losses))


# --- training -------------------------------------------------------------------------


class Trainer:
    """Owns the network, optimizer, schedules and run directory of one training run."""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        cfg = self.config
        self.run_dir = Path(cfg.run_dir)
        self.train_items = scan_tree(cfg.data_dir, "train")
        self.valid_items = scan_tree(cfg.data_dir, "valid")
        if not self.train_items or not self.valid_items:
            raise DataError(f"{cfg.data_dir}: train and valid splits must contain images")
        self.start_epoch = 0
        self.extra: dict = {}
        if cfg.resume:
            ckpt = load_checkpoint(cfg.resume)
            self.net, self.optimizer, self.start_epoch, self.extra = ckpt
            if self.optimizer is None:
                raise DataError(f"{cfg.resume}: checkpoint carries no optimizer state")
            if tuple(self.net.spec.input_shape[1:]) != (cfg.image_size, cfg.image_size):
                raise ConfigError(
                    f"image_size: checkpoint expects {self.net.spec.input_shape[1]}, config says {cfg.image_size}"
                )
        else:
            if (self.run_dir / "log.csv").exists():
                raise ConfigError(f"run_dir: {self.run_dir} already holds a run; pass resume to continue it")
            spec = reference_spec(cfg.activation, cfg.dropout, cfg.image_size, bn_momentum=cfg.bn_momentum)
            self.net = build_network(spec, SeededRng(cfg.seed), batchnorm_rule=True)
            opt_kwargs = {}
            if cfg.optimizer == "adabelief":
                opt_kwargs = dict(beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon, weight_decay=cfg.weight_decay)
            self.optimizer = make_optimizer(cfg.optimizer, cfg.lr, **opt_kwargs)
        self.policy = PlateauPolicy(cfg.plateau_factor, cfg.plateau_patience, 0.0)
        plateau = self.extra.get("plateau", {})
        self.plateau = PlateauTracker(self.policy, plateau.get("best", float("inf")), plateau.get("wait", 0))
        self.lr_scale = float(self.extra.get("lr_scale", 1.0))
        self.best_val = float(self.extra.get("best_val_loss", float("inf")))
        self.train_stream = BatchStream(
            self.train_items, cfg.batch_size, cfg.seed, cfg.prefetch, cfg.image_size,
            rescale=False, cache=cfg.cache_images,
        )
        self.valid_stream = BatchStream(
            self.valid_items, cfg.batch_size, cfg.seed, cfg.prefetch, cfg.image_size,
            shuffle=False, rescale=False, cache=cfg.cache_images,
        )
        step_size = cfg.clr_step_size or 2 * len(self.train_stream)
        self.schedule = ClrSchedule(cfg.clr_min, cfg.clr_max, step_size) if cfg.clr else None

    def lr_at(self, step: int) -> float:
        base = clr_lr(self.schedule, step) if self.schedule else self.config.lr
        return max(self.config.plateau_floor, base * self.lr_scale)

    def _state(self) -> dict:
        return {
            "plateau": {"best": self.plateau.best, "wait": self.plateau.wait},
            "lr_scale": self.lr_scale,
            "best_val_loss": self.best_val,
        }

    def train_epoch(self, epoch: int) -> tuple[float, float, float, float]:
        net, opt = self.net.train(), self.optimizer
        params = net.params()
        labels, preds = [], []
        total = 0.0
        lr = self.lr_at(opt.iterations)
        for x, y in self.train_stream.epoch(epoch):
            lr = self.lr_at(opt.iterations)
            opt.lr = lr
            loss, grads = net.backward(x, y)
            opt.step(params, grads)
            total += loss * len(y)
            labels.append(y)
            preds.append(net.last_logits.argmax(axis=1))
        cm = confusion_matrix(np.concatenate(labels), np.concatenate(preds), 3)
        rep = classification_report(cm)
        return lr, total / cm.total, rep.accuracy, rep.kappa

    def run(self, log=print) -> Path:
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.snapshot").write_text(cfg.snapshot())
        log_path = self.run_dir / "log.csv"
        if not log_path.exists():
            with log_path.open("w", newline="") as f:
                csv.writer(f).writerow(LOG_HEADER)
        for epoch in range(self.start_epoch + 1, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr, tr_loss, tr_acc, tr_kappa = self.train_epoch(epoch)
            val = evaluate(self.net, self.valid_stream)
            rep = val.report()
            self.lr_scale = self.plateau.update(rep.mean_loss, self.lr_scale)
            seconds = time.perf_counter() - t0
            row = [epoch, repr(lr), repr(tr_loss), repr(tr_acc), repr(tr_kappa),
                   repr(rep.mean_loss), repr(rep.accuracy), repr(rep.kappa), f"{seconds:.3f}"]
            with log_path.open("a", newline="") as f:
                csv.writer(f).writerow(row)
            if rep.mean_loss < self.best_val:
                self.best_val = rep.mean_loss
                save_checkpoint(self.net, self.optimizer, epoch, self.run_dir / "best.ckpt", self._state())
            save_checkpoint(self.net, self.optimizer, epoch, self.run_dir / "last.ckpt", self._state())
            log(
                f"epoch {epoch}/{cfg.epochs} lr={lr:.3g} loss={tr_loss:.4f} acc={tr_acc:.4f} "
                f"val_loss={rep.mean_loss:.4f} val_acc={rep.accuracy:.4f} val_kappa={rep.kappa:.4f} "
                f"({seconds:.1f}s)"
            )
        return self.run_dir


def train(config: RunConfig, log=print) -> Path:
    """Validate everything, then train; nothing is written if validation fails."""
    return Trainer(config).run(log)


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
