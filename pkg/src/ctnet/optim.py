"""Optimizers and learning-rate schedules.

AdaBelief tracks the first moment ``m`` and the "belief" ``s``, an EMA of
the squared deviation of the gradient from ``m``::

    m <- b1*m + (1-b1)*g
    s <- b2*s + (1-b2)*(g-m)**2 + eps
    theta <- theta - lr * (m / (1-b1**t)) / (sqrt(s / (1-b2**t)) + eps)

The triangular cyclical schedule works per mini-batch step and the plateau
policy per epoch; the training loop multiplies the two.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ConfigError, NonFiniteGradientError

ADABELIEF_EPS = 1e-14


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}; update skipped")


@dataclass
class AdaBeliefState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = ADABELIEF_EPS
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def adabelief_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdaBeliefState):
    """Apply one AdaBelief update to ``params`` in place; returns ``(params, state)``."""
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    _check_finite(grads)
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ConfigError(f"gradient {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.s[name] = np.zeros_like(p)
        s = state.s[name]
        m *= b1
        m += (1 - b1) * g
        dev = g - m
        s *= b2
        s += (1 - b2) * dev * dev + eps
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(s / bc2) + eps)
    return params, state


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    _check_finite(grads)
    for name, g in grads.items():
        params[name] -= lr * g
    return params


class AdaBelief:
    """Stateful wrapper used by the training loop."""

    name = "adabelief"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=ADABELIEF_EPS, weight_decay=0.0):
        self.state = AdaBeliefState(lr, beta1, beta2, epsilon, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    @property
    def iterations(self) -> int:
        return self.state.step

    def step(self, params, grads):
        adabelief_step(params, grads, self.state)

    def hyperparameters(self) -> dict:
        s = self.state
        return {
            "name": self.name, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
            "epsilon": s.epsilon, "weight_decay": s.weight_decay, "step": s.step,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.state.m.items()}
        out.update({f"s/{k}": v for k, v in self.state.s.items()})
        return out

    @classmethod
    def restore(cls, hyper: dict, tensors: dict[str, np.ndarray]) -> "AdaBelief":
        opt = cls(hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["epsilon"], hyper["weight_decay"])
        opt.state.step = int(hyper["step"])
        for key, arr in tensors.items():
            which, name = key.split("/", 1)
            getattr(opt.state, which)[name] = np.array(arr, copy=True)
        return opt


class SGD:
    name = "sgd"

    def __init__(self, lr=1e-2):
        self.lr = float(lr)
        self.iterations = 0

    def step(self, params, grads):
        sgd_step(params, grads, self.lr)
        self.iterations += 1

    def hyperparameters(self) -> dict:
        return {"name": self.name, "lr": self.lr, "step": self.iterations}

    def tensors(self) -> dict[str, np.ndarray]:
        return {}

    @classmethod
    def restore(cls, hyper: dict, tensors) -> "SGD":
        opt = cls(hyper["lr"])
        opt.iterations = int(hyper["step"])
        return opt


OPTIMIZERS = {"adabelief": AdaBelief, "sgd": SGD}


def make_optimizer(name: str, lr: float, **kwargs):
    if name not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}")
    return OPTIMIZERS[name](lr, **kwargs)


# --- schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class ClrSchedule:
    min_lr: float
    max_lr: float
    step_size: int

    def __post_init__(self):
        if not 0 < self.min_lr < self.max_lr:
            raise ConfigError(f"need 0 < min_lr < max_lr, got {self.min_lr}, {self.max_lr}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be >= 1, got {self.step_size}")


def clr_lr(schedule: ClrSchedule, step: int) -> float:
    """Triangular cyclical learning rate at mini-batch ``step`` (0-based)."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    # cycle = floor(1 + step/(2*ss)) and x = |step/ss - 2*cycle + 1| reduce to
    # x = |r - ss|/ss with r = step mod 2*ss; integer r keeps the wave exactly periodic.
    ss = schedule.step_size
    r = step % (2 * ss)
    frac = (ss - abs(r - ss)) / ss
    return schedule.min_lr + (schedule.max_lr - schedule.min_lr) * frac


@dataclass(frozen=True)
class PlateauPolicy:
    factor: float = 0.1
    patience: int = 10
    floor: float = 0.0
    threshold: float = 1e-4
    monitor: str = "val_loss"

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 0 or self.floor < 0:
            raise ConfigError("plateau patience and floor must be >= 0")


@dataclass
class PlateauTracker:
    """Running state of a plateau policy: best metric so far and epochs since."""

    policy: PlateauPolicy
    best: float = math.inf
    wait: int = 0
    reduced: bool = False

    def update(self, metric: float, lr: float) -> float:
        self.reduced = False
        if metric < self.best - self.policy.threshold:
            self.best = metric
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.policy.patience:
            self.wait = 0
            self.reduced = True
            return min(lr, max(self.policy.floor, lr * self.policy.factor))
        return lr


def plateau_update(policy: PlateauPolicy, history: list[float], current_lr: float) -> float:
    """Learning rate after the latest entry of ``history``.

    Replays the whole history so the patience counter (including its resets
    after earlier reductions) is reconstructed; only a trigger at the final
    epoch changes ``current_lr``.
    """
    if not history:
        raise ConfigError("plateau history is empty")
    tracker = PlateauTracker(policy)
    for value in history:
        tracker.update(value, 1.0)
    if tracker.reduced:
        return min(current_lr, max(policy.floor, current_lr * policy.factor))
    return current_lr


# --- LR range test ---------------------------------------------------------------


@dataclass
class RangeTestResult:
    rows: list[tuple[int, float, float, float]]  # step, lr, raw_loss, smoothed_loss
    diverged: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "raw_loss", "smoothed_loss"])
            for step, lr, raw, smooth in self.rows:
                w.writerow([step, repr(lr), repr(raw), repr(smooth)])


def lr_range_test(
    net,
    data: Iterable,
    lr_span: tuple[float, float],
    steps: int,
    optimizer_factory: Callable[[float], object] = AdaBelief,
    smoothing: float = 0.98,
    divergence_factor: float = 4.0,
    restore: bool = True,
) -> RangeTestResult:
    """Sweep the learning rate geometrically from ``low`` to ``high``.

    ``net`` needs ``train()``, ``params()`` and ``backward(x, y) -> (loss,
    grads)``; ``data`` yields ``(x, y)`` batches and is cycled.  The smoothed
    loss is a bias-corrected EMA.  The sweep stops once the smoothed loss
    exceeds ``divergence_factor`` times the first one.  Parameters are
    restored afterwards unless ``restore`` is false.
    """
    low, high = lr_span
    if not 0 < low < high:
        raise ConfigError(f"lr span must satisfy 0 < low < high, got {lr_span}")
    result = RangeTestResult([])
    if steps <= 0:
        return result
    params = net.params()
    saved = {k: v.copy() for k, v in params.items()} if restore else None
    net.train()
    opt = optimizer_factory(low)
    ratio = high / low
    avg = 0.0
    first = None
    batches = _cycle(data)
    try:
        for i in range(steps):
            lr = low * ratio ** (i / max(steps - 1, 1))
            opt.lr = lr
            x, y = next(batches)
            loss, grads = net.backward(x, y)
            avg = smoothing * avg + (1 - smoothing) * loss
            smoothed = avg / (1 - smoothing ** (i + 1))
            result.rows.append((i, lr, float(loss), float(smoothed)))
            if first is None:
                first = smoothed
            if not math.isfinite(smoothed) or smoothed > divergence_factor * first:
                result.diverged = True
                break
            try:
                opt.step(params, grads)
            except NonFiniteGradientError:
                result.diverged = True
                break
    finally:
        if saved is not None:
            for k, v in saved.items():
                params[k][...] = v
    return result


def _cycle(data: Iterable) -> Iterator:
    cache = []
    for item in data:
        cache.append(item)
        yield item
    if not cache:
        raise ConfigError("lr range test needs at least one batch")
    while True:
        yield from cache
