"""Adam optimisation loop shared by the compact and ViT Koopman operators."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .io import CheckpointBundle, bundle_from_model

__all__ = [
    "TrainError",
    "TrainConfig",
    "OptimizerState",
    "TrainResult",
    "parse_config_text",
    "load_train_config",
    "lr_at",
    "adam_step",
    "make_pairs",
    "train",
    "evaluate_loss",
]

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
SCHEDULES = ("halve_every_100", "cosine")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr0: float = 1e-3
    schedule: str = "halve_every_100"
    epochs: int = 100
    lambda_p: float = 5.0
    lambda_r: float = 0.5
    lasso_weight: float = 0.0
    seed: int = 0
    prediction_gap: int = 1
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if min(self.lambda_p, self.lambda_r, self.lasso_weight) < 0:
            raise ValueError("lambda_p, lambda_r and lasso_weight must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0 or self.prediction_gap < 1 or self.grad_clip < 0:
            raise ValueError("epochs >= 0, prediction_gap >= 1 and grad_clip >= 0 are required")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        casts = {"int": int, "float": float, "str": str}
        return cls(**{k: casts[kinds[k]](v) for k, v in d.items()})


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def load_train_config(path, seed: int | None = None) -> TrainConfig:
    with open(path) as fh:
        d = parse_config_text(fh.read())
    d = {k: v for k, v in d.items() if k in {f.name for f in fields(TrainConfig)}}
    if seed is not None:
        d["seed"] = seed
    return TrainConfig.from_dict(d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if config.schedule == "halve_every_100":
        return config.lr0 * 2.0 ** (-(epoch // 100))
    if config.epochs == 0:
        return config.lr0
    return config.lr0 * (1.0 + math.cos(math.pi * epoch / config.epochs)) / 2.0


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """In-place Adam update of ``params`` (name -> Parameter)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if state.m[name].shape != p.data.shape:
            raise TrainError(f"optimizer moment for {name!r} has shape {state.m[name].shape}, parameter {p.shape}")
        state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        p.data -= lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + ADAM_EPS)


def make_pairs(data: np.ndarray, model, gap: int = 1, times=None) -> tuple[np.ndarray, np.ndarray]:
    """(input window, target) pairs from trajectories of shape (S, T, ...).

    Targets sit ``gap`` steps after the last snapshot of each window.
    """
    data = np.asarray(data, dtype=np.float64)
    m = getattr(model.config, "m", 1)
    if times is None:
        times = range(m - 1, data.shape[1] - gap)
    xs, ys = [], []
    for t in times:
        xs.append(model.initial_window(data, t))
        ys.append(data[:, t + gap])
    if not xs:
        raise TrainError(f"trajectories of length {data.shape[1]} give no pairs for window {m}, gap {gap}")
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class TrainResult:
    history: list[float]
    checkpoint: CheckpointBundle
    state: OptimizerState
    epochs_run: int


def _batch_loss(model, xb, yb, config: TrainConfig):
    loss = model.loss(xb, yb, config.lambda_p, config.lambda_r)
    if config.lasso_weight > 0:
        for k in getattr(model, "koopman_matrices", lambda: [])():
            loss = ad.add(loss, ad.scale(ad.abs_sum(k), config.lasso_weight))
    return loss


def _bundle(model, state: OptimizerState, epoch: int, history, config: TrainConfig) -> CheckpointBundle:
    extra = OrderedDict()
    for name in model.params:
        extra["adam.m." + name] = state.m[name]
        extra["adam.v." + name] = state.v[name]
    extra["train.step"] = np.array([float(state.step)])
    extra["train.epoch"] = np.array([float(epoch)])
    extra["train.history"] = np.asarray(history, dtype=np.float64)
    return bundle_from_model(model, extra, config.to_dict())


def _restore(model, bundle: CheckpointBundle) -> tuple[OptimizerState, int, list[float]]:
    t = bundle.tensors
    for name, p in model.params.items():
        p.data[...] = t["param." + name]
    state = OptimizerState({n: t["adam.m." + n].copy() for n in model.params},
                           {n: t["adam.v." + n].copy() for n in model.params},
                           int(t["train.step"][0]))
    return state, int(t["train.epoch"][0]), list(t["train.history"])


def train(model, dataset: tuple[np.ndarray, np.ndarray], config: TrainConfig,
          resume: CheckpointBundle | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minibatch Adam over ``dataset = (inputs, targets)``.

    The epoch-``e`` shuffle is drawn from a generator seeded by (seed, e) so a
    resumed run replays exactly the batches of an uninterrupted one.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in dataset)
    if x.shape[0] == 0:
        raise TrainError("empty dataset")
    if x.shape[0] != y.shape[0]:
        raise TrainError(f"inputs ({x.shape[0]}) and targets ({y.shape[0]}) differ in sample count")
    params = model.params
    if resume is not None:
        state, start, history = _restore(model, resume)
    else:
        state, start, history = OptimizerState.zeros(params), 0, []
    n = x.shape[0]
    for epoch in range(start, config.epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            for p in params.values():
                p.zero_grad()
            loss = _batch_loss(model, x[idx], y[idx], config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainError(f"non-finite loss at epoch {epoch}, batch starting at {lo}")
            ad.backward(loss)
            grads = {name: p.grad for name, p in params.items()}
            if config.grad_clip > 0:
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if gnorm > config.grad_clip:
                    grads = {k: g * (config.grad_clip / gnorm) for k, g in grads.items()}
            adam_step(params, grads, state, lr)
            total += value * idx.size
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    epochs_run = max(config.epochs, start)
    return TrainResult(history, _bundle(model, state, epochs_run, history, config), state, epochs_run)


def evaluate_loss(model, dataset, config: TrainConfig) -> float:
    x, y = dataset
    return float(_batch_loss(model, np.asarray(x), np.asarray(y), config).data)

