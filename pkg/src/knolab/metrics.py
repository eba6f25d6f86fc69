"""Error metrics, rollouts and the evaluation protocols built on them."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .pde import TrajectorySet
from .spectral import SpectralError, nyquist_count

__all__ = [
    "MetricError",
    "MetricReport",
    "relative_l2",
    "batch_relative_l2",
    "rmse",
    "acc",
    "batch_acc",
    "rollout",
    "rollout_report",
    "persistence_baseline",
    "mesh_independence_study",
    "read_report_csv",
    "save_heatmaps",
]


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise MetricError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    return p, t


def relative_l2(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.linalg.norm(t)
    if denom == 0:
        raise MetricError("relative L2 undefined for a zero-norm truth")
    return float(np.linalg.norm(p - t) / denom)


def batch_relative_l2(pred, truth) -> float:
    """Mean over the leading (sample) axis of per-sample relative L2."""
    p, t = _pair(pred, truth)
    return float(np.mean([relative_l2(a, b) for a, b in zip(p, t)]))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def acc(pred, truth, climatology) -> float:
    """Centred cosine similarity of anomalies against ``climatology``."""
    p, t = _pair(pred, truth)
    c = np.broadcast_to(np.asarray(climatology, dtype=np.float64), t.shape)
    pa, ta = p - c, t - c
    denom = np.sqrt(np.sum(pa * pa) * np.sum(ta * ta))
    if denom == 0:
        raise MetricError("ACC undefined: zero anomaly variance")
    return float(np.sum(pa * ta) / denom)


def batch_acc(pred, truth, climatology) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean([acc(a, b, climatology) for a, b in zip(p, t)]))


@dataclass
class MetricReport:
    """Rows of named columns plus wall-clock stamps."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: float = 0.0

    def add(self, **row) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise MetricError(f"row lacks columns {sorted(missing)}")
        for k in self.columns:
            v = row[k]
            if isinstance(v, float) and not np.isfinite(v):
                raise MetricError(f"non-finite metric {k}={v}")
        self.rows.append({k: row[k] for k in self.columns})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def close(self) -> "MetricReport":
        self.finished = time.time()
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in self.columns])


def read_report_csv(path) -> MetricReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rep = MetricReport(header)
        for line in reader:
            rep.rows.append({k: float(v) for k, v in zip(header, line)})
    return rep


def rollout(model, window: np.ndarray, steps: int, eps: float = 1.0) -> TrajectorySet:
    """Feed the model's own predictions back for ``steps`` steps."""
    if steps < 1:
        raise MetricError(f"rollout needs steps >= 1, got {steps}")
    preds = []
    for _ in range(steps):
        pred, window = model.step_window(window)
        preds.append(pred)
    return TrajectorySet(np.stack(preds, axis=1), eps)


def rollout_report(model, data: np.ndarray, start: int, steps: int, climatology=None) -> MetricReport:
    """Per-step rollout errors from time index ``start`` with persistence columns."""
    data = np.asarray(data, dtype=np.float64)
    if start + steps >= data.shape[1]:
        raise MetricError(f"trajectory of length {data.shape[1]} too short for start {start} + {steps} steps")
    cols = ["step", "relative_l2", "rmse", "persistence_relative_l2", "persistence_rmse"]
    if climatology is not None:
        cols += ["acc", "persistence_acc"]
    rep = MetricReport(cols)
    preds = rollout(model, model.initial_window(data, start), steps).data
    base = data[:, start]
    for s in range(1, steps + 1):
        truth = data[:, start + s]
        row = dict(step=s, relative_l2=batch_relative_l2(preds[:, s - 1], truth), rmse=rmse(preds[:, s - 1], truth),
                   persistence_relative_l2=batch_relative_l2(base, truth), persistence_rmse=rmse(base, truth))
        if climatology is not None:
            row.update(acc=batch_acc(preds[:, s - 1], truth, climatology),
                       persistence_acc=batch_acc(base, truth, climatology))
        rep.add(**row)
    return rep.close()


def persistence_baseline(data, steps: int, start: int = 0) -> MetricReport:
    """Errors of the forecast 'no change since ``start``' for steps 0..steps."""
    data = data.data if isinstance(data, TrajectorySet) else np.asarray(data, dtype=np.float64)
    if start + steps >= data.shape[1]:
        raise MetricError(f"trajectory of length {data.shape[1]} too short for start {start} + {steps} steps")
    rep = MetricReport(["step", "relative_l2", "rmse"])
    base = data[:, start]
    for s in range(steps + 1):
        truth = data[:, start + s]
        rep.add(step=s, relative_l2=batch_relative_l2(base, truth), rmse=rmse(base, truth))
    return rep.close()


def mesh_independence_study(model, datasets: dict[int, tuple[np.ndarray, np.ndarray]]) -> MetricReport:
    """Evaluate one model on (window, target) pairs at several resolutions."""
    f = model.config.f
    rep = MetricReport(["resolution", "relative_l2", "rmse"])
    for res in sorted(datasets):
        if f > nyquist_count(res):
            raise SpectralError(f"resolution {res} supports at most {nyquist_count(res)} modes, model keeps {f}")
        x, y = datasets[res]
        pred = model.predict(x)
        rep.add(resolution=int(res), relative_l2=batch_relative_l2(pred, y), rmse=rmse(pred, y))
    return rep.close()


def save_heatmaps(path, pred: np.ndarray, truth: np.ndarray, title: str = "") -> None:
    """Prediction, truth and error panels for one 1-D or 2-D field."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p, t = _pair(pred, truth)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, img, name in zip(axes, (p, t, p - t), ("prediction", "truth", "error")):
        if img.ndim == 1:
            ax.plot(img)
        else:
            im = ax.imshow(img, cmap="RdBu_r" if name == "error" else "viridis")
            fig.colorbar(im, ax=ax)
        ax.set_title(name)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
