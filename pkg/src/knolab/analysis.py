"""Data-driven Koopman spectral analysis on delay-embedded observations.

Hankel matrices sample the Krylov sequence of an observable; a least-squares
fit over consecutive columns gives a finite Koopman approximation, and the
companion-matrix construction recovers its spectrum from time-averaged Gram
matrices.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AnalysisError",
    "SingularGramError",
    "HankelMatrix",
    "KoopmanEstimate",
    "SpectrumReport",
    "build_hankel",
    "fit_koopman_lsq",
    "gram_matrix",
    "companion_matrix",
    "principal_minor_sums",
    "characteristic_polynomial",
    "companion_spectrum",
    "hausdorff_distance",
    "convergence_study",
    "write_convergence_csv",
    "rotation_orbit",
    "birkhoff_average",
]


class AnalysisError(ValueError):
    pass


class SingularGramError(AnalysisError):
    def __init__(self, cond: float):
        self.condition_number = cond
        super().__init__(f"empirical Gram matrix is singular (condition number {cond:.3e})")


@dataclass(frozen=True)
class HankelMatrix:
    """Delay embedding: block row ``i``, column ``j`` holds g(x_{i+j})."""

    entries: np.ndarray
    m: int
    n: int
    eps: float = 1.0
    obs_dim: int = 1

    def column(self, k: int) -> np.ndarray:
        """1-based column, matching the usual H(k) notation."""
        return self.entries[:, k - 1]


@dataclass(frozen=True)
class KoopmanEstimate:
    matrix: np.ndarray
    residual: float
    rank_deficient: bool = False
    rank: int = 0


@dataclass
class SpectrumReport:
    companion: np.ndarray
    gram: np.ndarray
    eigenvalues: np.ndarray
    reference_eigenvalues: np.ndarray | None = None
    spectral_distance: float | None = None
    residual: float = 0.0
    condition_number: float = 1.0
    method: str = "principal-minors"
    minors: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _as_series(series) -> np.ndarray:
    s = np.asarray(series)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2:
        raise AnalysisError(f"series must be (T,) or (T, d), got shape {s.shape}")
    return s


def build_hankel(series, m: int, n: int | None = None, eps: float = 1.0) -> HankelMatrix:
    """Stack ``m`` delayed copies of ``series`` into ``n`` columns.

    For vector observables each delay contributes a block of ``d`` rows.
    """
    s = _as_series(series)
    if m < 1:
        raise AnalysisError(f"delay dimension m must be >= 1, got {m}")
    if n is None:
        n = s.shape[0] - m + 1
    if n < 1 or s.shape[0] < m + n - 1:
        raise AnalysisError(f"series of length {s.shape[0]} too short for m={m}, n={n} (needs {m + n - 1})")
    d = s.shape[1]
    h = np.empty((m * d, n), dtype=s.dtype)
    for i in range(m):
        h[i * d:(i + 1) * d, :] = s[i:i + n].T
    return HankelMatrix(h, m, n, eps, d)


def fit_koopman_lsq(h: HankelMatrix | np.ndarray, rcond: float = 1e-12) -> KoopmanEstimate:
    """P minimizing sum_k ||H(k+1) - P H(k)|| over consecutive column pairs."""
    entries = h.entries if isinstance(h, HankelMatrix) else np.asarray(h)
    if entries.shape[1] < 2:
        raise AnalysisError("need at least two columns to fit consecutive pairs")
    x, y = entries[:, :-1], entries[:, 1:]
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    keep = s > rcond * (s[0] if s.size and s[0] > 0 else 1.0)
    rank = int(keep.sum())
    if rank == 0:
        p = np.zeros((y.shape[0], x.shape[0]))
    else:
        x_pinv = (vt[keep].T / s[keep]) @ u[:, keep].T
        p = y @ x_pinv
    resid = float(np.linalg.norm(y - p @ x))
    return KoopmanEstimate(p, resid, rank < min(x.shape), rank)


def gram_matrix(h: HankelMatrix, r: int) -> np.ndarray:
    """Time-averaged Gram matrix (1/m) <H(i), H(j)> over the first r columns."""
    cols = h.entries[:, :r]
    return (np.conj(cols).T @ cols) / h.m


def companion_matrix(coeffs) -> np.ndarray:
    """Subdiagonal ones with ``coeffs`` in the last column, zeros elsewhere."""
    c = np.asarray(coeffs)
    r = c.size
    out = np.zeros((r, r), dtype=np.result_type(c, float))
    if r > 1:
        out[np.arange(1, r), np.arange(r - 1)] = 1.0
    out[:, -1] = c
    return out


def principal_minor_sums(a: np.ndarray) -> np.ndarray:
    """Sums of all k-order principal minors, k = 1..r."""
    a = np.asarray(a)
    r = a.shape[0]
    sums = np.zeros(r, dtype=np.result_type(a, float))
    for k in range(1, r + 1):
        sums[k - 1] = sum(np.linalg.det(a[np.ix_(idx, idx)]) for idx in itertools.combinations(range(r), k))
    return sums


def characteristic_polynomial(a: np.ndarray) -> np.ndarray:
    """Monic coefficients, highest degree first: z^r + sum (-1)^i E_i z^(r-i)."""
    e = principal_minor_sums(a)
    signs = (-1.0) ** np.arange(1, e.size + 1)
    return np.concatenate([[1.0], signs * e])


_MINOR_LIMIT = 6


def hausdorff_distance(a, b) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=complex))
    b = np.atleast_1d(np.asarray(b, dtype=complex))
    if a.size == 0 or b.size == 0:
        raise AnalysisError("Hausdorff distance needs non-empty sets")
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def companion_spectrum(series, r: int, m: int | None = None, reference=None,
                       max_condition: float = 1e12) -> SpectrumReport:
    """Companion-matrix spectrum of the Krylov basis H(1..r).

    The last column solves V c = (1/m) [<H(k), H(r+1)>]_k, i.e. the coordinates
    of H(r+1) in the basis of the first r columns.
    """
    s = _as_series(series)
    if r < 1:
        raise AnalysisError("r must be >= 1")
    if m is None:
        m = s.shape[0] - r
    h = build_hankel(s, m, r + 1)
    v = gram_matrix(h, r)
    cond = float(np.linalg.cond(v)) if np.all(np.isfinite(v)) else math.inf
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularGramError(cond)
    basis = h.entries[:, :r]
    target = h.entries[:, r]
    rhs = (np.conj(basis).T @ target) / m
    c = np.linalg.solve(v, rhs)
    comp = companion_matrix(c)
    if r <= _MINOR_LIMIT:
        poly = characteristic_polynomial(comp)
        eig = np.roots(poly) if r > 1 else np.array([-poly[1]])
        method = "principal-minors"
        minors = principal_minor_sums(comp)
    else:
        eig = np.linalg.eigvals(comp)
        method = "dense-eigensolver"
        minors = np.zeros(0)
    resid = float(np.linalg.norm(target - basis @ c) / math.sqrt(m))
    report = SpectrumReport(comp, v, np.asarray(eig, dtype=complex), residual=resid, condition_number=cond,
                            method=method, minors=minors)
    if reference is not None:
        report.reference_eigenvalues = np.asarray(reference, dtype=complex)
        report.spectral_distance = hausdorff_distance(report.eigenvalues, report.reference_eigenvalues)
    return report


def convergence_study(generator: Callable[[int], np.ndarray], m_list: Iterable[int], r: int,
                      reference) -> list[dict]:
    """Spectral distance to ``reference`` as the delay dimension grows.

    ``generator(length)`` returns at least ``length`` observations.
    """
    rows = []
    for m in m_list:
        series = generator(m + r)
        rep = companion_spectrum(series, r, m=m, reference=reference)
        rows.append({"m": int(m), "distance": rep.spectral_distance, "residual": rep.residual})
    return rows


def write_convergence_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["m", "distance", "residual"])
        w.writeheader()
        for row in rows:
            w.writerow({"m": row["m"], "distance": repr(float(row["distance"])),
                        "residual": repr(float(row["residual"]))})


def rotation_orbit(theta0: float, alpha: float, n: int) -> np.ndarray:
    """Orbit of the circle rotation theta -> theta + alpha (mod 1)."""
    k = np.arange(n, dtype=np.float64)
    return np.mod(theta0 + k * alpha, 1.0)


def birkhoff_average(observable: Callable[[np.ndarray], np.ndarray], orbit: np.ndarray) -> float:
    return float(np.mean(observable(orbit)))
