"""Pseudo-spectral reference solvers and samplers on the periodic unit domain.

All solvers work in Fourier space with real-input transforms, dealias the
quadratic terms with the 2/3 rule and integrate a whole batch of initial
conditions at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SolverError",
    "GRFSpec",
    "BurgersConfig",
    "NS2DConfig",
    "TrajectorySet",
    "sample_grf",
    "grf_variance",
    "solve_burgers",
    "solve_ns_vorticity",
    "velocity_from_vorticity",
    "velocity_divergence",
    "default_forcing",
    "downsample",
    "gen_linear_trajectories",
    "rotation_matrix",
    "CoupledFieldsConfig",
    "gen_coupled_fields",
]


class SolverError(RuntimeError):
    """Blow-up or invalid solver setup."""


@dataclass(frozen=True)
class GRFSpec:
    """Spectral density sigma^2 (|2 pi k|^2 + tau^2)^(-alpha)."""

    alpha: float = 2.5
    tau: float = 7.0
    sigma: float = 49.0


@dataclass
class TrajectorySet:
    """Samples x time x space (x channels) on a uniform periodic mesh."""

    data: np.ndarray
    eps: float
    extents: tuple[float, ...] = (1.0,)
    variables: tuple[str, ...] = ("u",)
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> tuple[int, ...]:
        return self.data.shape[2:2 + len(self.extents)]

    @property
    def samples(self) -> int:
        return self.data.shape[0]

    @property
    def times(self) -> int:
        return self.data.shape[1]


def _wavenumbers(shape: tuple[int, ...]) -> list[np.ndarray]:
    """Integer wavenumber grids for an rfftn layout of ``shape``."""
    axes = [np.fft.fftfreq(n, 1.0 / n) for n in shape[:-1]] + [np.fft.rfftfreq(shape[-1], 1.0 / shape[-1])]
    return np.meshgrid(*axes, indexing="ij")


def _density(spec: GRFSpec, ks: list[np.ndarray]) -> np.ndarray:
    k2 = sum(k * k for k in ks)
    s = spec.sigma ** 2 * (4.0 * np.pi ** 2 * k2 + spec.tau ** 2) ** (-spec.alpha)
    s[(0,) * len(ks)] = 0.0
    return s


def _check_grf(spec: GRFSpec, d: int) -> None:
    if spec.alpha <= d / 2:
        raise ValueError(f"GRF exponent alpha={spec.alpha} must exceed d/2={d / 2} for finite variance")


def sample_grf(spec: GRFSpec, resolution, seed: int, n: int | None = None) -> np.ndarray:
    """Zero-mean periodic Gaussian random field(s).

    Returns shape ``resolution`` (or ``(n, *resolution)``). The pointwise
    variance equals the sum of the density over all non-zero grid wavenumbers.
    """
    res = (resolution,) if np.isscalar(resolution) else tuple(resolution)
    _check_grf(spec, len(res))
    rng = np.random.default_rng(seed)
    lead = () if n is None else (n,)
    if spec.sigma == 0:
        return np.zeros(lead + res)
    npts = int(np.prod(res))
    axes = tuple(range(len(lead), len(lead) + len(res)))
    white = rng.standard_normal(lead + res)
    amp = np.sqrt(_density(spec, _wavenumbers(res)))
    return np.fft.irfftn(np.fft.rfftn(white, axes=axes) * amp, s=res, axes=axes) * np.sqrt(npts)


def grf_variance(spec: GRFSpec, resolution) -> float:
    """Analytic pointwise variance of ``sample_grf`` on the given grid."""
    res = (resolution,) if np.isscalar(resolution) else tuple(resolution)
    _check_grf(spec, len(res))
    ks = np.meshgrid(*[np.fft.fftfreq(n, 1.0 / n) for n in res], indexing="ij")
    k2 = sum(k * k for k in ks)
    s = spec.sigma ** 2 * (4.0 * np.pi ** 2 * k2 + spec.tau ** 2) ** (-spec.alpha)
    s[(0,) * len(res)] = 0.0
    return float(s.sum())


def _dealias_mask(shape: tuple[int, ...]) -> np.ndarray:
    ks = _wavenumbers(shape)
    mask = np.ones(ks[0].shape, dtype=bool)
    for k, n in zip(ks, shape):
        mask &= np.abs(k) < n / 3.0
    return mask


# ---------------------------------------------------------------------------
# Burgers


@dataclass
class BurgersConfig:
    N: int = 256
    nu: float = 0.1
    dt: float = 1e-3
    T: float = 1.0
    record_stride: int = 100
    grf: GRFSpec = field(default_factory=GRFSpec)
    seed: int = 0

    def __post_init__(self):
        if self.N < 4 or self.N & (self.N - 1):
            raise ValueError(f"Burgers grid size must be a power of two, got {self.N}")
        if self.dt <= 0 or self.T < 0 or self.record_stride < 1:
            raise ValueError("dt must be positive, T non-negative and record_stride >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@np.errstate(over="ignore", invalid="ignore")  # blow-up is reported as SolverError
def solve_burgers(init, config: BurgersConfig) -> TrajectorySet:
    """Integrate u_t + (u^2/2)_x = nu u_xx with integrating-factor RK4.

    The viscous term is integrated exactly; the dealiased flux term is
    advanced with the classical fourth-order Runge-Kutta weights. ``init`` is
    (N,) or (S, N); snapshots are recorded every ``record_stride`` steps
    including t=0.
    """
    u0 = np.atleast_2d(np.asarray(init, dtype=np.float64))
    n = u0.shape[-1]
    if n != config.N:
        raise ValueError(f"initial condition has resolution {n}, config expects {config.N}")
    k = np.fft.rfftfreq(n, 1.0 / n)
    ik = 2j * np.pi * k
    lin = -config.nu * (2.0 * np.pi * k) ** 2
    mask = _dealias_mask((n,))
    dt = config.dt
    e_half = np.exp(lin * dt / 2.0)
    e_full = e_half * e_half

    def flux(uh):
        u = np.fft.irfft(uh, n=n, axis=-1)
        return -0.5 * ik * np.fft.rfft(u * u, axis=-1) * mask

    uh = np.fft.rfft(u0, axis=-1)
    steps = config.steps
    frames = [u0.copy()]
    for step in range(1, steps + 1):
        a = flux(uh)
        b = flux(e_half * (uh + 0.5 * dt * a))
        c = flux(e_half * uh + 0.5 * dt * b)
        d = flux(e_full * uh + dt * e_half * c)
        uh = e_full * uh + dt / 6.0 * (e_full * a + 2.0 * e_half * (b + c) + d)
        if step % config.record_stride == 0:
            u = np.fft.irfft(uh, n=n, axis=-1)
            if not np.all(np.isfinite(u)):
                raise SolverError(f"Burgers solution became non-finite at step {step}")
            frames.append(u)
    if not np.all(np.isfinite(uh)):
        raise SolverError(f"Burgers solution became non-finite at step {steps}")
    data = np.stack(frames, axis=1)
    meta = {"pde": "burgers", "nu": config.nu, "dt": config.dt, "record_stride": config.record_stride,
            "resolution": n, "seed": config.seed, "forcing": "none"}
    return TrajectorySet(data, config.dt * config.record_stride, (1.0,), ("u",), meta)


# ---------------------------------------------------------------------------
# 2-D Navier-Stokes, vorticity form


def default_forcing(n: int) -> np.ndarray:
    x = np.arange(n) / n
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    return 0.1 * (np.sin(2 * np.pi * (x1 + x2)) + np.cos(2 * np.pi * (x1 + x2)))


@dataclass
class NS2DConfig:
    N: int = 64
    nu: float = 1e-3
    dt: float = 5e-3
    T: float = 20.0
    record_stride: int = 200
    forcing: str = "default"
    grf: GRFSpec = field(default_factory=lambda: GRFSpec(alpha=2.5, tau=7.0, sigma=37.0))
    seed: int = 0

    def __post_init__(self):
        if self.forcing not in ("default", "none"):
            raise ValueError(f"forcing must be 'default' or 'none', got {self.forcing!r}")
        if self.dt <= 0 or self.T < 0 or self.record_stride < 1:
            raise ValueError("dt must be positive, T non-negative and record_stride >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def forcing_field(self) -> np.ndarray:
        return default_forcing(self.N) if self.forcing == "default" else np.zeros((self.N, self.N))


def _ns_operators(n: int):
    kx, ky = _wavenumbers((n, n))
    k2 = 4.0 * np.pi ** 2 * (kx ** 2 + ky ** 2)
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    return 2j * np.pi * kx, 2j * np.pi * ky, k2, inv


def velocity_from_vorticity(w) -> tuple[np.ndarray, np.ndarray]:
    """Velocity (u, v) = (d psi/dy, -d psi/dx) with -Lap psi = w."""
    w = np.asarray(w)
    n = w.shape[-1]
    dx, dy, _, inv = _ns_operators(n)
    psi = np.fft.rfft2(w, axes=(-2, -1)) * inv
    return (np.fft.irfft2(dy * psi, s=(n, n), axes=(-2, -1)),
            np.fft.irfft2(-dx * psi, s=(n, n), axes=(-2, -1)))


def velocity_divergence(u, v) -> np.ndarray:
    n = u.shape[-1]
    dx, dy, _, _ = _ns_operators(n)
    return np.fft.irfft2(dx * np.fft.rfft2(u, axes=(-2, -1)) + dy * np.fft.rfft2(v, axes=(-2, -1)),
                         s=(n, n), axes=(-2, -1))


@np.errstate(over="ignore", invalid="ignore")
def solve_ns_vorticity(init, config: NS2DConfig) -> TrajectorySet:
    """Vorticity-stream pseudo-spectral solver.

    Crank-Nicolson on the viscous term and a Heun predictor-corrector on the
    dealiased advection; the forcing is added every step. ``init`` is (N, N)
    or (S, N, N).
    """
    w0 = np.asarray(init, dtype=np.float64)
    if w0.ndim == 2:
        w0 = w0[None]
    n = config.N
    if w0.shape[-2:] != (n, n):
        raise ValueError(f"initial vorticity has shape {w0.shape[-2:]}, config expects {(n, n)}")
    dx, dy, k2, inv = _ns_operators(n)
    mask = _dealias_mask((n, n))
    dt, nu = config.dt, config.nu
    f_hat = np.fft.rfft2(config.forcing_field())
    num = 1.0 - 0.5 * dt * nu * k2
    den = 1.0 + 0.5 * dt * nu * k2

    def advection(wh):
        psi = wh * inv
        u = np.fft.irfft2(dy * psi, s=(n, n))
        v = np.fft.irfft2(-dx * psi, s=(n, n))
        wx = np.fft.irfft2(dx * wh, s=(n, n))
        wy = np.fft.irfft2(dy * wh, s=(n, n))
        nl = -np.fft.rfft2(u * wx + v * wy) * mask
        nl[..., 0, 0] = 0.0
        return nl

    wh = np.fft.rfft2(w0)
    frames = [w0.copy()]
    for step in range(1, config.steps + 1):
        n0 = advection(wh)
        pred = (num * wh + dt * (f_hat + n0)) / den
        n1 = advection(pred)
        wh = (num * wh + dt * (f_hat + 0.5 * (n0 + n1))) / den
        if step % config.record_stride == 0:
            w = np.fft.irfft2(wh, s=(n, n))
            if not np.all(np.isfinite(w)):
                raise SolverError(f"Navier-Stokes solution became non-finite at step {step}")
            frames.append(w)
    data = np.stack(frames, axis=1)
    meta = {"pde": "navier-stokes", "nu": nu, "dt": dt, "record_stride": config.record_stride,
            "resolution": n, "seed": config.seed, "forcing": config.forcing}
    return TrajectorySet(data, dt * config.record_stride, (1.0, 1.0), ("vorticity",), meta)


# ---------------------------------------------------------------------------
# utilities and simple systems


def downsample(traj: TrajectorySet, factor: int) -> TrajectorySet:
    """Stride-``factor`` subsampling of every spatial axis."""
    if factor < 1:
        raise ValueError(f"down-sampling factor must be >= 1, got {factor}")
    nsp = len(traj.extents)
    for n in traj.resolution:
        if n % factor:
            raise ValueError(f"factor {factor} does not divide resolution {n}")
    index = (slice(None), slice(None)) + (slice(None, None, factor),) * nsp
    meta = dict(traj.meta)
    if "resolution" in meta:
        meta["resolution"] = traj.resolution[0] // factor
    return TrajectorySet(traj.data[index].copy(), traj.eps, traj.extents, traj.variables, meta)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def gen_linear_trajectories(A, observable: Callable | None = None, n: int = 100, noise: float = 0.0,
                            seed: int = 0, x0=None) -> np.ndarray:
    """Observations of x_{k+1} = A x_k + noise for k = 0..n-1."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d = A.shape[0]
    rng = np.random.default_rng(seed)
    x = np.ones(d) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(d)
    obs = observable if observable is not None else (lambda state: state)
    out = []
    for _ in range(n):
        out.append(np.atleast_1d(obs(x)))
        x = A @ x
        if noise:
            x = x + noise * rng.standard_normal(d)
    return np.asarray(out)


@dataclass
class CoupledFieldsConfig:
    """Three coupled scalar fields: advection, diffusion, channel rotation and a
    weak quadratic interaction."""

    height: int = 64
    width: int = 32
    steps: int = 8
    eps: float = 0.05
    kappa: float = 2e-3
    mix_angle: float = 0.3
    coupling: float = 0.5
    grf: GRFSpec = field(default_factory=lambda: GRFSpec(alpha=4.0, tau=3.0, sigma=60.0))
    seed: int = 0


_VELOCITIES = np.array([[0.4, 0.0], [0.0, 0.4], [-0.3, 0.3]])


def gen_coupled_fields(config: CoupledFieldsConfig, n: int) -> TrajectorySet:
    """Trajectories of shape (n, steps + 1, height, width, 3)."""
    h, w = config.height, config.width
    rng_seed = config.seed
    fields0 = np.stack([sample_grf(config.grf, (h, w), rng_seed * 3 + c, n) for c in range(3)], axis=-1)
    ky, kx = _wavenumbers((h, w))
    k2 = 4.0 * np.pi ** 2 * (kx ** 2 + ky ** 2)
    c, s = np.cos(config.mix_angle), np.sin(config.mix_angle)
    q = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    frames = [fields0]
    u = fields0
    for _ in range(config.steps):
        hat = np.fft.rfft2(u, axes=(1, 2))
        for ch, (vy, vx) in enumerate(_VELOCITIES):
            phase = np.exp(-2j * np.pi * (ky * vy + kx * vx) * config.eps - config.kappa * k2 * config.eps)
            hat[..., ch] *= phase
        u = np.fft.irfft2(hat, s=(h, w), axes=(1, 2))
        u = u @ q.T
        inter = u[..., 0] * u[..., 1]
        u[..., 2] += config.eps * config.coupling * (inter - inter.mean(axis=(1, 2), keepdims=True))
        frames.append(u.copy())
    data = np.stack(frames, axis=1)
    meta = {"pde": "coupled-fields", "nu": config.kappa, "dt": config.eps, "record_stride": 1,
            "resolution": f"{h}x{w}", "seed": config.seed, "forcing": "none"}
    return TrajectorySet(data, config.eps, (1.0, 1.0), ("a", "b", "c"), meta)
