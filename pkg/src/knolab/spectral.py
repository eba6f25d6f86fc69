"""Frequency-truncated Fourier transforms on uniform periodic meshes.

Convention: the forward transform is unnormalized and the inverse carries the
1/N factor (numpy's default ``norm="backward"``). The last transformed axis
uses the real-input half spectrum and keeps wavenumbers ``0..f-1``; every other
transformed axis keeps ``|k| < f`` (``2f - 1`` stored entries, or the whole
axis once ``f`` reaches the Nyquist count ``N // 2 + 1``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, _node, as_tensor

NORM_CONVENTION = "forward-unnormalized"

__all__ = [
    "SpectralError",
    "SpectralState",
    "nyquist_count",
    "kept_indices",
    "fft_truncate",
    "ifft_pad",
    "low_pass",
    "truncate",
    "pad_inverse",
]


class SpectralError(ValueError):
    """Invalid mode count or inconsistent spectral metadata."""


def nyquist_count(n: int) -> int:
    """Number of distinct non-negative wavenumbers on an ``n``-point grid."""
    return n // 2 + 1


@lru_cache(maxsize=256)
def kept_indices(n: int, f: int, half: bool) -> np.ndarray:
    """Storage indices of the kept band along one axis.

    ``half`` selects the real-input half-spectrum layout.
    """
    if f < 1:
        raise SpectralError(f"mode count must be >= 1, got {f}")
    if f > nyquist_count(n):
        raise SpectralError(f"mode count {f} exceeds Nyquist count {nyquist_count(n)} for resolution {n}")
    if half:
        idx = np.arange(f)
    else:
        idx = np.unique(np.concatenate([np.arange(f), (n - np.arange(1, f)) % n]))
    idx.setflags(write=False)
    return idx


def _normalize_axes(axes: Sequence[int], ndim: int) -> tuple[int, ...]:
    out = tuple(a % ndim for a in axes)
    if len(set(out)) != len(out):
        raise SpectralError(f"repeated axes {axes}")
    return tuple(sorted(out))


def _as_modes(modes, naxes: int) -> tuple[int, ...]:
    if np.isscalar(modes):
        return (int(modes),) * naxes
    modes = tuple(int(m) for m in modes)
    if len(modes) != naxes:
        raise SpectralError(f"need one mode count per axis, got {modes} for {naxes} axes")
    return modes


@dataclass(frozen=True)
class SpectralState:
    """Kept Fourier coefficients of a real field.

    ``axes`` are the (non-negative) transformed axes of ``coefficients``; the
    remaining axes (batch, channels) pass through unchanged.
    """

    coefficients: np.ndarray
    modes_kept: tuple[int, ...]
    original_resolution: tuple[int, ...]
    axes: tuple[int, ...]
    norm_convention: str = NORM_CONVENTION

    def __post_init__(self):
        if not (len(self.modes_kept) == len(self.original_resolution) == len(self.axes)):
            raise SpectralError("modes_kept, original_resolution and axes must have equal length")
        for pos, (ax, n, f) in enumerate(zip(self.axes, self.original_resolution, self.modes_kept)):
            expected = len(kept_indices(n, f, pos == len(self.axes) - 1))
            if self.coefficients.shape[ax] != expected:
                raise SpectralError(
                    f"axis {ax}: {self.coefficients.shape[ax]} stored coefficients, expected {expected} "
                    f"for f={f}, N={n}"
                )
        if self.norm_convention != NORM_CONVENTION:
            raise SpectralError(f"unsupported norm convention {self.norm_convention!r}")


def _gather(c: np.ndarray, axes, res, modes) -> np.ndarray:
    last = len(axes) - 1
    for pos, (ax, n, f) in enumerate(zip(axes, res, modes)):
        c = np.take(c, kept_indices(n, f, pos == last), axis=ax)
    return c


def _scatter(c: np.ndarray, axes, res, modes) -> np.ndarray:
    shape = list(c.shape)
    last = len(axes) - 1
    for pos, (ax, n) in enumerate(zip(axes, res)):
        shape[ax] = n // 2 + 1 if pos == last else n
    full = np.zeros(shape, dtype=np.complex128)
    index = [slice(None)] * c.ndim
    for pos, (ax, n, f) in enumerate(zip(axes, res, modes)):
        index[ax] = kept_indices(n, f, pos == last)
    full[np.ix_(*[np.arange(s) if isinstance(i, slice) else i for s, i in zip(c.shape, index)])] = c
    return full


def fft_truncate(field, modes, axes: Sequence[int] | None = None) -> SpectralState:
    """Transform a real periodic field and keep the lowest ``modes`` per axis."""
    x = np.asarray(field)
    if np.iscomplexobj(x):
        raise SpectralError("fft_truncate expects a real field")
    if not np.all(np.isfinite(x)):
        raise SpectralError("fft_truncate: field contains non-finite values")
    axes = _normalize_axes(range(x.ndim) if axes is None else axes, x.ndim)
    modes = _as_modes(modes, len(axes))
    res = tuple(x.shape[a] for a in axes)
    for n, f in zip(res, modes):
        kept_indices(n, f, False)
    c = np.fft.rfftn(x, axes=axes)
    return SpectralState(_gather(c, axes, res, modes), modes, res, axes)


def ifft_pad(spec: SpectralState) -> np.ndarray:
    """Zero-pad the discarded modes and return the real field."""
    if not isinstance(spec, SpectralState):
        raise SpectralError("ifft_pad expects a SpectralState")
    full = _scatter(spec.coefficients, spec.axes, spec.original_resolution, spec.modes_kept)
    return np.fft.irfftn(full, s=spec.original_resolution, axes=spec.axes)


def low_pass(field, modes, axes: Sequence[int] | None = None) -> np.ndarray:
    """Projection onto the kept band: ``ifft_pad(fft_truncate(field))``."""
    return ifft_pad(fft_truncate(field, modes, axes))


# ---------------------------------------------------------------------------
# differentiable versions (gradients follow the convention in autodiff)


def truncate(x, modes, axes: Sequence[int]) -> Tensor:
    """Differentiable ``fft_truncate`` returning a complex Tensor."""
    x = as_tensor(x)
    if x.is_complex:
        raise ShapeError("fft_truncate", "expects a real tensor", x.shape)
    axes = _normalize_axes(axes, x.ndim)
    modes = _as_modes(modes, len(axes))
    res = tuple(x.shape[a] for a in axes)
    try:
        for n, f in zip(res, modes):
            kept_indices(n, f, False)
    except SpectralError as exc:
        raise SpectralError(f"fft_truncate: {exc}") from None
    out = _gather(np.fft.rfftn(x.data, axes=axes), axes, res, modes)
    full_axes, last = axes[:-1], axes[-1]

    def bw(g):
        gc = _scatter(g, axes, res, modes)
        for ax, n in zip(full_axes, res[:-1]):
            gc = n * np.fft.ifft(gc, axis=ax)
        n_last = res[-1]
        pad = [(0, 0)] * gc.ndim
        pad[last] = (0, n_last - gc.shape[last])
        gc = np.pad(gc, pad)
        return ((n_last * np.fft.ifft(gc, axis=last)).real,)

    return _node(out, (x,), bw, "fft_truncate")


def pad_inverse(c, resolution: Sequence[int], modes, axes: Sequence[int]) -> Tensor:
    """Differentiable ``ifft_pad`` for a complex Tensor of kept coefficients."""
    c = as_tensor(c)
    axes = _normalize_axes(axes, c.ndim)
    res = tuple(int(n) for n in resolution)
    modes = _as_modes(modes, len(axes))
    if len(res) != len(axes):
        raise SpectralError("pad_inverse: resolution and axes differ in length")
    last_pos = len(axes) - 1
    for pos, (ax, n, f) in enumerate(zip(axes, res, modes)):
        if c.shape[ax] != len(kept_indices(n, f, pos == last_pos)):
            raise SpectralError(f"ifft_pad: axis {ax} holds {c.shape[ax]} coefficients, inconsistent with f={f}, N={n}")
    full = _scatter(c.data, axes, res, modes)
    out = np.fft.irfftn(full, s=res, axes=axes)
    full_axes, last = axes[:-1], axes[-1]
    n_last = res[-1]
    weight_shape = [1] * c.ndim
    weight_shape[last] = n_last // 2 + 1
    w = np.full(n_last // 2 + 1, 2.0)
    w[0] = 1.0
    if n_last % 2 == 0:
        w[-1] = 1.0
    w = w.reshape(weight_shape)

    def bw(g):
        gy = np.fft.rfft(g, axis=last) * (w / n_last)
        for ax, n in zip(full_axes, res[:-1]):
            gy = np.fft.fft(gy, axis=ax) / n
        return (_gather(gy, axes, res, modes),)

    return _node(out, (c,), bw, "ifft_pad")
