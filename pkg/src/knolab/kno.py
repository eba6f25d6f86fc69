"""Compact Koopman neural operator (MLP-KNO and CNN-KNO).

Pipeline for one unit, acting on a window of ``m`` snapshots stacked on the
channel axis::

    z    = act(E(window))                      # observation
    low  = ifft_pad(K^r fft_truncate(z, f))    # Koopman advance of the kept band
    high = C(z)                                # high-frequency complement
    pred = act(D(low + high))[..., -1]         # inverse observation, latest snapshot

``K`` is one real ``o x o`` matrix shared by every kept mode and applied to the
channel vector of each mode. Fields are channel-last: (B, N, m) in 1-D and
(B, H, W, m) in 2-D.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .spectral import SpectralError, SpectralState, nyquist_count, pad_inverse, truncate

__all__ = [
    "ConfigError",
    "CompactKNOConfig",
    "CompactKNO",
    "param_shapes",
    "count_parameters",
    "koopman_advance",
    "kno_loss",
]


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class CompactKNOConfig:
    o: int = 32
    f: int = 10
    r: int = 1
    variant: str = "mlp"
    units: int = 1
    m: int = 1
    spatial_rank: int = 1
    activation: str = "tanh"
    high_freq: bool = True
    high_freq_kernel: int = 0  # 0 selects 1 for mlp, 3 for cnn
    use_encoder: bool = True
    use_decoder: bool = True
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("o", "f", "r", "units", "m"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.variant not in ("mlp", "cnn"):
            raise ConfigError(f"variant must be 'mlp' or 'cnn', got {self.variant!r}")
        if self.spatial_rank not in (1, 2):
            raise ConfigError(f"spatial_rank must be 1 or 2, got {self.spatial_rank}")
        if self.activation not in ("tanh", "identity"):
            raise ConfigError(f"activation must be 'tanh' or 'identity', got {self.activation!r}")
        if self.high_freq_kernel < 0 or (self.high_freq_kernel and self.high_freq_kernel % 2 == 0):
            raise ConfigError("high_freq_kernel must be 0 (auto) or a positive odd integer")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if not self.use_encoder and self.o != self.m:
            raise ConfigError("without an encoder the latent width o must equal the window length m")
        if not self.use_decoder and self.o != self.m:
            raise ConfigError("without a decoder the latent width o must equal the window length m")

    @property
    def hf_kernel(self) -> int:
        if self.high_freq_kernel:
            return self.high_freq_kernel
        return 1 if self.variant == "mlp" else 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompactKNOConfig":
        known = {f.name: f.type for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


_CNN_KERNEL = 3


def param_shapes(cfg: CompactKNOConfig) -> dict[str, tuple[int, ...]]:
    """Declared parameter tensors, in creation order."""
    spatial = (_CNN_KERNEL,) * cfg.spatial_rank
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.use_encoder:
        shapes["encoder.weight"] = (cfg.m, cfg.o) if cfg.variant == "mlp" else spatial + (cfg.m, cfg.o)
        shapes["encoder.bias"] = (cfg.o,)
    for u in range(cfg.units):
        shapes[f"unit{u}.koopman"] = (cfg.o, cfg.o)
        if cfg.high_freq:
            shapes[f"unit{u}.high_freq"] = (cfg.hf_kernel,) * cfg.spatial_rank + (cfg.o, cfg.o)
    if cfg.use_decoder:
        shapes["decoder.weight"] = (cfg.o, cfg.m) if cfg.variant == "mlp" else spatial + (cfg.o, cfg.m)
        shapes["decoder.bias"] = (cfg.m,)
    return shapes


def count_parameters(cfg: CompactKNOConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _init_params(cfg: CompactKNOConfig) -> dict[str, Parameter]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".koopman"):
            value = np.eye(shape[0]) + 1e-2 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            wshape = param_shapes(cfg)[name.replace(".bias", ".weight")]
            bound = 1.0 / np.sqrt(np.prod(wshape[:-1]))
            value = rng.uniform(-bound, bound, shape)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[:-1]))
            value = rng.uniform(-bound, bound, shape)
        params[name] = Parameter(value, name)
    return params


def koopman_advance(spec: SpectralState, koopman: np.ndarray, steps: int) -> SpectralState:
    """Apply the channel operator ``koopman`` to every kept mode, ``steps`` times.

    The channel axis is the last axis of the coefficients; modes never mix.
    """
    if steps < 1:
        raise ValueError(f"koopman_advance: steps must be >= 1, got {steps}")
    k = np.asarray(koopman)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError("koopman_advance", "operator must be square", k.shape)
    if spec.coefficients.shape[-1] != k.shape[0]:
        raise ShapeError("koopman_advance", "channel dimension differs from operator size",
                         (spec.coefficients.shape, k.shape))
    c = spec.coefficients
    for _ in range(steps):
        c = c @ k.T
    return SpectralState(c, spec.modes_kept, spec.original_resolution, spec.axes, spec.norm_convention)


def kno_loss(pred, truth, recons: Sequence, originals: Sequence, lambda_p: float, lambda_r: float,
             batched: bool = False) -> Tensor:
    """Weighted prediction plus reconstruction error in Frobenius norm.

    With ``batched`` the first axis indexes samples; norms are taken per sample
    and averaged over the batch.
    """
    if lambda_p < 0 or lambda_r < 0:
        raise ValueError(f"loss weights must be non-negative, got ({lambda_p}, {lambda_r})")
    if len(recons) != len(originals):
        raise ValueError("reconstruction and original lists differ in length")

    def term(a, b):
        diff = ad.sub(a, b)
        if batched:
            axes = tuple(range(1, diff.ndim))
            per = ad.norm(diff, axes) if axes else ad.norm(ad.reshape(diff, diff.shape + (1,)), (1,))
            return ad.scale(ad.reduce_sum(per), 1.0 / diff.shape[0])
        return ad.norm(diff)

    total = ad.scale(term(pred, truth), lambda_p)
    for rec, orig in zip(recons, originals):
        total = ad.add(total, ad.scale(term(rec, orig), lambda_r))
    return total


class CompactKNO:
    """MLP-KNO / CNN-KNO with differentiable forward passes."""

    kind = "compact-kno"

    def __init__(self, config: CompactKNOConfig, params: dict[str, Parameter] | None = None):
        self.config = config
        self.params = _init_params(config) if params is None else params
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ConfigError(f"parameter names {sorted(self.params)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # -- bookkeeping -------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def _axes(self) -> tuple[int, ...]:
        return (-3, -2) if self.config.spatial_rank == 2 else (-2,)

    def _act(self, t: Tensor) -> Tensor:
        return ad.tanh(t) if self.config.activation == "tanh" else t

    def _check_window(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != cfg.spatial_rank + 2:
            raise ShapeError("encode", f"window must have rank {cfg.spatial_rank + 2} (batch, space, m)", x.shape)
        if x.shape[-1] != cfg.m:
            raise ShapeError("encode", f"window holds {x.shape[-1]} snapshots, config expects m={cfg.m}", x.shape)
        for n in x.shape[1:-1]:
            if cfg.variant == "cnn" and n < _CNN_KERNEL:
                raise ShapeError("encode", f"resolution {n} smaller than conv kernel {_CNN_KERNEL}", x.shape)
            if cfg.f > nyquist_count(n):
                raise SpectralError(f"mode count f={cfg.f} exceeds Nyquist count {nyquist_count(n)} at resolution {n}")

    def _linear_or_conv(self, x: Tensor, prefix: str) -> Tensor:
        w = self.params[f"{prefix}.weight"]
        b = self.params[f"{prefix}.bias"]
        if self.config.variant == "mlp":
            y = ad.matmul(x, w)
        else:
            y = ad.conv(x, w, padding=_CNN_KERNEL // 2, mode="circular")
        return ad.add(y, b)

    # -- stages ------------------------------------------------------------
    def encode(self, window) -> Tensor:
        x = ad.as_tensor(window)
        self._check_window(x)
        if self.config.scale != 1.0:
            x = ad.scale(x, 1.0 / self.config.scale)
        if not self.config.use_encoder:
            return x
        return self._act(self._linear_or_conv(x, "encoder"))

    def advance_latent(self, latent: Tensor, unit: int = 0) -> Tensor:
        """Parts 2-4: truncated FFT, Koopman power, inverse FFT."""
        cfg = self.config
        res = tuple(latent.shape[a] for a in self._axes)
        c = truncate(latent, cfg.f, self._axes)
        kt = ad.permute(self.params[f"unit{unit}.koopman"], (1, 0))
        for _ in range(cfg.r):
            c = ad.matmul(c, kt)
        return pad_inverse(c, res, cfg.f, self._axes)

    def high_freq_branch(self, latent, unit: int = 0) -> Tensor:
        latent = ad.as_tensor(latent)
        if not self.config.high_freq:
            return Tensor(np.zeros_like(latent.data))
        k = self.config.hf_kernel
        return ad.conv(latent, self.params[f"unit{unit}.high_freq"], padding=k // 2, mode="circular")

    def decode(self, latent) -> Tensor:
        latent = ad.as_tensor(latent)
        y = self._act(self._linear_or_conv(latent, "decoder")) if self.config.use_decoder else latent
        if self.config.scale != 1.0:
            y = ad.scale(y, self.config.scale)
        return y

    def combine_and_decode(self, low, high) -> Tensor:
        low, high = ad.as_tensor(low), ad.as_tensor(high)
        if low.shape != high.shape:
            raise ShapeError("combine_and_decode", "low and high branches differ in shape", (low.shape, high.shape))
        return self.decode(ad.add(low, high))

    # -- full passes -------------------------------------------------------
    def forward_window(self, window) -> Tensor:
        """Decoded predicted window, shape (B, *space, m)."""
        z = self.encode(window)
        for u in range(self.config.units):
            low = self.advance_latent(z, u)
            high = self.high_freq_branch(z, u)
            z = ad.add(low, high) if u < self.config.units - 1 else (low, high)
        low, high = z
        return self.combine_and_decode(low, high)

    def forward(self, window) -> Tensor:
        """Predicted next field (the latest snapshot of the decoded window)."""
        out = self.forward_window(window)
        m = self.config.m
        return ad.reshape(ad.take(out, m - 1, m), out.shape[:-1])

    def reconstruct(self, window) -> Tensor:
        return self.decode(self.encode(window))

    def loss(self, window, target, lambda_p: float, lambda_r: float) -> Tensor:
        window = ad.as_tensor(window)
        pred = self.forward(window)
        recon = self.reconstruct(window)
        m = self.config.m
        recons = [ad.take(recon, i, i + 1) for i in range(m)]
        origs = [Tensor(window.data[..., i:i + 1]) for i in range(m)]
        return kno_loss(pred, ad.as_tensor(target), recons, origs, lambda_p, lambda_r, batched=True)

    def koopman_matrix(self, unit: int = 0) -> Parameter:
        return self.params[f"unit{unit}.koopman"]

    # -- inference ---------------------------------------------------------
    def predict(self, window) -> np.ndarray:
        return self.forward(np.asarray(window, dtype=np.float64)).data

    def step_window(self, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One rollout step: returns (prediction, shifted window)."""
        pred = self.predict(window)
        return pred, np.concatenate([window[..., 1:], pred[..., None]], axis=-1)

    def initial_window(self, trajectory: np.ndarray, t: int) -> np.ndarray:
        """Window ending at time index ``t`` from a (S, T, *space) array."""
        m = self.config.m
        if t - m + 1 < 0:
            raise ValueError(f"time index {t} too early for a window of {m} snapshots")
        return np.moveaxis(trajectory[:, t - m + 1:t + 1], 1, -1)

    @classmethod
    def identity(cls, config: CompactKNOConfig) -> "CompactKNO":
        """Degenerate model: K = I, C = 0, identity encoder/decoder."""
        cfg = CompactKNOConfig.from_dict({**config.to_dict(), "activation": "identity", "o": config.m,
                                          "variant": "mlp"})
        model = cls(cfg)
        for name, p in model.params.items():
            if name.endswith(".koopman") or name.endswith(".weight"):
                p.data[...] = np.eye(p.shape[0])
            else:
                p.data[...] = 0.0
        return model
