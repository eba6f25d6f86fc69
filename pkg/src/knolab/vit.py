"""Transformer-style Koopman neural operator for coupled multi-variable fields.

Forward map for fields of shape (B, H, W, h)::

    g     = patch_embed(x)                               # (B, u, v, l)
    low   = merge_i( block_i^j( split_i(g) ) )           # per-head spectral Koopman blocks
    high  = C(g)                                         # high-frequency complement
    out   = decode( mix(low + high) )                    # (B, H, W, out_chans)

A spectral block on a head slice ``z`` computes
``ifft_pad(K · act(W · fft_truncate(z)))`` with ``act`` applied separately to
the real and imaginary parts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .kno import ConfigError
from .spectral import SpectralError, nyquist_count, pad_inverse, truncate

__all__ = [
    "ViTKNOConfig",
    "ViTKNO",
    "vit_param_shapes",
    "vit_count_parameters",
    "split_heads",
    "merge_heads",
    "lasso_penalty",
    "vit_loss",
]


@dataclass
class ViTKNOConfig:
    height: int = 64
    width: int = 32
    patch_h: int = 8
    patch_w: int = 8
    in_chans: int = 3
    out_chans: int = 3
    embed_dim: int = 64
    head_num: int = 4
    depth: int = 2
    modes: int = 8
    decoder: str = "mlp"
    parallel: bool = True
    high_freq: bool = True
    clip_modes: bool = True
    spectral_activation: str = "leaky_relu"
    mixer_activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch_h:
            raise ConfigError(f"patch height {self.patch_h} does not divide resolution height {self.height}")
        if self.width % self.patch_w:
            raise ConfigError(f"patch width {self.patch_w} does not divide resolution width {self.width}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.modes < 1:
            raise ConfigError("modes must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"head_num {self.head_num} must divide embed_dim {self.embed_dim}")
        if self.decoder not in ("mlp", "conv"):
            raise ConfigError(f"decoder must be 'mlp' or 'conv', got {self.decoder!r}")
        if self.spectral_activation not in ("leaky_relu", "identity"):
            raise ConfigError("spectral_activation must be 'leaky_relu' or 'identity'")
        if self.mixer_activation not in ("gelu", "identity"):
            raise ConfigError("mixer_activation must be 'gelu' or 'identity'")
        if not self.clip_modes:
            for n in self.token_grid:
                if self.modes > nyquist_count(n):
                    raise SpectralError(
                        f"mode count {self.modes} exceeds token-grid Nyquist count {nyquist_count(n)}")

    @property
    def heads(self) -> int:
        return self.head_num if self.parallel else 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.height // self.patch_h, self.width // self.patch_w

    @property
    def token_modes(self) -> tuple[int, int]:
        return tuple(min(self.modes, nyquist_count(n)) if self.clip_modes else self.modes
                     for n in self.token_grid)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTKNOConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def vit_param_shapes(cfg: ViTKNOConfig) -> dict[str, tuple[int, ...]]:
    p, q, l, dh = cfg.patch_h, cfg.patch_w, cfg.embed_dim, cfg.head_dim
    shapes = {
        "embed.weight": (p, q, cfg.in_chans, l),
        "embed.bias": (l,),
    }
    for i in range(cfg.heads):
        for d in range(cfg.depth):
            shapes[f"head{i}.block{d}.w"] = (dh, dh)
            shapes[f"head{i}.block{d}.koopman"] = (dh, dh)
    if cfg.high_freq:
        shapes["high_freq.weight"] = (3, 3, l, l)
    shapes.update({
        "mix.w1": (l, l),
        "mix.b1": (l,),
        "mix.w2": (l, l),
        "mix.b2": (l,),
        "decoder.weight": (l, p * q * cfg.out_chans),
        "decoder.bias": (p * q * cfg.out_chans,),
    })
    if cfg.decoder == "conv":
        shapes["decoder.refine"] = (3, 3, cfg.out_chans, cfg.out_chans)
        shapes["decoder.refine_bias"] = (cfg.out_chans,)
    return shapes


def vit_count_parameters(cfg: ViTKNOConfig) -> int:
    return int(sum(np.prod(s) for s in vit_param_shapes(cfg).values()))


def _init(cfg: ViTKNOConfig) -> dict[str, Parameter]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    shapes = vit_param_shapes(cfg)
    for name, shape in shapes.items():
        if name.endswith(".koopman"):
            value = np.eye(shape[0]) + 1e-2 * rng.standard_normal(shape)
        elif name.endswith(".w") and ".block" in name:
            value = np.eye(shape[0]) + 1e-2 * rng.standard_normal(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[:-1]))
            value = rng.uniform(-bound, bound, shape)
        out[name] = Parameter(value, name)
    return out


def split_heads(tokens, k: int) -> list[Tensor]:
    tokens = ad.as_tensor(tokens)
    l = tokens.shape[-1]
    if l % k:
        raise ShapeError("split_heads", f"{k} heads do not divide embedding width {l}", tokens.shape)
    d = l // k
    return [ad.take(tokens, i * d, (i + 1) * d) for i in range(k)]


def merge_heads(parts) -> Tensor:
    return ad.concat(parts, axis=-1)


def lasso_penalty(koopman, weight: float) -> Tensor:
    if weight < 0:
        raise ValueError(f"lasso weight must be non-negative, got {weight}")
    return ad.scale(ad.abs_sum(koopman), weight)


def vit_loss(preds, truths, recons, originals, lambda_p: float, lambda_r: float) -> Tensor:
    """Per-variable Frobenius errors summed over the last (variable) axis.

    Inputs have shape (B, H, W, h); norms are per sample and variable and the
    result is averaged over the batch.
    """
    if lambda_p < 0 or lambda_r < 0:
        raise ValueError(f"loss weights must be non-negative, got ({lambda_p}, {lambda_r})")
    preds, truths = ad.as_tensor(preds), ad.as_tensor(truths)
    recons, originals = ad.as_tensor(recons), ad.as_tensor(originals)
    for a, b in ((preds, truths), (recons, originals)):
        if a.shape != b.shape:
            raise ShapeError("vit_loss", "shapes differ", (a.shape, b.shape))
    axes = tuple(range(1, preds.ndim - 1))
    batch = preds.shape[0]

    def term(a, b):
        return ad.scale(ad.reduce_sum(ad.norm(ad.sub(a, b), axes)), 1.0 / batch)

    return ad.add(ad.scale(term(preds, truths), lambda_p), ad.scale(term(recons, originals), lambda_r))


class ViTKNO:
    kind = "vit-kno"

    def __init__(self, config: ViTKNOConfig, params: dict[str, Parameter] | None = None):
        self.config = config
        self.params = _init(config) if params is None else params
        expected = vit_param_shapes(config)
        if set(expected) != set(self.params):
            raise ConfigError("parameter names do not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def identity(cls, config: ViTKNOConfig) -> "ViTKNO":
        """Degenerate model whose full-band pipeline reproduces its input.

        Requires ``embed_dim == patch_h * patch_w * in_chans`` and
        ``in_chans == out_chans``; activations are forced to identity, the high
        frequency branch is dropped and the band is widened to Nyquist.
        """
        flat = config.patch_h * config.patch_w * config.in_chans
        if config.embed_dim != flat or config.in_chans != config.out_chans:
            raise ConfigError("identity model needs embed_dim = patch_h*patch_w*in_chans and in_chans = out_chans")
        d = config.to_dict()
        d.update(decoder="mlp", high_freq=False, spectral_activation="identity", mixer_activation="identity",
                 clip_modes=True, modes=max(nyquist_count(n) for n in config.token_grid))
        cfg = ViTKNOConfig(**d)
        params = {name: Parameter(np.zeros(shape), name) for name, shape in vit_param_shapes(cfg).items()}
        params["embed.weight"].data[:] = np.eye(flat).reshape(vit_param_shapes(cfg)["embed.weight"])
        for name, p in params.items():
            if p.ndim == 2 and p.shape[0] == p.shape[1]:
                p.data[:] = np.eye(p.shape[0])
        return cls(cfg, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def koopman_matrices(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.endswith(".koopman")]

    # -- parts -------------------------------------------------------------
    def patch_embed(self, fields_) -> Tensor:
        cfg = self.config
        x = ad.as_tensor(fields_)
        if x.ndim != 4:
            raise ShapeError("patch_embed", "fields must have shape (B, H, W, h)", x.shape)
        b, hgt, wid, c = x.shape
        if hgt % cfg.patch_h:
            raise ShapeError("patch_embed", f"height {hgt} not divisible by patch height {cfg.patch_h}", x.shape)
        if wid % cfg.patch_w:
            raise ShapeError("patch_embed", f"width {wid} not divisible by patch width {cfg.patch_w}", x.shape)
        if c != cfg.in_chans:
            raise ShapeError("patch_embed", f"expected {cfg.in_chans} channels", x.shape)
        u, v, p, q = hgt // cfg.patch_h, wid // cfg.patch_w, cfg.patch_h, cfg.patch_w
        t = ad.reshape(x, (b, u, p, v, q, c))
        t = ad.permute(t, (0, 1, 3, 2, 4, 5))
        t = ad.reshape(t, (b, u, v, p * q * c))
        w = ad.reshape(self.params["embed.weight"], (p * q * c, cfg.embed_dim))
        return ad.add(ad.matmul(t, w), self.params["embed.bias"])

    def _spectral_block(self, z: Tensor, head: int, depth: int) -> Tensor:
        cfg = self.config
        res = (z.shape[1], z.shape[2])
        modes = tuple(min(cfg.modes, nyquist_count(n)) if cfg.clip_modes else cfg.modes for n in res)
        c = truncate(z, modes, (1, 2))
        s = ad.matmul(c, ad.permute(self.params[f"head{head}.block{depth}.w"], (1, 0)))
        if cfg.spectral_activation == "leaky_relu":
            s = ad.make_complex(ad.leaky_relu(ad.real(s)), ad.leaky_relu(ad.imag(s)))
        c = ad.matmul(s, ad.permute(self.params[f"head{head}.block{depth}.koopman"], (1, 0)))
        return pad_inverse(c, res, modes, (1, 2))

    def koopman_token_block(self, tokens) -> Tensor:
        """Parts 2-4 over all heads: split, j spectral blocks per head, merge."""
        cfg = self.config
        tokens = ad.as_tensor(tokens)
        if tokens.ndim != 4 or tokens.shape[-1] != cfg.embed_dim:
            raise ShapeError("koopman_token_block", f"tokens must be (B, u, v, {cfg.embed_dim})", tokens.shape)
        outs = []
        for i, z in enumerate(split_heads(tokens, cfg.heads)):
            for d in range(cfg.depth):
                z = self._spectral_block(z, i, d)
            outs.append(z)
        return merge_heads(outs)

    def high_freq_tokens(self, tokens) -> Tensor:
        tokens = ad.as_tensor(tokens)
        if not self.config.high_freq:
            return Tensor(np.zeros_like(tokens.data))
        return ad.conv2d(tokens, self.params["high_freq.weight"], padding=1, mode="circular")

    @staticmethod
    def combine_high_freq(tokens_low, tokens_high) -> Tensor:
        lo, hi = ad.as_tensor(tokens_low), ad.as_tensor(tokens_high)
        if lo.shape != hi.shape:
            raise ShapeError("combine_high_freq", "token tensors differ in shape", (lo.shape, hi.shape))
        return ad.add(lo, hi)

    def channel_mixer(self, tokens) -> Tensor:
        p = self.params
        h = ad.add(ad.matmul(tokens, p["mix.w1"]), p["mix.b1"])
        if self.config.mixer_activation == "gelu":
            h = ad.gelu(h)
        return ad.add(ad.matmul(h, p["mix.w2"]), p["mix.b2"])

    def depatch_decode(self, tokens) -> Tensor:
        cfg = self.config
        tokens = ad.as_tensor(tokens)
        b, u, v, _ = tokens.shape
        p, q, c = cfg.patch_h, cfg.patch_w, cfg.out_chans
        y = ad.add(ad.matmul(tokens, self.params["decoder.weight"]), self.params["decoder.bias"])
        y = ad.reshape(y, (b, u, v, p, q, c))
        y = ad.permute(y, (0, 1, 3, 2, 4, 5))
        y = ad.reshape(y, (b, u * p, v * q, c))
        if cfg.decoder == "conv":
            y = ad.add(ad.conv2d(y, self.params["decoder.refine"], padding=1, mode="circular"),
                       self.params["decoder.refine_bias"])
        return y

    # -- full passes -------------------------------------------------------
    def forward(self, fields_) -> Tensor:
        g = self.patch_embed(fields_)
        low = self.koopman_token_block(g)
        u = self.combine_high_freq(low, self.high_freq_tokens(g))
        return self.depatch_decode(self.channel_mixer(u))

    def reconstruct(self, fields_) -> Tensor:
        return self.depatch_decode(self.patch_embed(fields_))

    def loss(self, x, y, lambda_p: float, lambda_r: float) -> Tensor:
        x = ad.as_tensor(x)
        return vit_loss(self.forward(x), y, self.reconstruct(x), x, lambda_p, lambda_r)

    def predict(self, fields_) -> np.ndarray:
        return self.forward(np.asarray(fields_, dtype=np.float64)).data

    def step_window(self, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pred = self.predict(window)
        return pred, pred

    def initial_window(self, trajectory: np.ndarray, t: int) -> np.ndarray:
        return trajectory[:, t]
