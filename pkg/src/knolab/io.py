"""Binary containers for trajectory datasets (KLTJ) and checkpoints (KLCK).

KLTJ v1::

    b"KLTJ" | u32 version | u32 rank | rank x u64 dims | u8 dtype code | f64 LE payload

KLCK v1::

    b"KLCK" | u32 version | u16 len + kind tag | u32 len + config text
    | u32 tensor count | per tensor: u16 len + name, u32 rank, rank x u64 dims, f64 LE payload

All integers are little-endian. Datasets carry a sidecar ``<path>.meta`` text
file with ``key = value`` lines.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .kno import CompactKNO, CompactKNOConfig
from .pde import TrajectorySet
from .vit import ViTKNO, ViTKNOConfig

__all__ = [
    "ContainerError",
    "BadMagicError",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "DimsMismatchError",
    "CheckpointBundle",
    "save_array",
    "load_array",
    "save_dataset",
    "load_dataset",
    "write_metadata",
    "read_metadata",
    "save_checkpoint",
    "load_checkpoint",
    "bundle_from_model",
    "model_from_bundle",
]

DATASET_MAGIC = b"KLTJ"
CHECKPOINT_MAGIC = b"KLCK"
FORMAT_VERSION = 1
DTYPE_F64 = 1


class ContainerError(ValueError):
    code = 6


class BadMagicError(ContainerError):
    code = 3

    def __init__(self, expected: bytes, found: bytes):
        self.expected, self.found = expected, found
        super().__init__(f"bad magic: expected {expected!r}, found {found!r}")


class TruncatedPayloadError(ContainerError):
    code = 4

    def __init__(self, expected: int, actual: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"truncated payload: expected {expected} bytes, found {actual}")


class VersionMismatchError(ContainerError):
    code = 5

    def __init__(self, found: int):
        self.found = found
        super().__init__(f"unsupported format version {found} (this build reads version {FORMAT_VERSION})")


class DimsMismatchError(ContainerError):
    code = 6

    def __init__(self, expected: int, actual: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"declared dims imply {expected} bytes but the file holds {actual}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(self.pos + n, len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dims: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def _check_magic(r: _Reader, magic: bytes) -> None:
    found = r.buf[:4]
    if found != magic:
        raise BadMagicError(magic, found)
    r.pos = 4
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)


def _f64_payload(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        raise ContainerError("containers store real f64 tensors only")
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# ---------------------------------------------------------------------------
# datasets


def save_array(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    header = DATASET_MAGIC + struct.pack("<II", FORMAT_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<B", DTYPE_F64)
    with open(path, "wb") as fh:
        fh.write(header + _f64_payload(a))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_magic(r, DATASET_MAGIC)
    (rank,) = r.unpack("I")
    dims = r.unpack(f"{rank}Q")
    (code,) = r.unpack("B")
    if code != DTYPE_F64:
        raise ContainerError(f"unknown dtype code {code}")
    expected = r.pos + 8 * int(np.prod(dims, dtype=np.int64))
    if len(r.buf) < expected:
        raise TruncatedPayloadError(expected, len(r.buf))
    if len(r.buf) > expected:
        raise DimsMismatchError(expected, len(r.buf))
    return r.array(tuple(dims))


def write_metadata(path, meta: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(meta):
            fh.write(f"{key} = {meta[key]}\n")


def read_metadata(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ContainerError(f"malformed metadata line {line!r}")
            out[key.strip()] = value.strip()
    return out


def save_dataset(path, traj: TrajectorySet) -> None:
    """Container plus ``path + '.meta'`` sidecar."""
    if not np.all(np.isfinite(traj.data)):
        raise ContainerError("refusing to save a dataset with non-finite values")
    save_array(path, traj.data)
    meta = dict(traj.meta)
    meta.update(eps=repr(float(traj.eps)), extents=",".join(repr(float(e)) for e in traj.extents),
                variables=",".join(traj.variables))
    write_metadata(str(path) + ".meta", meta)


def load_dataset(path) -> TrajectorySet:
    data = load_array(path)
    meta_path = str(path) + ".meta"
    meta = read_metadata(meta_path) if os.path.exists(meta_path) else {}
    eps = float(meta.pop("eps", 1.0))
    extents = tuple(float(e) for e in meta.pop("extents", "1.0").split(","))
    variables = tuple(meta.pop("variables", "u").split(","))
    return TrajectorySet(data, eps, extents, variables, meta)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointBundle:
    kind: str
    config_text: str
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def config(self) -> dict:
        return json.loads(self.config_text) if self.config_text else {}


def save_checkpoint(path, bundle: CheckpointBundle) -> None:
    kind = bundle.kind.encode()
    text = bundle.config_text.encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IH", FORMAT_VERSION, len(kind)), kind,
             struct.pack("<I", len(text)), text, struct.pack("<I", len(bundle.tensors))]
    for name, a in bundle.tensors.items():
        a = np.asarray(a, dtype=np.float64)
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), _f64_payload(a)]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_magic(r, CHECKPOINT_MAGIC)
    (klen,) = r.unpack("H")
    kind = r.take(klen).decode()
    (tlen,) = r.unpack("I")
    text = r.take(tlen).decode()
    (count,) = r.unpack("I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("I")
        dims = r.unpack(f"{rank}Q")
        tensors[name] = r.array(tuple(dims))
    if r.pos != len(r.buf):
        raise DimsMismatchError(r.pos, len(r.buf))
    return CheckpointBundle(kind, text, tensors)


_KINDS = {CompactKNO.kind: (CompactKNO, CompactKNOConfig), ViTKNO.kind: (ViTKNO, ViTKNOConfig)}


def bundle_from_model(model, extra: dict | None = None, train_config: dict | None = None) -> CheckpointBundle:
    """Model parameters (prefixed ``param.``) plus optional extra tensors."""
    text = json.dumps({"model": model.config.to_dict(), "train": train_config or {}}, sort_keys=True)
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.params.items():
        tensors["param." + name] = p.data.copy()
    for name, a in (extra or {}).items():
        tensors[name] = np.asarray(a, dtype=np.float64).copy()
    return CheckpointBundle(model.kind, text, tensors)


def model_from_bundle(bundle: CheckpointBundle):
    if bundle.kind not in _KINDS:
        raise ContainerError(f"unknown model kind {bundle.kind!r}")
    cls, cfg_cls = _KINDS[bundle.kind]
    cfg = cfg_cls.from_dict(bundle.config["model"])
    params = {name[6:]: Parameter(a.copy(), name=name[6:])
              for name, a in bundle.tensors.items() if name.startswith("param.")}
    return cls(cfg, params)
