"""Command-line entry point: ``knolab <gen|train|eval|mesh-study|dmd|report>``.

Exit codes
----------
0   success
1   unexpected internal error
2   usage error (unknown flag, missing argument)
3   container has a bad magic number
4   container payload is truncated
5   container format version is unsupported
6   container dims disagree with the payload or the header is malformed
7   invalid configuration or shape (e.g. patch size does not divide the grid)
8   mode count above the Nyquist count of the grid
9   numerical failure (solver blow-up, non-finite loss, singular Gram matrix)
10  file not found or unreadable
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__
from .analysis import AnalysisError, companion_spectrum, convergence_study, write_convergence_csv
from .autodiff import AutodiffError, ShapeError
from .io import (BadMagicError, ContainerError, DimsMismatchError, TruncatedPayloadError, VersionMismatchError,
                 load_checkpoint, load_dataset, model_from_bundle, save_checkpoint, save_dataset)
from .kno import CompactKNO, CompactKNOConfig, ConfigError
from .metrics import MetricError, mesh_independence_study, read_report_csv, rollout, rollout_report, save_heatmaps
from .pde import (BurgersConfig, CoupledFieldsConfig, NS2DConfig, SolverError,
                  downsample, gen_coupled_fields, sample_grf, solve_burgers, solve_ns_vorticity)
from .spectral import SpectralError
from .systems import SYSTEMS
from .train import TrainConfig, TrainError, make_pairs, parse_config_text, train
from .vit import ViTKNO, ViTKNOConfig

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
EXIT_BAD_MAGIC, EXIT_TRUNCATED, EXIT_VERSION, EXIT_CONTAINER = 3, 4, 5, 6
EXIT_CONFIG, EXIT_SPECTRAL, EXIT_NUMERICAL, EXIT_IO = 7, 8, 9, 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def exit_code_for(exc: BaseException) -> int:
    """Documented exit code for an exception raised by a subcommand."""
    table = [
        (UsageError, EXIT_USAGE),
        (BadMagicError, EXIT_BAD_MAGIC),
        (TruncatedPayloadError, EXIT_TRUNCATED),
        (VersionMismatchError, EXIT_VERSION),
        (DimsMismatchError, EXIT_CONTAINER),
        (ContainerError, EXIT_CONTAINER),
        (SpectralError, EXIT_SPECTRAL),
        (SolverError, EXIT_NUMERICAL),
        (TrainError, EXIT_NUMERICAL),
        (FloatingPointError, EXIT_NUMERICAL),
        (AnalysisError, EXIT_NUMERICAL),
        (ConfigError, EXIT_CONFIG),
        (ShapeError, EXIT_CONFIG),
        (MetricError, EXIT_CONFIG),
        (AutodiffError, EXIT_CONFIG),
        (ValueError, EXIT_CONFIG),
        (OSError, EXIT_IO),
    ]
    for cls, code in table:
        if isinstance(exc, cls):
            return code
    return EXIT_INTERNAL


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    with open(path) as fh:
        return parse_config_text(fh.read())


def _write_manifest(out_dir: str, command: str, args: argparse.Namespace, config: dict, outputs: list[str]) -> None:
    canonical = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "seed": args.seed,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "outputs": sorted(os.path.basename(o) for o in outputs),
        "versions": {"knolab": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: dict) -> int:
    out = _outdir(args.out)
    seed = args.seed
    if args.pde == "burgers":
        res = args.resolution or 1024
        bc = BurgersConfig(N=res, nu=args.nu if args.nu is not None else 0.1, dt=args.dt or 1e-3,
                           T=args.T if args.T is not None else 1.0, record_stride=args.record_stride or 20, seed=seed)
        u0 = sample_grf(bc.grf, res, seed, n=args.samples)
        traj = solve_burgers(u0, bc)
    elif args.pde == "ns":
        res = args.resolution or 64
        nc = NS2DConfig(N=res, nu=args.nu if args.nu is not None else 1e-3, dt=args.dt or 5e-3,
                        T=args.T if args.T is not None else 10.0, record_stride=args.record_stride or 200,
                        forcing=args.forcing, seed=seed)
        w0 = sample_grf(nc.grf, (res, res), seed, n=args.samples)
        traj = solve_ns_vorticity(w0, nc)
    else:
        cc = CoupledFieldsConfig(height=args.height, width=args.width, seed=seed)
        traj = gen_coupled_fields(cc, args.samples)
    if args.downsample > 1:
        traj = downsample(traj, args.downsample)
    path = os.path.join(out, "data.kltj")
    save_dataset(path, traj)
    _write_manifest(out, "gen", args, {**vars(args), **cfg}, [path, path + ".meta"])
    return EXIT_OK


_MODEL_KEYS = {"o", "f", "r", "m", "units", "activation", "high_freq", "high_freq_kernel", "scale",
               "patch_h", "patch_w", "embed_dim", "head_num", "depth", "modes", "decoder", "clip_modes"}


def _cast(value: str):
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    return value


def _build_model(kind: str, data: np.ndarray, opts: dict, seed: int):
    if kind in ("mlp", "cnn"):
        spatial = data.ndim - 2
        cfg = CompactKNOConfig(variant=kind, spatial_rank=spatial, seed=seed, **opts)
        return CompactKNO(cfg)
    if data.ndim != 5:
        raise ConfigError(f"ViT-KNO expects data of shape (S, T, H, W, C), got {data.shape}")
    _, _, h, w, c = data.shape
    cfg = ViTKNOConfig(height=h, width=w, in_chans=c, out_chans=c, seed=seed, **opts)
    return ViTKNO(cfg)


def cmd_train(args, cfg: dict) -> int:
    out = _outdir(args.out)
    traj = load_dataset(args.data)
    model_opts = {k[6:]: _cast(v) for k, v in cfg.items() if k.startswith("model.")}
    for key in ("o", "f", "m", "r"):
        if getattr(args, key) is not None:
            model_opts[key] = getattr(args, key)
    if args.model == "vit":
        model_opts = {("modes" if k == "f" else k): v for k, v in model_opts.items() if k not in ("o", "m", "r")}
    unknown = set(model_opts) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    model = _build_model(args.model, traj.data, model_opts, args.seed)
    train_opts = {k: v for k, v in cfg.items() if not k.startswith("model.")}
    train_opts["seed"] = args.seed
    if args.epochs is not None:
        train_opts["epochs"] = args.epochs
    if args.batch_size is not None:
        train_opts["batch_size"] = args.batch_size
    if args.model == "vit":
        train_opts.setdefault("schedule", "cosine")
        train_opts.setdefault("lambda_p", 0.9)
        train_opts.setdefault("lambda_r", 0.1)
    tc = TrainConfig.from_dict(train_opts)
    pairs = make_pairs(traj.data, model, tc.prediction_gap)
    result = train(model, pairs, tc)
    ck = os.path.join(out, "checkpoint.klck")
    save_checkpoint(ck, result.checkpoint)
    loss_csv = os.path.join(out, "loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(result.history):
            fh.write(f"{e},{v!r}\n")
    _write_manifest(out, "train", args, {"model": model.config.to_dict(), "train": tc.to_dict()}, [ck, loss_csv])
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    out = _outdir(args.out)
    model = model_from_bundle(load_checkpoint(args.checkpoint))
    data = load_dataset(args.data).data
    if args.start is None:
        args.start = getattr(model.config, "m", 1) - 1
    clim = data.mean(axis=(0, 1))
    rep = rollout_report(model, data, args.start, args.steps, climatology=clim)
    path = os.path.join(out, "metrics.csv")
    rep.to_csv(path)
    outputs = [path]
    if args.heatmaps:
        preds = rollout(model, model.initial_window(data[:1], args.start), args.steps).data
        for s in range(args.steps):
            p, t = preds[0, s], data[0, args.start + s + 1]
            if p.ndim == 3:
                p, t = p[..., 0], t[..., 0]
            png = os.path.join(out, f"heatmap_step{s + 1}.png")
            save_heatmaps(png, p, t, title=f"step {s + 1}")
            outputs.append(png)
    _write_manifest(out, "eval", args, {"checkpoint": args.checkpoint, "data": args.data, "start": args.start,
                                        "steps": args.steps}, outputs)
    return EXIT_OK


def cmd_mesh_study(args, cfg: dict) -> int:
    out = _outdir(args.out)
    model = model_from_bundle(load_checkpoint(args.checkpoint))
    if not isinstance(model, CompactKNO):
        raise ConfigError("mesh-study requires a compact KNO checkpoint")
    fine = load_dataset(args.data)
    sets = {}
    for factor in _ints(args.factors):
        traj = downsample(fine, factor)
        sets[traj.resolution[0]] = make_pairs(traj.data, model, 1)
    rep = mesh_independence_study(model, sets)
    path = os.path.join(out, "mesh.csv")
    rep.to_csv(path)
    _write_manifest(out, "mesh-study", args, {"checkpoint": args.checkpoint, "data": args.data,
                                              "factors": args.factors}, [path])
    return EXIT_OK


def cmd_dmd(args, cfg: dict) -> int:
    out = _outdir(args.out)
    if args.system not in SYSTEMS:
        raise UsageError(f"unknown system {args.system!r}; choose from {sorted(SYSTEMS)}")
    system = SYSTEMS[args.system]
    m_list = _ints(args.m)
    if not m_list:
        raise UsageError("--m needs at least one delay dimension")
    rows = convergence_study(system.series, m_list, system.r, system.reference)
    path = os.path.join(out, "convergence.csv")
    write_convergence_csv(rows, path)
    rep = companion_spectrum(system.series(max(m_list) + system.r), system.r, m=max(m_list), reference=system.reference)
    spec_path = os.path.join(out, "eigenvalues.csv")
    with open(spec_path, "w") as fh:
        fh.write("real,imag\n")
        for z in rep.eigenvalues:
            fh.write(f"{z.real!r},{z.imag!r}\n")
    _write_manifest(out, "dmd", args, {"system": args.system, "m": m_list, "r": system.r}, [path, spec_path])
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    rep = read_report_csv(args.csv)
    lines = [f"report: {args.csv}", f"rows: {len(rep.rows)}"]
    for col in rep.columns:
        v = rep.column(col)
        lines.append(f"{col:>24s}  min {v.min():.6g}  max {v.max():.6g}  mean {v.mean():.6g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="knolab", description="Koopman neural operator experiments.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="limit BLAS/FFT thread pools")
    p.add_argument("--config", default=None, help="flat key = value config file")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--pde", choices=("burgers", "ns", "coupled"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=8)
    g.add_argument("--resolution", type=int, default=None)
    g.add_argument("--nu", type=float, default=None)
    g.add_argument("--dt", type=float, default=None)
    g.add_argument("--T", type=float, default=None)
    g.add_argument("--record-stride", type=int, default=None)
    g.add_argument("--forcing", choices=("default", "none"), default="default")
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--downsample", type=int, default=1)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=("mlp", "cnn", "vit"), default="mlp")
    t.add_argument("--o", type=int, default=None)
    t.add_argument("--f", type=int, default=None)
    t.add_argument("--m", type=int, default=None)
    t.add_argument("--r", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)

    e = sub.add_parser("eval", help="rollout metrics against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--start", type=int, default=None)
    e.add_argument("--steps", type=int, default=1)
    e.add_argument("--heatmaps", action="store_true")

    ms = sub.add_parser("mesh-study", help="evaluate one checkpoint across resolutions")
    ms.add_argument("--checkpoint", required=True)
    ms.add_argument("--data", required=True, help="dataset at the finest resolution")
    ms.add_argument("--factors", default="1,2,4,8")
    ms.add_argument("--out", required=True)

    d = sub.add_parser("dmd", help="companion-matrix convergence study")
    d.add_argument("--system", default="rotation")
    d.add_argument("--m", default="2,8,32,128")
    d.add_argument("--out", required=True)

    r = sub.add_parser("report", help="summarise a CSV report")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", default=None)
    return p


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "mesh-study": cmd_mesh_study,
             "dmd": cmd_dmd, "report": cmd_report}


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = _read_config(args.config)
        with _threads(args.threads):
            return _COMMANDS[args.command](args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = exit_code_for(exc)
        sys.stderr.write(f"knolab: error: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
