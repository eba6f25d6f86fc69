import csv
import json
import os

import numpy as np
import pytest

from knolab.cli import exit_code_for, main
from knolab.io import bundle_from_model, load_dataset, save_checkpoint, save_dataset
from knolab.kno import CompactKNO, CompactKNOConfig
from knolab.pde import TrajectorySet
from knolab.spectral import nyquist_count


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def burgers_dir(tmp_path):
    out = tmp_path / "burgers"
    assert run("--seed", 7, "gen", "--pde", "burgers", "--out", out, "--samples", 6, "--resolution", 64,
               "--T", 0.1, "--record-stride", 10) == 0
    return out


def test_gen_deterministic(tmp_path, burgers_dir):
    again = tmp_path / "again"
    assert run("--seed", 7, "gen", "--pde", "burgers", "--out", again, "--samples", 6, "--resolution", 64,
               "--T", 0.1, "--record-stride", 10) == 0
    for name in ("data.kltj", "data.kltj.meta"):
        assert (burgers_dir / name).read_bytes() == (again / name).read_bytes()
    m1 = json.loads((burgers_dir / "manifest.json").read_text())
    m2 = json.loads((again / "manifest.json").read_text())
    assert m1["config_hash"] != m2["config_hash"]  # --out differs
    assert m1["seed"] == 7 and "numpy" in m1["versions"] and m1["outputs"] == ["data.kltj", "data.kltj.meta"]


def test_gen_ns_and_coupled(tmp_path):
    assert run("gen", "--pde", "ns", "--out", tmp_path / "ns", "--samples", 2, "--resolution", 16, "--T", 0.1,
               "--dt", 0.01, "--record-stride", 5, "--downsample", 2) == 0
    assert load_dataset(tmp_path / "ns" / "data.kltj").data.shape == (2, 3, 8, 8)
    assert run("gen", "--pde", "coupled", "--out", tmp_path / "cf", "--samples", 2, "--height", 16,
               "--width", 8) == 0
    assert load_dataset(tmp_path / "cf" / "data.kltj").data.shape == (2, 9, 16, 8, 3)


def test_train_eval_mesh_report(tmp_path, burgers_dir):
    data = burgers_dir / "data.kltj"
    out = tmp_path / "run"
    assert run("train", "--data", data, "--out", out, "--o", 4, "--f", 4, "--epochs", 2, "--batch-size", 8) == 0
    assert [r["epoch"] for r in read_csv(out / "loss.csv")] == ["0", "1"]
    ck = out / "checkpoint.klck"
    assert run("eval", "--checkpoint", ck, "--data", data, "--out", out / "eval", "--steps", 3) == 0
    rows = read_csv(out / "eval" / "metrics.csv")
    assert len(rows) == 3 and {"acc", "persistence_relative_l2"} <= set(rows[0])
    assert run("mesh-study", "--checkpoint", ck, "--data", data, "--factors", "1,2", "--out", out / "mesh") == 0
    assert [r["resolution"] for r in read_csv(out / "mesh" / "mesh.csv")] == ["32", "64"]
    assert run("report", "--csv", out / "mesh" / "mesh.csv", "--out", out / "summary.txt") == 0
    assert "rows: 2" in (out / "summary.txt").read_text()
    for sub in ("", "eval", "mesh"):
        assert os.path.exists(out / sub / "manifest.json")


def test_train_with_config_file(tmp_path, burgers_dir):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 1\nbatch_size = 4\nmodel.o = 3\nmodel.f = 3\nschedule = cosine\n")
    out = tmp_path / "run"
    assert run("--config", cfg, "train", "--data", burgers_dir / "data.kltj", "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["o"] == 3 and manifest["config"]["train"]["schedule"] == "cosine"


def test_eval_identity_checkpoint_zero_error(tmp_path):
    n = 16
    base = np.random.default_rng(0).standard_normal((3, 1, n))
    data = np.tile(base, (1, 6, 1))  # constant in time
    save_dataset(tmp_path / "d.kltj", TrajectorySet(data, 0.1))
    model = CompactKNO.identity(CompactKNOConfig(m=1, f=nyquist_count(n)))
    save_checkpoint(tmp_path / "id.klck", bundle_from_model(model))
    assert run("eval", "--checkpoint", tmp_path / "id.klck", "--data", tmp_path / "d.kltj", "--out",
               tmp_path / "e", "--steps", 4) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert len(rows) == 4
    assert all(float(r["relative_l2"]) < 1e-12 and float(r["rmse"]) < 1e-12 for r in rows)


def test_eval_heatmaps(tmp_path, burgers_dir):
    pytest.importorskip("matplotlib")
    model = CompactKNO(CompactKNOConfig(o=3, f=3, m=1))
    save_checkpoint(tmp_path / "c.klck", bundle_from_model(model))
    assert run("eval", "--checkpoint", tmp_path / "c.klck", "--data", burgers_dir / "data.kltj", "--out",
               tmp_path / "e", "--steps", 2, "--heatmaps") == 0
    assert os.path.getsize(tmp_path / "e" / "heatmap_step2.png") > 0


def test_dmd_rotation(tmp_path):
    assert run("dmd", "--system", "rotation", "--m", "2,8,32,128", "--out", tmp_path) == 0
    d = [float(r["distance"]) for r in read_csv(tmp_path / "convergence.csv")]
    assert len(d) == 4 and all(b <= a for a, b in zip(d, d[1:]))
    assert len(read_csv(tmp_path / "eigenvalues.csv")) == 2


# -- error injection ------------------------------------------------------

def test_usage_errors(tmp_path):
    assert run("--bogus") == 2
    assert run() == 2
    assert run("gen", "--out", tmp_path) == 2
    assert run("dmd", "--system", "lorenz", "--out", tmp_path) == 2
    assert run("dmd", "--m", "2,x", "--out", tmp_path) == 2


def test_bad_magic_exit_code(tmp_path, burgers_dir):
    raw = bytearray((burgers_dir / "data.kltj").read_bytes())
    raw[:4] = b"ABCD"
    (tmp_path / "bad.kltj").write_bytes(bytes(raw))
    assert run("train", "--data", tmp_path / "bad.kltj", "--out", tmp_path / "o") == 3


def test_truncated_exit_code(tmp_path, burgers_dir):
    raw = (burgers_dir / "data.kltj").read_bytes()
    (tmp_path / "t.kltj").write_bytes(raw[:-16])
    assert run("train", "--data", tmp_path / "t.kltj", "--out", tmp_path / "o") == 4


def test_version_and_dims_exit_codes(tmp_path, burgers_dir):
    raw = bytearray((burgers_dir / "data.kltj").read_bytes())
    raw[4] = 9
    (tmp_path / "v.kltj").write_bytes(bytes(raw))
    assert run("report", "--csv", "missing.csv") == 10
    assert run("train", "--data", tmp_path / "v.kltj", "--out", tmp_path / "o") == 5
    (tmp_path / "x.kltj").write_bytes((burgers_dir / "data.kltj").read_bytes() + b"\0" * 8)
    assert run("train", "--data", tmp_path / "x.kltj", "--out", tmp_path / "o") == 6


def test_indivisible_patch_exit_code(tmp_path):
    assert run("gen", "--pde", "coupled", "--out", tmp_path / "cf", "--samples", 2, "--height", 16,
               "--width", 8) == 0
    cfg = tmp_path / "vit.cfg"
    cfg.write_text("model.patch_h = 3\nmodel.patch_w = 4\nmodel.embed_dim = 8\nmodel.head_num = 2\n")
    assert run("--config", cfg, "train", "--model", "vit", "--data", tmp_path / "cf" / "data.kltj", "--out",
               tmp_path / "o", "--epochs", 1) == 7


def test_f_above_nyquist_exit_code(tmp_path, burgers_dir):
    assert run("train", "--data", burgers_dir / "data.kltj", "--out", tmp_path / "o", "--f", 40,
               "--epochs", 1) == 8
    model = CompactKNO(CompactKNOConfig(o=3, f=20, m=1))
    save_checkpoint(tmp_path / "c.klck", bundle_from_model(model))
    assert run("mesh-study", "--checkpoint", tmp_path / "c.klck", "--data", burgers_dir / "data.kltj",
               "--factors", "1,4", "--out", tmp_path / "m") == 8


def test_exit_code_table():
    from knolab.pde import SolverError
    from knolab.train import TrainError

    assert exit_code_for(SolverError("x")) == 9
    assert exit_code_for(TrainError("x")) == 9
    assert exit_code_for(ValueError("x")) == 7
    assert exit_code_for(FileNotFoundError("x")) == 10
    assert exit_code_for(RuntimeError("x")) == 1
