"""CLI contract: subcommand behavior, file formats, exit codes."""

import json
import os

import numpy as np
import pytest

from cops import bounds as B
from cops import dynamics as D
from cops import pipeline as P
from cops.cli import run, read_field, write_field, render_field, PALETTES


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rc = run(["generate", "--pde", "diffusion", "--grid", "8", "--traj", "10",
              "--steps", "4", "--seed", "3", "--t-train", "2", "--out", str(d)])
    assert rc == 0
    return str(d)


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("ckpt")
    cfg_path = tmp_path_factory.mktemp("cfg") / "cfg.json"
    cfg = P.ModelConfig(grid_h=8, grid_w=8, width=8, mfn_layers=2, n_scales=2,
                        n_layers=1, batch_size=4, micro_batch=2, epochs=1,
                        seed=0, subsample_ratio=0.5, val_every=1)
    cfg_path.write_text(cfg.to_json())
    rc = run(["train", "--data", data_dir, "--out", str(d),
              "--config", str(cfg_path), "--quiet"])
    assert rc == 0
    return str(d)


def test_generate_writes_manifest(data_dir):
    manifest = json.loads(open(os.path.join(data_dir, "manifest.json")).read())
    assert manifest["grid"] == [8, 8]
    assert len(manifest["files"]) == 10
    assert all(os.path.exists(os.path.join(data_dir, f)) for f in manifest["files"])


def test_train_writes_checkpoint_and_curve(ckpt_dir):
    assert os.path.exists(os.path.join(ckpt_dir, "manifest.json"))
    assert os.path.exists(os.path.join(ckpt_dir, "params.bin"))
    assert os.path.exists(os.path.join(ckpt_dir, "loss_curve.csv"))


def test_predict_bit_identical_across_runs(tmp_path, ckpt_dir):
    obs = tmp_path / "obs.csv"
    rows = ["x,y,u0"] + [f"{x},{y},{v}" for x, y, v in
                         [(0.1, 0.2, 0.5), (0.4, 0.8, -0.3), (0.7, 0.5, 0.1),
                          (0.9, 0.1, 0.0), (0.3, 0.6, 0.2)]]
    obs.write_text("\n".join(rows) + "\n")
    q = tmp_path / "q.csv"
    q.write_text("x,y\n0.25,0.25\n0.75,0.75\n")
    out1, out2 = tmp_path / "p1.csv", tmp_path / "p2.csv"
    rc1 = run(["predict", "--model", ckpt_dir, "--obs", str(obs), "--queries", str(q),
               "--times", "1.0,1.5", "--out", str(out1)])
    rc2 = run(["predict", "--model", ckpt_dir, "--obs", str(obs), "--queries", str(q),
               "--times", "1.0,1.5", "--out", str(out2)])
    assert rc1 == rc2 == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().strip().splitlines()
    assert lines[0] == "t,x,y,u0"
    assert len(lines) == 5


def test_predict_accepts_time_column(tmp_path, ckpt_dir):
    obs = tmp_path / "obs.csv"
    obs.write_text("x,y,u0\n0.1,0.2,0.5\n0.4,0.8,-0.3\n0.7,0.5,0.1\n0.9,0.1,0.0\n")
    q = tmp_path / "qt.csv"
    q.write_text("t,x,y\n1.0,0.25,0.25\n0.5,0.75,0.75\n")
    out = tmp_path / "p.csv"
    assert run(["predict", "--model", ckpt_dir, "--obs", str(obs),
                "--queries", str(q), "--out", str(out)]) == 0


def test_evaluate_writes_tag_csv(tmp_path, ckpt_dir, data_dir):
    out = tmp_path / "metrics.csv"
    curve = tmp_path / "curve.csv"
    rc = run(["evaluate", "--model", ckpt_dir, "--data", data_dir, "--ratio", "0.5",
              "--out", str(out), "--curve-out", str(curve)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "tag,mse,steps"
    tags = {l.split(",")[0] for l in lines[1:]}
    assert "In-s/In-t" in tags and "Ext-s/Ext-t" in tags
    assert curve.read_text().startswith("tag,t,mse")


def test_ablate_emits_config(tmp_path):
    cfg = P.ModelConfig(grid_h=8, grid_w=8, width=8)
    src = tmp_path / "cfg.json"
    src.write_text(cfg.to_json())
    out = tmp_path / "ablated.json"
    rc = run(["ablate", "--variant", "no-nac", "--config", str(src), "--out", str(out)])
    assert rc == 0
    emitted = P.ModelConfig.from_json(out.read_text())
    assert emitted.lam == 0.0 and emitted.variant == "no-nac"


def test_verify_bound_matches_bound_at(tmp_path):
    out = tmp_path / "bound.csv"
    rc = run(["verify-bound", "--kappa", "0.5", "--lf", "1.0", "--dt", "0.5",
              "--eode", "0.01", "--deltac", "0.001", "--k", "50", "--e0", "0.2",
              "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "k,e_measured,bound,slack"
    p = B.BoundParams(lip=1.0, dt_corr=0.5, kappa=0.5, delta_c=0.001,
                      e_ode=0.01, e0=0.2)
    last = lines[-1].split(",")
    assert int(last[0]) == 50
    assert abs(float(last[2]) - B.bound_at(50, p)[0]) < 1e-9


def test_verify_bound_certify_mode(tmp_path):
    out = tmp_path / "cert.csv"
    rc = run(["verify-bound", "--kappa", "0.5", "--lf", "1.0", "--dt", "0.5",
              "--deltac", "0.001", "--k", "20", "--certify", "--dim", "8",
              "--seed", "5", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().strip().splitlines()[1:]
    assert len(rows) == 21
    assert all(float(r.split(",")[3]) >= -1e-12 for r in rows)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def test_field_file_roundtrip(tmp_path):
    field = np.random.default_rng(0).normal(size=(5, 7, 2)).astype(np.float32)
    path = tmp_path / "f.fld"
    write_field(str(path), field)
    assert np.array_equal(read_field(str(path)), field)


def test_render_constant_field_uniform_image(tmp_path):
    ppm = tmp_path / "c.ppm"
    render_field(np.full((4, 6), 3.3, dtype=np.float32), str(ppm), "gray",
                 csv_path=str(tmp_path / "c.csv"))
    raw = ppm.read_bytes()
    header, pixels = raw.split(b"255\n", 1)
    assert header == b"P6\n6 4\n"
    assert len(pixels) == 4 * 6 * 3
    assert len(set(pixels)) == 1
    csv_lines = (tmp_path / "c.csv").read_text().strip().splitlines()[1:]
    assert all(l.endswith("3.299999952316284") for l in csv_lines)


def test_render_minmax_maps_to_palette_ends(tmp_path):
    field = np.array([[0.0, 1.0]], dtype=np.float32)
    ppm = tmp_path / "m.ppm"
    render_field(field, str(ppm), "gray")
    pixels = ppm.read_bytes().split(b"255\n", 1)[1]
    assert pixels[:3] == bytes(PALETTES["gray"][0])
    assert pixels[3:6] == bytes(PALETTES["gray"][-1])


def test_render_csv_roundtrip_bit_exact(tmp_path):
    field = np.random.default_rng(1).normal(size=(6, 6)).astype(np.float32)
    render_field(field, str(tmp_path / "r.ppm"), "coolwarm",
                 csv_path=str(tmp_path / "r.csv"))
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()[1:]
    for line in lines:
        r, c, v = line.split(",")
        assert np.float32(float(v)) == field[int(r), int(c)]


def test_render_nonfinite_exits_2(tmp_path):
    path = tmp_path / "bad.fld"
    write_field(str(path), np.array([[np.inf, 1.0]], dtype=np.float32))
    rc = run(["render", "--field", str(path), "--out", str(tmp_path / "x.ppm")])
    assert rc == 2


# ---------------------------------------------------------------------------
# exit codes and validation
# ---------------------------------------------------------------------------

def test_missing_required_flag_exits_1(capsys):
    assert run(["generate", "--pde", "diffusion"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_1():
    assert run(["verify-bound", "--kappa", "0.5", "--lf", "1.0", "--dt", "0.5",
                "--k", "5", "--out", "/tmp/x.csv", "--frobnicate", "9"]) == 1


def test_bad_config_keys_exit_1(tmp_path, data_dir):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"grid_h": 8, "no_such_key": 1}')
    assert run(["train", "--data", data_dir, "--out", str(tmp_path / "ckpt"),
                "--config", str(cfg)]) == 1


def test_inputs_not_mutated_by_evaluate(tmp_path, ckpt_dir, data_dir):
    import hashlib
    def digest(d):
        h = hashlib.sha256()
        for name in sorted(os.listdir(d)):
            h.update(open(os.path.join(d, name), "rb").read())
        return h.hexdigest()

    before = digest(data_dir)
    run(["evaluate", "--model", ckpt_dir, "--data", data_dir,
         "--out", str(tmp_path / "m.csv")])
    assert digest(data_dir) == before


def test_cops_threads_env_validated(monkeypatch):
    from cops import cli
    monkeypatch.setenv("COPS_THREADS", "2")
    assert cli.max_workers() == 2
    monkeypatch.setenv("COPS_THREADS", "zero")
    with pytest.raises(Exception):
        cli.max_workers()
