"""Command-line interface: data generation, training, prediction,
evaluation, ablation, bound verification, and field rendering.

Exit codes: 0 success, 1 contract/validation error, 2 numeric failure.
Every subcommand prints its resolved configuration and seed, and writes
only to the declared output paths. COPS_THREADS caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from dataclasses import asdict

import numpy as np

from . import bounds as bnd
from . import dynamics as dyn
from . import pipeline as pl
from . import tensor as T
from .tensor import ContractError, NumericError, ShapeError


def max_workers() -> int:
    val = os.environ.get("COPS_THREADS", "")
    if val:
        try:
            n = int(val)
        except ValueError:
            raise ContractError(f"COPS_THREADS must be an integer, got '{val}'")
        if n < 1:
            raise ContractError("COPS_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ContractError(message)


def _print_resolved(name: str, settings: dict) -> None:
    print(f"[cops {name}] resolved config: {json.dumps(settings, sort_keys=True)}")


# ---------------------------------------------------------------------------
# field file (.fld) and rendering helpers
# ---------------------------------------------------------------------------

_FLD_MAGIC = b"FLD1"

PALETTES = {
    "gray": [(0, 0, 0), (255, 255, 255)],
    "coolwarm": [(59, 76, 192), (221, 221, 221), (180, 4, 38)],
}


def write_field(path: str, field: np.ndarray) -> None:
    """Self-describing field file: magic, int32 H/W/C header, f32 LE data."""
    field = np.asarray(field, dtype="<f4")
    if field.ndim == 2:
        field = field[:, :, None]
    H, W, C = field.shape
    with open(path, "wb") as fh:
        fh.write(_FLD_MAGIC)
        fh.write(struct.pack("<iii", H, W, C))
        fh.write(np.ascontiguousarray(field).tobytes())


def read_field(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FLD_MAGIC:
            raise ContractError(f"{path} is not a field file (bad magic)")
        H, W, C = struct.unpack("<iii", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4", count=H * W * C)
    return data.reshape(H, W, C).astype(np.float32)


def render_field(field: np.ndarray, out_path: str, palette: str = "gray",
                 csv_path: str | None = None, channel: int = 0):
    """Write a binary PPM (P6) heat map plus a CSV dump of the raw values.

    Normalization is min-max: the field minimum maps exactly to the palette's
    low color and the maximum exactly to its high color; a constant field
    renders uniformly in the low color. Values are printed with full
    round-trip precision in the CSV.
    """
    field = np.asarray(field)
    if field.ndim == 3:
        field = field[:, :, channel]
    if not np.all(np.isfinite(field)):
        raise NumericError(f"field has {int(np.sum(~np.isfinite(field)))} non-finite values")
    if palette not in PALETTES:
        raise ContractError(f"unknown palette '{palette}' (choose from {sorted(PALETTES)})")
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo
    norm = np.zeros_like(field, dtype=np.float64) if span == 0 else (field - lo) / span
    anchors = np.asarray(PALETTES[palette], dtype=np.float64)
    pos = np.linspace(0.0, 1.0, len(anchors))
    rgb = np.stack([np.interp(norm, pos, anchors[:, c]) for c in range(3)], axis=-1)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    H, W = field.shape
    with open(out_path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(rgb.tobytes())
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write("row,col,value\n")
            for r in range(H):
                for c in range(W):
                    fh.write(f"{r},{c},{repr(float(field[r, c]))}\n")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def read_obs_csv(path: str) -> pl.ObservationSet:
    """Header 'x,y,u0[,u1,...]', one sensor per row."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["x", "y"] or not header[2:] or header[2] != "u0":
            raise ContractError(f"{path}: expected header 'x,y,u0[,u1,...]'")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.shape[1] != len(header):
        raise ContractError(f"{path}: ragged rows")
    return pl.ObservationSet(rows[:, :2], rows[:, 2:])


def read_queries_csv(path: str, times: list | None):
    """Header 'x,y' (pair with --times) or 't,x,y' per row."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header == ["t", "x", "y"]:
        return pl.QuerySet(rows[:, 0], rows[:, 1:3])
    if header == ["x", "y"]:
        if not times:
            raise ContractError("queries file has no time column; pass --times")
        ts = np.repeat(np.asarray(times, dtype=np.float64), rows.shape[0])
        pts = np.tile(rows, (len(times), 1))
        return pl.QuerySet(ts, pts)
    raise ContractError(f"{path}: expected header 'x,y' or 't,x,y'")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    cfg = dyn.DatasetConfig(pde=args.pde, grid=args.grid, trajectories=args.traj,
                            steps=args.steps, t_train=args.t_train or args.steps // 2,
                            seed=args.seed, nu=args.nu,
                            velocity=(args.vx, args.vy),
                            snapshots_per_step=args.snapshots_per_step,
                            substeps=args.substeps)
    _print_resolved("generate", {**asdict(cfg), "out": args.out,
                                 "workers": max_workers()})
    ds = dyn.make_dataset(cfg, workers=max_workers())
    dyn.save_dataset(ds, args.out)
    print(f"wrote {ds.n_traj} trajectories to {args.out}")
    return 0


def _model_config_from_args(args, data_grid) -> pl.ModelConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = pl.ModelConfig.from_json(fh.read())
    else:
        cfg = pl.ModelConfig(grid_h=data_grid[0], grid_w=data_grid[1])
    for name in ("epochs", "seed", "width", "batch_size", "micro_batch",
                 "train_window", "lam"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "ratio", None) is not None:
        cfg.subsample_ratio = args.ratio
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    ds = dyn.load_dataset(args.data)
    cfg = _model_config_from_args(args, ds.grid)
    _print_resolved("train", {**asdict(cfg), "data": args.data, "out": args.out})
    result = pl.train(ds, cfg, progress=not args.quiet)
    model = pl.Model(cfg, params=result.params)
    pl.save_checkpoint(args.out, model)
    with open(os.path.join(args.out, "loss_curve.csv"), "w") as fh:
        fh.write("epoch,train_loss\n")
        for e, v in result.loss_curve:
            fh.write(f"{e},{v:.10e}\n")
        fh.write("epoch,val_loss\n")
        for e, v in result.val_curve:
            fh.write(f"{e},{v:.10e}\n")
    status = "aborted on non-finite loss; saved last good checkpoint" if result.aborted \
        else "done"
    print(f"{status}: best val {result.best_val:.6e} (from {result.initial_val:.6e}) -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    model = pl.load_checkpoint(args.model)
    obs = read_obs_csv(args.obs)
    times = [float(t) for t in args.times.split(",")] if args.times else None
    queries = read_queries_csv(args.queries, times)
    _print_resolved("predict", {"model": args.model, "obs": args.obs,
                                "queries": args.queries, "n_queries": int(queries.times.size),
                                "seed": model.config.seed})
    preds = pl.forward_predict(obs, queries, model)
    with open(args.out, "w") as fh:
        cols = ",".join(f"u{c}" for c in range(preds.shape[1]))
        fh.write(f"t,x,y,{cols}\n")
        for i in range(preds.shape[0]):
            vals = ",".join(repr(float(v)) for v in preds[i])
            fh.write(f"{queries.times[i]},{queries.points[i, 0]},{queries.points[i, 1]},{vals}\n")
    print(f"wrote {preds.shape[0]} predictions to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model = pl.load_checkpoint(args.model)
    ds = dyn.load_dataset(args.data)
    tags = tuple(args.time_tags.split(",")) if args.time_tags else ("In-t", "Ext-t", "Con-t")
    proto = pl.EvalProtocol(ratio=args.ratio, split=args.split,
                            noise_rel=args.noise / 100.0, noise_seed=args.noise_seed,
                            time_tags=tags)
    _print_resolved("evaluate", {"model": args.model, "data": args.data,
                                 "ratio": args.ratio, "noise_pct": args.noise,
                                 "split": args.split, "seed": model.config.seed})
    report = pl.evaluate(model, ds, proto)
    report.write_csv(args.out)
    if args.curve_out:
        report.write_curve_csv(args.curve_out)
    for tag in sorted(report.mse):
        print(f"  {tag}: mse {report.mse[tag]:.6e} over {report.steps[tag]} steps")
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    with open(args.config) as fh:
        cfg = pl.ModelConfig.from_json(fh.read())
    out_cfg = pl.ablate(cfg, args.variant)
    _print_resolved("ablate", {"variant": args.variant, "seed": out_cfg.seed})
    with open(args.out, "w") as fh:
        fh.write(out_cfg.to_json())
    print(f"wrote {args.out}")
    return 0


def _cmd_verify_bound(args) -> int:
    _print_resolved("verify-bound", {k: getattr(args, k) for k in
                                     ("kappa", "lf", "dt", "eode", "deltac", "k",
                                      "e0", "mode", "certify", "dim", "seed")})
    if args.certify:
        rep = bnd.certify_on_linear_system(dim=args.dim, seed=args.seed, K=args.k,
                                           lip=args.lf, dt_corr=args.dt,
                                           kappa=args.kappa, delta_c=args.deltac)
        rep.write_csv(args.out)
        verdict = "satisfied" if rep.satisfied else "VIOLATED"
        if not rep.conclusive:
            verdict = "inconclusive (empirical contraction >= 1)"
        print(f"certification {verdict}; E_ODE measured {rep.e_ode_measured:.3e}; "
              f"Lipschitz estimate {rep.lip_estimated:.6g}")
        print(f"wrote {args.out}")
        return 0
    p = bnd.BoundParams(lip=args.lf, dt_corr=args.dt, kappa=args.kappa,
                        delta_c=args.deltac, e_ode=args.eode, e0=args.e0)
    seq = bnd.simulate_recurrence(args.k, p, mode=args.mode, seed=args.seed)
    with open(args.out, "w") as fh:
        fh.write("k,e_measured,bound,slack\n")
        for k in range(args.k + 1):
            b = bnd.bound_at(k, p)[0]
            fh.write(f"{k},{seq[k]:.12e},{b:.12e},{b - seq[k]:.12e}\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_render(args) -> int:
    if args.field:
        field = read_field(args.field)
        src = args.field
    elif args.data is not None:
        ds = dyn.load_dataset(args.data)
        field = ds.fields[args.traj, args.step]
        src = f"{args.data}[traj={args.traj}, step={args.step}]"
    else:
        raise ContractError("render needs --field or --data/--traj/--step")
    _print_resolved("render", {"source": src, "palette": args.palette,
                               "channel": args.channel, "out": args.out})
    render_field(field, args.out, palette=args.palette,
                 csv_path=args.csv, channel=args.channel)
    print(f"wrote {args.out}" + (f" and {args.csv}" if args.csv else ""))
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="cops", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="simulate a trajectory dataset")
    g.add_argument("--pde", choices=["diffusion", "vorticity"], required=True)
    g.add_argument("--grid", type=int, required=True)
    g.add_argument("--traj", type=int, required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--t-train", type=int, default=None, dest="t_train")
    g.add_argument("--nu", type=float, default=2.5e-3)
    g.add_argument("--vx", type=float, default=0.15)
    g.add_argument("--vy", type=float, default=-0.1)
    g.add_argument("--snapshots-per-step", type=int, default=2, dest="snapshots_per_step")
    g.add_argument("--substeps", type=int, default=4)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="ModelConfig JSON; unknown keys rejected")
    for name, typ in (("epochs", int), ("seed", int), ("width", int),
                      ("batch-size", int), ("micro-batch", int),
                      ("train-window", int), ("lam", float), ("ratio", float)):
        t.add_argument(f"--{name}", type=typ, default=None, dest=name.replace("-", "_"))
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=_cmd_train)

    pr = sub.add_parser("predict", help="predict at (t, x) queries from an obs CSV")
    pr.add_argument("--model", required=True)
    pr.add_argument("--obs", required=True)
    pr.add_argument("--queries", required=True)
    pr.add_argument("--times", default=None, help="comma list, used when queries lack a t column")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_predict)

    e = sub.add_parser("evaluate", help="MSE per evaluation tag on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ratio", type=float, default=0.5)
    e.add_argument("--noise", type=float, default=0.0, help="input noise, %% of per-channel std")
    e.add_argument("--noise-seed", type=int, default=0, dest="noise_seed")
    e.add_argument("--split", default="test")
    e.add_argument("--time-tags", default=None, dest="time_tags")
    e.add_argument("--out", required=True)
    e.add_argument("--curve-out", default=None, dest="curve_out")
    e.set_defaults(func=_cmd_evaluate)

    a = sub.add_parser("ablate", help="emit the config of an ablated variant")
    a.add_argument("--variant", required=True,
                   choices=["no-mfn", "no-mgo", "no-nac"])
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_ablate)

    v = sub.add_parser("verify-bound", help="error-bound recurrence and certification")
    v.add_argument("--kappa", type=float, required=True)
    v.add_argument("--lf", type=float, required=True)
    v.add_argument("--dt", type=float, required=True)
    v.add_argument("--eode", type=float, default=0.0)
    v.add_argument("--deltac", type=float, default=0.0)
    v.add_argument("--k", type=int, required=True)
    v.add_argument("--e0", type=float, default=0.0)
    v.add_argument("--mode", choices=["worst-case", "sampled"], default="worst-case")
    v.add_argument("--certify", action="store_true")
    v.add_argument("--dim", type=int, default=16)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_verify_bound)

    r = sub.add_parser("render", help="render a field to a PPM heat map + CSV")
    r.add_argument("--field", default=None, help=".fld field file")
    r.add_argument("--data", default=None, help="dataset directory (with --traj/--step)")
    r.add_argument("--traj", type=int, default=0)
    r.add_argument("--step", type=int, default=0)
    r.add_argument("--channel", type=int, default=0)
    r.add_argument("--palette", default="gray", choices=sorted(PALETTES))
    r.add_argument("--out", required=True)
    r.add_argument("--csv", default=None)
    r.set_defaults(func=_cmd_render)
    return p


def run(argv) -> int:
    """Entry point returning the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ContractError, ShapeError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
