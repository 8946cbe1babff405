"""Command-line front end.

Subcommands::

    run         optimize a registered problem and write a trajectory CSV
    memory      optimizer-state footprint table
    constants   compression constants and diagnostic bounds
    ef-lowrank  low-rank projection with error feedback on a quadratic layer
    inspect     summarize a checkpoint written by ``run --checkpoint``

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .lowrank_ef import run_lowrank_ef
from .optim import OPTIMIZERS, SCHEDULES, DivergenceError, HyperParams, run
from .problems import PROBLEMS, get_problem
from .theory import (
    MODELS,
    CompressionParams,
    ContractionConditionError,
    MemorySpec,
    c_constants,
    ef_bound,
    memory_footprints,
    quantizer_omega_worst,
    topk_q,
    vhat_bound,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
OUT_DIR_ENV = "MICROADAM_OUT_DIR"
TRAJECTORY_HEADER = ["step", "loss", "grad_norm", "error_norm", "update_nnz"]

# run options: name -> (type, default). Config files use the same keys.
RUN_OPTIONS = {
    "problem": (str, "rosenbrock"),
    "optimizer": (str, "microadam"),
    "steps": (int, 500),
    "seed": (int, 0),
    "schedule": (str, "constant"),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "weight_decay": (float, 0.0),
    "window": (int, 10),
    "density": (float, 0.01),
    "k": (int, None),
    "bits": (int, 4),
    "block": (int, None),
    "bucket": (int, 64),
    "rounding": (str, "nearest"),
    "dim": (int, None),
    "noise": (float, 0.0),
    "clip": (float, None),
    "out": (str, None),
    "checkpoint": (str, None),
}


class ConfigError(Exception):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


# -- run ------------------------------------------------------------------------


def _coerce(key, value):
    typ, _ = RUN_OPTIONS[key]
    if value is None or (isinstance(value, str) and value.lower() == "none"):
        return None
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then flags given on the command line."""
    cfg = {k: default for k, (_, default) in RUN_OPTIONS.items()}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold one flat JSON object")
        for key, value in loaded.items():
            if key not in RUN_OPTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config key {key!r} must be a scalar")
            cfg[key] = _coerce(key, value)
    for key in RUN_OPTIONS:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = _coerce(key, value)
    return cfg


def _validate(cfg: dict):
    if cfg["problem"] not in PROBLEMS:
        raise ConfigError(f"unknown problem {cfg['problem']!r}; choose from {sorted(PROBLEMS)}")
    if cfg["optimizer"] not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {cfg['optimizer']!r}; choose from {list(OPTIMIZERS)}")
    if cfg["schedule"] not in SCHEDULES:
        raise ConfigError(f"unknown schedule {cfg['schedule']!r}; choose from {list(SCHEDULES)}")
    if cfg["steps"] < 1:
        raise ConfigError("steps must be >= 1")
    if cfg["checkpoint"] and cfg["optimizer"] != "microadam":
        raise ConfigError("--checkpoint is only available for the microadam optimizer")


def _build(cfg: dict):
    kw = {} if cfg["dim"] is None else {"dim": cfg["dim"]}
    try:
        problem = get_problem(cfg["problem"], seed=cfg["seed"], **kw)
        if cfg["noise"]:
            problem = problem.with_noise(cfg["noise"])
        hp = HyperParams(
            lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"],
            weight_decay=cfg["weight_decay"], window=cfg["window"], density=cfg["density"],
            k=cfg["k"], bits=cfg["bits"], block=cfg["block"], bucket=cfg["bucket"],
            rounding=cfg["rounding"],
        )
        hp.selector(problem.dim)  # surfaces k / block problems before running
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return problem, hp


def default_out_path(cfg: dict) -> Path:
    base = Path(os.environ.get(OUT_DIR_ENV, "."))
    return base / f"{cfg['problem']}_{cfg['optimizer']}_seed{cfg['seed']}.csv"


def trajectory_csv(traj, dim: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER + [f"theta{i}" for i in range(dim)])
    for t, rep in enumerate(traj.reports, 1):
        theta = traj.iterates[t]
        w.writerow([t, _fmt(rep.loss), _fmt(rep.grad_norm), _fmt(rep.error_norm), rep.update_nnz,
                    *map(_fmt, theta)])
    return buf.getvalue()


def execute_run(cfg: dict) -> tuple[int, str]:
    """Run one configuration, write its CSV, and return (exit code, summary line)."""
    _validate(cfg)
    problem, hp = _build(cfg)
    out = Path(cfg["out"]) if cfg["out"] else default_out_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        traj = run(cfg["optimizer"], problem, cfg["steps"], hp, schedule=cfg["schedule"],
                   seed=cfg["seed"], clip=cfg["clip"])
    except DivergenceError as exc:
        out.write_text(trajectory_csv(exc.trajectory, problem.dim) + f"# DIVERGED {exc}\n")
        return EXIT_DIVERGED, f"{out}: {exc}"
    out.write_text(trajectory_csv(traj, problem.dim))
    if cfg["checkpoint"]:
        checkpoint.save(traj.state, cfg["checkpoint"])
    return EXIT_OK, f"{out}: {traj.steps} steps, final loss {_fmt(traj.losses[-1])}"


def _parse_sweep(specs: list[str]) -> list[dict]:
    axes = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.replace("-", "_")
        if not sep or key not in RUN_OPTIONS or key in ("out", "checkpoint"):
            raise ConfigError(f"bad sweep spec {spec!r}; expected KEY=v1,v2,...")
        axes.append([(key, _coerce(key, v)) for v in values.split(",") if v])
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_out(cfg: dict, overrides: dict) -> str:
    tag = "_".join(f"{k}={v}" for k, v in overrides.items())
    if cfg["out"]:
        p = Path(cfg["out"])
        return str(p.with_name(f"{p.stem}_{tag}{p.suffix or '.csv'}"))
    base = default_out_path(cfg)
    return str(base.with_name(f"{base.stem}_{tag}.csv"))


def _safe_execute(cfg):
    try:
        return execute_run(cfg)
    except ConfigError as exc:
        return EXIT_CONFIG, f"config error: {exc}"


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    if not args.sweep:
        code, msg = execute_run(cfg)
        print(msg, file=sys.stderr if code else sys.stdout)
        return code
    runs = []
    for overrides in _parse_sweep(args.sweep):
        c = dict(cfg, **overrides)
        c["out"] = _sweep_out(cfg, overrides)
        c["checkpoint"] = None
        runs.append(c)
    for c in runs:
        _validate(c)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_safe_execute, runs))
    else:
        results = [_safe_execute(c) for c in runs]
    for code, msg in results:
        print(msg, file=sys.stderr if code else sys.stdout)
    return max(code for code, _ in results)


# -- tables -----------------------------------------------------------------------


def _table(header: list[str], rows: list[list[str]], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def _bytes_str(n: float) -> str:
    return str(int(n)) if float(n).is_integer() else f"{n:.1f}"


def cmd_memory(args) -> int:
    if args.model:
        spec = MODELS[args.model]
        changes = {k: getattr(args, k) for k in ("d", "m", "k") if getattr(args, k) is not None}
        spec = MemorySpec(**{**spec.__dict__, **changes}) if changes else spec
    else:
        if args.d is None:
            raise ConfigError("give --model or --d")
        spec = MemorySpec(d=args.d, m=10 if args.m is None else args.m, k=args.k,
                          layer_row_sums=args.layer_row_sums, rank1_bytes=args.rank1_bytes)
    ranks = tuple(args.rank) if args.rank else (256, 1024)
    bits = tuple(args.bits) if args.bits else (8, 16)
    if args.galore and not spec.layer_row_sums:
        raise ConfigError("GaLore rows need --layer-row-sums (built into --model)")
    rows = memory_footprints(spec, galore_ranks=ranks, galore_bits=bits)
    if args.galore:
        rows = [r for r in rows if r.name.startswith("GaLore")]
    table = [[r.name, _bytes_str(r.nbytes), f"{r.gib:.2f}"] for r in rows]
    sys.stdout.write(_table(["optimizer", "bytes", "GB"], table, args.format))
    return EXIT_OK


def cmd_constants(args) -> int:
    if args.q is not None:
        q = args.q
    elif args.k is not None and args.d is not None:
        q = topk_q(args.k, args.d)
    else:
        raise ConfigError("give --q, or --k together with --d")
    if args.omega is not None:
        omega = args.omega
    elif args.bits is not None and args.n is not None:
        omega = quantizer_omega_worst(args.bits, args.n)
    else:
        omega = 0.0
    try:
        cp = CompressionParams(q, omega)
    except ContractionConditionError as exc:
        raise ConfigError(str(exc)) from None
    C0, C1, C2 = c_constants(cp, args.G, args.eps, args.beta1)
    rows = [
        ["q", q], ["omega", omega], ["q_omega", cp.q_omega],
        ["C0", C0], ["C1", C1], ["C2", C2],
        ["ef_bound", ef_bound(cp, args.G)], ["vhat_bound", vhat_bound(cp, args.G)],
    ]
    table = [[name, _fmt(v) if args.format == "csv" else f"{v:.10g}"] for name, v in rows]
    sys.stdout.write(_table(["quantity", "value"], table, args.format))
    return EXIT_OK


def cmd_ef_lowrank(args) -> int:
    t_sub = None if args.t_sub in (None, 0) else args.t_sub
    try:
        trace = run_lowrank_ef((args.rows, args.cols), args.rank, t_sub, args.steps, args.seed,
                               lr=args.lr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "grad_norm", "error_norm", "proj_error_norm"])
    for t, loss, g, e, p in trace.rows():
        w.writerow([t, _fmt(loss), _fmt(g), _fmt(e), _fmt(p)])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        state = checkpoint.load(args.path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    w, err = state.window, state.error
    rows = [
        ["dim", str(w.dim)], ["step", str(w.step)], ["window", str(w.capacity)],
        ["row_width", str(w.row_width)], ["head", str(w.head)], ["filled", str(w.filled)],
        ["error_bytes", str(err.nbytes)], ["error_norm", _fmt(np.linalg.norm(err.load()))],
        ["param_norm", _fmt(np.linalg.norm(state.params))],
    ]
    sys.stdout.write(_table(["field", "value"], rows, args.format))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microadam", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize a problem and write a trajectory CSV")
    p.add_argument("--config", help="flat JSON object of run options; flags override it")
    for key, (typ, default) in RUN_OPTIONS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=str if key == "bits" else typ, default=None,
                       help=f"default: {default}")
    p.add_argument("--sweep", action="append", default=[],
                   help="KEY=v1,v2,... ; repeat for a grid; one CSV per combination")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for --sweep")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("memory", help="optimizer-state memory table")
    p.add_argument("--model", choices=sorted(MODELS))
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--layer-row-sums", type=int)
    p.add_argument("--rank1-bytes", type=int, default=0)
    p.add_argument("--galore", action="store_true", help="only show GaLore rows")
    p.add_argument("--rank", type=int, action="append")
    p.add_argument("--bits", type=int, action="append", choices=(8, 16))
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("constants", help="compression constants and diagnostic bounds")
    p.add_argument("--q", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--bits", type=int)
    p.add_argument("--n", type=int, help="bucket length for the worst-case quantizer factor")
    p.add_argument("--G", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("ef-lowrank", help="low-rank projection with error feedback")
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--cols", type=int, default=32)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--t-sub", type=int, default=200, help="subspace refresh period; 0 keeps it fixed")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ef_lowrank)

    p = sub.add_parser("inspect", help="summarize a checkpoint file")
    p.add_argument("path")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
