"""Command-line front end.

Exit codes: 0 success, 2 input/validation error, 3 numerical/optimization failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import quad
from .exact import FactorizationError, exact_posterior
from .kalman import (
    DivergenceError,
    Mode,
    OptimizationError,
    RegressionDataset,
    build_model,
    posterior_at_data,
    predict_at,
    train_hyperparameters,
)
from .kernels import KernelSpec, KernelValidationError, NoiseSpec, spec_from_json_obj, spec_to_json_obj
from .spectral import ConditioningError
from .ssm import StateDimensionError, load_model, model_to_json_obj

log = logging.getLogger("ssgpkit")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# file helpers


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _is_flight_csv(path) -> bool:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return "qw" in header


def read_table_csv(path):
    """Generic regression CSV: x or x0..x{d-1}, y, optional y_true."""
    try:
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            names = rd.fieldnames or []
            rows = list(rd)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    if not rows:
        raise InputError(f"{path}: dataset is empty")
    xcols = ["x"] if "x" in names else sorted((c for c in names if c.startswith("x") and c[1:].isdigit()),
                                               key=lambda c: int(c[1:]))
    if not xcols:
        raise InputError(f"{path}: no input columns (expected x or x0, x1, ...)")
    X = np.array([[float(r[c]) for c in xcols] for r in rows])
    y = np.array([float(r["y"]) for r in rows]) if "y" in names else None
    y_true = np.array([float(r["y_true"]) for r in rows]) if "y_true" in names else None
    return X, y, y_true


def _kernel_arg(args):
    if not args.kernel:
        raise InputError("--kernel is required")
    return _load_json(args.kernel)


def _flight_specs(obj: dict, kind: str):
    """Per-axis (spec, noise) from either a flat spec or {"features", "axes": [...]}."""
    if "axes" in obj:
        axes = [spec_from_json_obj(a) for a in obj["axes"]]
        if len(axes) != 3:
            raise InputError("flight kernel file needs exactly three axes")
        return axes
    spec, noise = spec_from_json_obj(obj)
    if kind == "miso" and isinstance(spec, KernelSpec):
        spec = [spec] * 5
    return [(spec, noise)] * 3


def _apply_order(spec, args):
    order = args.order
    if args.blocks is not None:
        fams = [spec.family.value] if isinstance(spec, KernelSpec) else [s.family.value for s in spec]
        if "periodic" in fams:
            order = args.blocks
    return order


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    obj = _kernel_arg(args)
    spec, noise = spec_from_json_obj(obj)
    model = build_model(spec, _apply_order(spec, args))
    target = sum(s.sigma2 for s in ([spec] if isinstance(spec, KernelSpec) else spec))
    resid = abs(model.prior_variance - target) / target
    out = _out_dir(args)
    defaults = {"order": args.order, "blocks": args.blocks, "kernel": spec_to_json_obj(spec, noise)}
    _dump(out / "model.json", model_to_json_obj(model, noise.sigma_noise2, defaults))
    print(f"state dimension: {model.state_dim}")
    print(f"stability margin (max Re eig A): {model.stability_margin():.6g}")
    print(f"variance-match residual: {resid:.3g}")
    if "warning" in model.meta:
        print(f"warning: {model.meta['warning']}")
    print(f"wrote {out / 'model.json'}")
    return EXIT_OK


def _resolve_model(args):
    """(model or None, spec or None, noise) from --model / --kernel."""
    if args.model:
        try:
            model, noise = load_model(args.model)
        except FileNotFoundError as exc:
            raise InputError(f"file not found: {args.model}") from exc
        return model, None, NoiseSpec(noise)
    obj = _kernel_arg(args)
    spec, noise = spec_from_json_obj(obj)
    return None, spec, noise


def cmd_fit(args) -> int:
    if not Path(args.data).exists():
        raise InputError(f"file not found: {args.data}")
    if _is_flight_csv(args.data):
        return _fit_flight(args)
    X, y, y_true = read_table_csv(args.data)
    if y is None:
        raise InputError(f"{args.data}: column y is required")
    if args.test:
        Xq, _, yq_true = read_table_csv(args.test)
    else:
        Xq, yq_true = X, y_true if y_true is not None else None
    if Xq.shape[1] != X.shape[1]:
        raise InputError("test inputs have a different dimension than the training inputs")
    model, spec, noise = _resolve_model(args)
    data = RegressionDataset(X, y)
    t0 = time.perf_counter()
    if args.engine == "exact":
        if spec is None:
            raise InputError("the exact engine needs --kernel (a model file carries no kernel)")
        post = exact_posterior(spec, noise, X, y, Xq)
        mean, var, loglik = post.mean, post.var, post.loglik
    else:
        if model is None:
            model = build_model(spec, _apply_order(spec, args))
        if args.test:
            post = predict_at(model, data, noise, Xq, Mode(args.mode))
        else:
            post = posterior_at_data(model, data, noise, Mode(args.mode))
        mean, var, loglik = post.mean, post.var, post.loglik
    wall = time.perf_counter() - t0
    out = _out_dir(args)
    with open(out / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{j}" for j in range(Xq.shape[1])] + ["mean", "var"])
        for xr, mu, v in zip(Xq, mean, var):
            wr.writerow([repr(float(a)) for a in xr] + [repr(float(mu)), repr(float(v))])
    metrics = {"engine": args.engine, "mode": args.mode if args.engine == "ssgp" else None,
               "n_train": int(X.shape[0]), "n_query": int(Xq.shape[0]), "loglik": float(loglik),
               "wall_time_s": wall}
    if yq_true is not None:
        metrics["rmse"] = float(np.sqrt(np.mean((mean - yq_true) ** 2)))
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _fit_flight(args) -> int:
    records = quad.compute_residuals(quad.read_flight_csv(args.data))
    if len(records) < 2:
        raise InputError("flight log too short")
    if args.model:
        raise InputError("flight fitting needs --kernel (per-axis specs), not --model")
    axes = _flight_specs(_kernel_arg(args), args.features)
    t0 = time.perf_counter()
    forces = np.zeros((len(records), 3))
    variances = np.zeros((len(records), 3))
    loglik = 0.0
    for ax, (spec, noise) in enumerate(axes):
        ds = quad.axis_dataset(records, ax, args.features)
        if args.engine == "exact":
            post = exact_posterior(spec, noise, ds.X, ds.y, ds.X)
        else:
            model = build_model(spec, _apply_order(spec, args))
            post = posterior_at_data(model, ds, noise, Mode(args.mode))
        forces[:, ax], variances[:, ax] = post.mean, post.var
        loglik += post.loglik
    wall = time.perf_counter() - t0
    pred = quad.forces_to_world_accel(records, forces)
    out = _out_dir(args)
    with open(out / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "dax", "day", "daz", "pred_dax", "pred_day", "pred_daz", "var_fx", "var_fy", "var_fz"])
        for k, (r, p, v) in enumerate(zip(records, pred, variances)):
            wr.writerow([k, *map(repr, map(float, r.delta_a)), *map(repr, map(float, p)), *map(repr, map(float, v))])
    metrics = {"engine": args.engine, "mode": args.mode if args.engine == "ssgp" else None,
               "features": args.features, "n": len(records), "loglik": float(loglik),
               "rmse": quad.residual_rmse(records, pred), "nominal_rmse": quad.residual_rmse(records),
               "has_ground_truth": all(r.gt_delta_a is not None for r in records), "wall_time_s": wall}
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _initial_flight_spec(records, ax, kind, obj):
    """A single template spec is rescaled to the data; a per-axis file is used as given."""
    if "axes" in obj:
        return _flight_specs(obj, kind)[ax]
    base, noise = spec_from_json_obj(obj)
    if not isinstance(base, KernelSpec):
        return base, noise
    spec, default_noise = quad.initial_axis_spec(records, ax, kind, base)
    return spec, (noise if noise.sigma_noise2 > 0 else default_noise)


def cmd_train(args) -> int:
    if not Path(args.data).exists():
        raise InputError(f"file not found: {args.data}")
    flight = _is_flight_csv(args.data)
    # flight logs can start from data-scaled RBF defaults
    obj = _kernel_arg(args) if args.kernel or not flight else {"family": "rbf", "z": 1.0}
    out = _out_dir(args)
    traces = []
    if flight:
        records = quad.compute_residuals(quad.read_flight_csv(args.data))
        fitted = []
        for ax in range(3):
            spec, noise = _initial_flight_spec(records, ax, args.features, obj)
            ds = quad.axis_dataset(records, ax, args.features)
            res = _train(spec, noise, ds, args)
            traces.append(res.trace)
            fitted.append(spec_to_json_obj(res.spec, res.noise))
        result = {"features": args.features, "axes": fitted}
    else:
        X, y, _ = read_table_csv(args.data)
        if y is None:
            raise InputError(f"{args.data}: column y is required")
        spec, noise = spec_from_json_obj(obj)
        if not isinstance(spec, KernelSpec) and len(spec) != X.shape[1]:
            raise InputError("number of kernel inputs does not match the data columns")
        if isinstance(spec, KernelSpec) and X.shape[1] > 1:
            spec = [spec] * X.shape[1]
        res = _train(spec, noise, RegressionDataset(X, y), args)
        traces.append(res.trace)
        result = spec_to_json_obj(res.spec, res.noise)
    _dump(out / "fitted_spec.json", result)
    with open(out / "trace.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model", "evaluation", "best_loglik"])
        for i, tr in enumerate(traces):
            for k, v in enumerate(tr):
                wr.writerow([i, k, repr(float(v))])
    print(f"wrote {out / 'fitted_spec.json'} and {out / 'trace.csv'}")
    return EXIT_OK


def _train(spec, noise, data, args):
    try:
        return train_hyperparameters(spec, noise, data, args.order, args.budget)
    except OptimizationError as exc:
        out = _out_dir(args)
        with open(out / "trace.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["model", "evaluation", "best_loglik"])
            for k, v in enumerate(exc.trace):
                wr.writerow([0, k, repr(float(v))])
        raise


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    kernels = [k.strip() for k in args.kernels.split(",")]
    engines = [e.strip() for e in args.engines.split(",")]
    inputs = [int(d) for d in args.inputs.split(",")]
    for k in kernels:
        if k not in benchmod.BENCH_KERNELS:
            raise InputError(f"unknown kernel {k!r}; choose from {sorted(benchmod.BENCH_KERNELS)}")
    for e in engines:
        if e not in ("ssgp", "exact"):
            raise InputError(f"unknown engine {e!r}")
    if args.reps < 3:
        raise InputError("--reps must be >= 3")

    def progress(r):
        if isinstance(r, str):
            print(r, flush=True)
            return
        print(f"{r.engine:5s} {r.kernel:8s} d={r.d} n={r.n:5d} {r.cache:4s} {r.mean_ms:9.4f} +- {r.std_ms:.4f} ms/pt",
              flush=True)

    rows = benchmod.run_bench(sizes, kernels, engines, inputs, args.reps, Mode(args.mode), args.seed, progress)
    out = _out_dir(args)
    benchmod.write_bench_csv(out / "bench.csv", rows)
    header, body = benchmod.table_layout(rows, "cold")
    with open(out / "bench_table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(body)
    print(f"wrote {out / 'bench.csv'} and {out / 'bench_table.csv'}")
    return EXIT_OK


def _floats(text: str, n: int, flag: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise InputError(f"{flag} expects {n} comma-separated numbers") from exc
    if len(vals) != n:
        raise InputError(f"{flag} expects {n} comma-separated numbers, got {len(vals)}")
    return vals


def cmd_synth(args) -> int:
    traj = quad.synthesize_flight(
        args.shape,
        disturbance=quad.Disturbance(args.drag, args.thrust_error, _floats(args.motor_mismatch, 4, "--motor-mismatch")),
        n=args.n, dt=args.dt, noise=args.noise, seed=args.seed,
        vehicle=quad.Vehicle(args.mass, args.kf),
    )
    out = _out_dir(args)
    path = out / f"{args.shape}.csv"
    quad.write_flight_csv(path, traj)
    print(f"wrote {path} ({len(traj)} samples) and {quad.sidecar_path(path)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssgpkit", description="State-space Gaussian-process toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    p.subcommands = {}

    def command(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file of flag values; command-line flags take precedence")
        p.subcommands[name] = sp
        return sp

    def common(sp, data=True):
        sp.add_argument("--kernel", help="kernel spec JSON")
        sp.add_argument("--order", type=int, default=None, help="approximation order m")
        sp.add_argument("--blocks", type=int, default=None, help="periodic oscillator blocks J")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory")
        if data:
            sp.add_argument("--data", help="dataset CSV (generic or flight log)")
            sp.add_argument("--features", choices=["siso", "miso"], default="siso",
                            help="flight logs only: per-axis input set")

    sp = command("convert", help="kernel spec -> state-space model file")
    common(sp, data=False)
    sp.set_defaults(func=cmd_convert)

    sp = command("fit", help="posterior predictions on a dataset")
    common(sp)
    sp.add_argument("--model", help="state-space model file (instead of --kernel)")
    sp.add_argument("--test", help="query CSV (defaults to the training inputs)")
    sp.add_argument("--mode", choices=["filter", "smooth"], default="smooth")
    sp.add_argument("--engine", choices=["ssgp", "exact"], default="ssgp")
    sp.set_defaults(func=cmd_fit)

    sp = command("train", help="fit hyperparameters by maximising the log-likelihood")
    common(sp)
    sp.add_argument("--budget", type=int, default=200, help="max objective evaluations")
    sp.set_defaults(func=cmd_train)

    sp = command("bench", help="per-point inference timing table")
    sp.add_argument("--sizes", default=",".join(map(str, benchmod.DEFAULT_SIZES)))
    sp.add_argument("--kernels", default="rbf,matern,periodic")
    sp.add_argument("--engines", default="ssgp,exact")
    sp.add_argument("--inputs", default="1,5", help="input dimensions d to time")
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--mode", choices=["filter", "smooth"], default="smooth")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_bench)

    sp = command("synth", help="write a synthetic flight log")
    sp.add_argument("--shape", choices=[s.value for s in quad.Shape], default="circle")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--drag", type=float, default=0.3)
    sp.add_argument("--thrust-error", type=float, default=0.0, help="fractional error of every motor's kf")
    sp.add_argument("--motor-mismatch", default="0,0,0,0", help="extra per-motor kf errors, four values")
    sp.add_argument("--noise", type=float, default=0.0, help="body-velocity noise std (m/s)")
    sp.add_argument("--mass", type=float, default=1.0)
    sp.add_argument("--kf", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_synth)
    return p


def _apply_config(parser, args, argv):
    """Re-parse with values from --config as defaults, so explicit flags still win."""
    if not getattr(args, "config", None):
        return args
    cfg = _load_json(args.config)
    if not isinstance(cfg, dict):
        raise InputError(f"{args.config}: config must be a JSON object")
    sp = parser.subcommands[args.command]
    known = {a.dest for a in sp._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known - {"command"})
    if unknown:
        raise InputError(f"{args.config}: unknown keys {unknown}")
    cfg.pop("command", None)
    sp.set_defaults(**{k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in cfg.items()})
    return parser.parse_args(argv)


def _check_args(args):
    if args.command in ("fit", "train") and not args.data:
        raise InputError("--data is required")
    if args.command == "fit" and args.engine == "exact" and args.mode != "smooth":
        log.warning("the exact engine ignores --mode")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = _apply_config(parser, args, argv)
        _check_args(args)
        return args.func(args)
    except (InputError, KernelValidationError, StateDimensionError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConditioningError, DivergenceError, OptimizationError, FactorizationError, np.linalg.LinAlgError,
            FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
