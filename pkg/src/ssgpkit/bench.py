"""Per-point inference timing: state-space sweep vs exact GP.

A cell is (engine, kernel, d, n): n training points and n query points are
drawn from a fixed-seed generator, and one inference means computing the
posterior at all n queries. Conversion and training are excluded. Times are
reported per query point, in milliseconds.
"""
from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from .exact import exact_posterior
from .kalman import Mode, RegressionDataset, build_model, predict_at
from .kernels import KernelSpec, NoiseSpec
from .ssm import MAX_STATE_DIM, StepCache, convert

DEFAULT_SIZES = (10, 50, 200, 1000, 2500, 6000)

BENCH_KERNELS = {
    "rbf": KernelSpec("rbf", z=0.5, sigma2=1.0),
    "matern": KernelSpec("matern", z=1.0, sigma2=1.0, nu=2.5),
    "periodic": KernelSpec("periodic", z=1.0, sigma2=1.0, omega0=2.0),
}


@dataclass
class BenchRow:
    engine: str
    kernel: str
    d: int
    n: int
    cache: str
    mean_ms: float
    std_ms: float
    reps: int


def single_thread():
    """Pin BLAS/OpenMP pools to one thread where threadpoolctl is available."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def make_problem(n: int, d: int, seed: int = 0):
    rng = np.random.default_rng(seed + 7919 * n + d)
    X = rng.uniform(0.0, 10.0, size=(n, d))
    y = np.sin(X).sum(axis=1) + 0.1 * rng.standard_normal(n)
    Xq = rng.uniform(0.0, 10.0, size=(n, d))
    return X, y, Xq


def time_cell(engine: str, kernel: str, d: int, n: int, reps: int = 3, mode=Mode.SMOOTH,
              seed: int = 0, noise: float = 0.01, order: int | None = None) -> list[BenchRow]:
    spec = BENCH_KERNELS[kernel]
    specs = spec if d == 1 else [spec] * d
    X, y, Xq = make_problem(n, d, seed)
    nz = NoiseSpec(noise)
    data = RegressionDataset(X, y)
    rows = []
    if engine == "ssgp":
        model = build_model(specs, order)

        def run(cache):
            return predict_at(model, data, nz, Xq, mode, cache=cache)

        for label in ("cold", "warm"):
            warm_cache = StepCache()
            run(warm_cache)
            times = []
            for _ in range(reps):
                cache = warm_cache if label == "warm" else StepCache()
                t0 = time.perf_counter()
                run(cache)
                times.append(time.perf_counter() - t0)
            rows.append(_row(engine, kernel, d, n, label, times, reps))
    elif engine == "exact":
        def run():
            return exact_posterior(specs, nz, X, y, Xq)

        for label in ("cold", "warm"):
            if label == "warm":
                run()
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
            rows.append(_row(engine, kernel, d, n, label, times, reps))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return rows


def _row(engine, kernel, d, n, label, times, reps) -> BenchRow:
    per_point = np.array(times) / n * 1e3
    return BenchRow(engine, kernel, d, n, label, float(per_point.mean()), float(per_point.std()), reps)


def fits_state_cap(kernel: str, d: int) -> bool:
    return d * convert(BENCH_KERNELS[kernel]).state_dim <= MAX_STATE_DIM


def run_bench(sizes=DEFAULT_SIZES, kernels=("rbf",), engines=("ssgp", "exact"), inputs=(1,), reps: int = 3,
              mode=Mode.SMOOTH, seed: int = 0, progress=None) -> list[BenchRow]:
    if reps < 3:
        raise ValueError("benchmark needs at least 3 repetitions")
    rows = []
    # compile/warm the sweep once so the first cell does not pay JIT cost
    time_cell("ssgp", kernels[0], 1, 10, reps=1, mode=mode)
    with single_thread():
        for engine in engines:
            for kernel in kernels:
                for d in inputs:
                    if not fits_state_cap(kernel, d):
                        if progress:
                            progress(f"skip {engine} {kernel} d={d}: state dimension above {MAX_STATE_DIM}")
                        continue
                    for n in sizes:
                        cell = time_cell(engine, kernel, d, n, reps, mode, seed)
                        rows.extend(cell)
                        if progress:
                            for r in cell:
                                progress(r)
    return rows


def write_bench_csv(path, rows: list[BenchRow]):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(BenchRow.__dataclass_fields__))
        wr.writeheader()
        for r in rows:
            wr.writerow(asdict(r))


def table_layout(rows: list[BenchRow], cache: str = "cold") -> tuple[list[str], list[list[str]]]:
    """Rows = n, columns = (d, engine, kernel) cells; values = mean ms per point."""
    sel = [r for r in rows if r.cache == cache]
    cols = sorted({(r.d, r.engine, r.kernel) for r in sel})
    sizes = sorted({r.n for r in sel})
    lookup = {(r.d, r.engine, r.kernel, r.n): r.mean_ms for r in sel}
    header = ["n"] + [f"{'SISO' if d == 1 else f'MISO{d}'} {e} {k}" for d, e, k in cols]
    body = [[str(n)] + [f"{lookup.get((d, e, k, n), float('nan')):.4f}" for d, e, k in cols] for n in sizes]
    return header, body
