"""GP regression with a state-space model: Kalman sweep, RTS smoothing, training."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import _accel
from .kernels import Family, KernelSpec, NoiseSpec
from .ssm import Lssm, StepCache, convert, discretize_sequence, stack_miso

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """The filter hit a non-finite or singular innovation covariance."""


class OptimizationError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class Ordering(str, enum.Enum):
    SORT_BY_INPUT = "sort"
    GIVEN_ORDER = "given"


class Mode(str, enum.Enum):
    FILTER = "filter"
    SMOOTH = "smooth"


@dataclass
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    ordering: Ordering | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains NaN or Inf")
        if self.ordering is None:
            self.ordering = Ordering.SORT_BY_INPUT if X.shape[1] == 1 else Ordering.GIVEN_ORDER
        self.ordering = Ordering(self.ordering)
        if self.ordering is Ordering.SORT_BY_INPUT and X.shape[1] != 1:
            raise ValueError("SortByInput ordering is only valid for one input dimension")
        self.X, self.y = X, y

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class PosteriorResult:
    mean: np.ndarray
    var: np.ndarray
    loglik: float
    n_clamped: int = 0


@dataclass
class FilterResult:
    """Outputs of one forward sweep over the (possibly merged) sequence.

    ``order`` maps sweep position -> original row of the stacked
    [data; queries] array, ``is_query`` flags the query rows in sweep order.
    """

    model: Lssm
    order: np.ndarray
    is_query: np.ndarray
    Phi_b: np.ndarray
    Qd_b: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    loglik: float


@dataclass
class SmoothResult:
    means: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def _layout(model: Lssm):
    offs = np.array([b.offset for b in model.blocks], dtype=np.int64)
    sizes = np.array([b.size for b in model.blocks], dtype=np.int64)
    inputs = np.array([b.input_index for b in model.blocks], dtype=np.int64)
    return offs, sizes, inputs


def _sequence(data: RegressionDataset, queries: np.ndarray | None, descending: bool):
    X = data.X
    n = data.n
    if queries is None:
        Xall = X
        is_query = np.zeros(n, dtype=bool)
    else:
        Xall = np.vstack([X, queries])
        is_query = np.r_[np.zeros(n, dtype=bool), np.ones(queries.shape[0], dtype=bool)]
    if data.ordering is Ordering.SORT_BY_INPUT:
        key = -Xall[:, 0] if descending else Xall[:, 0]
        # data before queries at tied inputs
        order = np.lexsort((is_query, key))
    else:
        order = np.arange(Xall.shape[0])
        if descending:
            order = order[::-1]
    return Xall[order], order, is_query[order]


def _run_filter(model, data, noise, queries=None, descending=False, cache=None, store=True):
    offs, sizes, inputs = _layout(model)
    if inputs.max() + 1 != data.d:
        raise ValueError(f"model has {inputs.max() + 1} inputs but data has {data.d} columns")
    if queries is not None and queries.shape[1] != data.d:
        raise ValueError("query dimension does not match data")
    Xs, order, is_query = _sequence(data, queries, descending)
    N = Xs.shape[0]
    deltas = np.zeros((N, len(offs)))
    if N > 1:
        deltas[1:] = np.abs(np.diff(Xs[:, inputs], axis=0))
    Phi_b, Qd_b = discretize_sequence(model, deltas, cache)
    y_all = np.r_[data.y, np.zeros(N - data.n)][order]
    H = model.H[0]
    out = _accel.kalman_filter(
        Phi_b, Qd_b, offs, sizes, H, y_all, ~is_query, noise.sigma_noise2,
        np.zeros(model.state_dim), model.Pinf, store,
    )
    ms, Ps, pm, pv, fm, fv, loglik, status, bad = out
    if status == _accel.DIVERGED:
        raise DivergenceError(f"non-finite innovation covariance at sweep step {bad}")
    if status == _accel.CONFLICT:
        raise DivergenceError(
            f"singular update at sweep step {bad}: zero innovation variance with a nonzero residual "
            "(duplicate inputs with conflicting targets and no measurement noise?)"
        )
    return FilterResult(model, order, is_query, Phi_b, Qd_b, ms, Ps, pm, pv, fm, fv, float(loglik))


def filter_sweep(model: Lssm, data: RegressionDataset, noise: NoiseSpec, *,
                 descending: bool = False, cache: StepCache | None = None) -> FilterResult:
    """Forward Kalman pass over the data, starting from the stationary prior."""
    return _run_filter(model, data, noise, None, descending, cache)


def filter_loglik(model: Lssm, data: RegressionDataset, noise: NoiseSpec, cache=None) -> float:
    """Innovations log-marginal likelihood without storing the state history."""
    return _run_filter(model, data, noise, None, False, cache, store=False).loglik


def smooth(filtered: FilterResult, model: Lssm | None = None) -> SmoothResult:
    model = model or filtered.model
    offs, sizes, _ = _layout(model)
    m_s, mean, var = _accel.rts_smoother(
        filtered.Phi_b, filtered.Qd_b, offs, sizes, model.H[0], filtered.means, filtered.covs
    )
    return SmoothResult(means=m_s, mean=mean, var=var)


def _clamp(var: np.ndarray):
    neg = var < 0
    n = int(np.count_nonzero(neg))
    if n:
        if np.min(var) < -1e-10:
            log.warning("clamped %d negative predictive variances (min %.3g)", n, np.min(var))
        var = np.where(neg, 0.0, var)
    return var, n


def predict_at(model: Lssm, data: RegressionDataset, noise: NoiseSpec, queries, mode=Mode.SMOOTH, *,
               descending: bool = False, cache: StepCache | None = None) -> PosteriorResult:
    """Predictive mean and latent variance at query inputs.

    SISO data sorted by input merges queries into the sweep; otherwise the
    queries follow the data in the given order. FILTER mode conditions each
    query only on data earlier in the sweep; SMOOTH conditions on all data.
    """
    mode = Mode(mode)
    q = np.asarray(queries, dtype=float)
    if q.ndim == 1:
        q = q[:, None] if data.d == 1 else q[None, :]
    res = _run_filter(model, data, noise, q, descending, cache, store=mode is Mode.SMOOTH)
    if mode is Mode.SMOOTH:
        sm = smooth(res, model)
        mean_seq, var_seq = sm.mean, sm.var
    else:
        mean_seq, var_seq = res.filt_mean, res.filt_var
    sel = res.is_query
    q_rows = res.order[sel] - data.n
    mean = np.empty(q.shape[0])
    var = np.empty(q.shape[0])
    mean[q_rows] = mean_seq[sel]
    var[q_rows] = var_seq[sel]
    var, n_clamped = _clamp(var)
    return PosteriorResult(mean=mean, var=var, loglik=res.loglik, n_clamped=n_clamped)


def posterior_at_data(model: Lssm, data: RegressionDataset, noise: NoiseSpec, mode=Mode.SMOOTH, *,
                      cache: StepCache | None = None) -> PosteriorResult:
    """Latent posterior at the training inputs themselves, in the caller's row order."""
    mode = Mode(mode)
    res = _run_filter(model, data, noise, None, False, cache, store=mode is Mode.SMOOTH)
    if mode is Mode.SMOOTH:
        sm = smooth(res, model)
        mean_seq, var_seq = sm.mean, sm.var
    else:
        mean_seq, var_seq = res.filt_mean, res.filt_var
    mean = np.empty(data.n)
    var = np.empty(data.n)
    mean[res.order] = mean_seq
    var[res.order] = var_seq
    var, n_clamped = _clamp(var)
    return PosteriorResult(mean=mean, var=var, loglik=res.loglik, n_clamped=n_clamped)


def one_step_ahead(model: Lssm, data: RegressionDataset, noise: NoiseSpec, cache=None) -> PosteriorResult:
    """Streaming predictions: each target predicted from the samples before it."""
    res = _run_filter(model, data, noise, None, False, cache, store=False)
    mean = np.empty(data.n)
    var = np.empty(data.n)
    mean[res.order] = res.pred_mean
    var[res.order] = res.pred_var
    var, n_clamped = _clamp(var)
    return PosteriorResult(mean=mean, var=var, loglik=res.loglik, n_clamped=n_clamped)


# ---------------------------------------------------------------------------
# training


def build_model(spec, order: int | None = None) -> Lssm:
    if isinstance(spec, KernelSpec):
        return convert(spec, order)
    return stack_miso([convert(s, order) for s in spec])


_TRAINABLE = {
    Family.RBF: ("z", "sigma2"),
    Family.MATERN: ("z", "sigma2"),
    Family.PERIODIC: ("z", "sigma2", "omega0"),
}


def _pack(specs: list[KernelSpec], noise: NoiseSpec, train_qc: bool, train_noise: bool):
    names = []
    vals = []
    for i, s in enumerate(specs):
        for p in _TRAINABLE[s.family]:
            names.append((i, p))
            vals.append(getattr(s, p))
        if train_qc and s.qc is not None:
            names.append((i, "qc"))
            vals.append(s.qc)
    if train_noise:
        names.append((-1, "sigma_noise2"))
        vals.append(max(noise.sigma_noise2, 1e-12))
    return names, np.log(np.array(vals, dtype=float))


def _unpack(names, theta, specs, noise):
    vals = np.exp(theta)
    per = [dict() for _ in specs]
    new_noise = noise
    for (i, p), v in zip(names, vals):
        if i < 0:
            new_noise = NoiseSpec(float(v))
        else:
            per[i][p] = float(v)
    return [s.with_params(**kw) for s, kw in zip(specs, per)], new_noise


@dataclass
class TrainResult:
    spec: KernelSpec | list[KernelSpec]
    noise: NoiseSpec
    loglik: float
    initial_loglik: float
    trace: list[float] = field(default_factory=list)
    n_evals: int = 0


def train_hyperparameters(spec, noise: NoiseSpec, data: RegressionDataset, m: int | None = None,
                          budget: int = 200, *, train_qc: bool = False, train_noise: bool = True) -> TrainResult:
    """Maximise the innovations log-likelihood with a Nelder-Mead simplex in log-parameters.

    ``spec`` is one KernelSpec (SISO) or one per input column (additive MISO).
    Each evaluation re-runs the kernel conversion. ``trace`` holds the
    best-so-far log-likelihood after every evaluation.
    """
    single = isinstance(spec, KernelSpec)
    specs = [spec] if single else list(spec)
    if data.n < 4:
        raise ValueError("training needs at least 4 samples")
    names, theta0 = _pack(specs, noise, train_qc, train_noise)

    def evaluate(theta):
        try:
            sp, nz = _unpack(names, theta, specs, noise)
            model = build_model(sp[0] if single else sp, m)
            ll = filter_loglik(model, data, nz)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            return -np.inf
        return ll if np.isfinite(ll) else -np.inf

    init = evaluate(theta0)
    trace = [init]
    if budget <= 0:
        if not np.isfinite(init):
            raise OptimizationError("initial hyperparameters give a non-finite log-likelihood", trace)
        return TrainResult(spec, noise, init, init, trace, 1)

    best = {"theta": theta0, "ll": init}

    def objective(theta):
        ll = evaluate(theta)
        if ll > best["ll"]:
            best["ll"], best["theta"] = ll, np.array(theta)
        trace.append(max(trace[-1], ll))
        return 1e300 if not np.isfinite(ll) else -ll

    if budget > 1:
        minimize(objective, theta0, method="Nelder-Mead",
                 options={"maxfev": budget - 1, "xatol": 1e-4, "fatol": 1e-6, "adaptive": len(theta0) > 4})
    if not np.isfinite(best["ll"]):
        raise OptimizationError(f"all {len(trace)} objective evaluations were non-finite", trace)
    sp, nz = _unpack(names, best["theta"], specs, noise)
    return TrainResult(sp[0] if single else sp, nz, float(best["ll"]), init, trace, len(trace))
