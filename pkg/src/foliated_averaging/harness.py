"""Epsilon-sweep experiments, rate fits, and the block decomposition of the averaging error."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .averaging import (
    NumericParams,
    coupled_errors,
    estimate_eta0,
    lp_norm,
    resolve_Q,
    stacked_driver,
)
from .foliation import TestSystem, builtin_system
from .io import write_csv
from .levy import sample_levy_path
from .marcus import TimeIntegral, run_batch, uniform_grid
from .rng import RandomStreams


class DegenerateExperimentError(RuntimeError):
    """Every path of some epsilon was truncated at time zero."""


def lambda_ceiling(p: float) -> float:
    """Upper end ``(p - 1) / p^2`` of the admissible rate exponents."""
    return (p - 1.0) / p**2


def c_lambda(k2: float, p: float, lam: float) -> float:
    """Time-window constant ``(1/k2) ((p-1)/p^2 - lambda)``."""
    if not k2 > 0:
        raise ValueError("k2 must be positive")
    if not 0 < lam < lambda_ceiling(p):
        raise ValueError("lambda must lie in (0, (p-1)/p^2)")
    return (lambda_ceiling(p) - lam) / k2


def fit_growth_rate(T_values, errors) -> tuple[float, float]:
    """Fit ``error ~ k1 exp(k2 T)``; returns ``(k1, k2)``."""
    T = np.asarray(T_values, dtype=float)
    y = np.log(np.asarray(errors, dtype=float))
    slope, intercept = np.polyfit(T, y, 1)
    return float(np.exp(intercept)), float(slope)


# ---------------------------------------------------------------------------
# partition of the fast time axis


@dataclass(frozen=True)
class PartitionScheme:
    eps: float
    c: float
    T: float
    delta: float
    N: int

    @property
    def points(self) -> np.ndarray:
        return self.delta * np.arange(self.N + 1)

    def blocks(self, end: Optional[float] = None) -> list[tuple[float, float]]:
        """Blocks ``[n delta, (n+1) delta]`` clipped to ``[0, end]`` (default ``T/eps``)."""
        end = self.T / self.eps if end is None else end
        out, a = [], 0.0
        n = 0
        while a < end:
            b = min((n + 1) * self.delta, end)
            out.append((a, b))
            n += 1
            a = b
        return out


def partition(eps: float, c: float, T: float) -> PartitionScheme:
    """Step ``-c T ln eps`` and block count ``floor(1 / (c eps |ln eps|))``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not (c > 0 and T > 0):
        raise ValueError("c and T must be positive")
    L = abs(math.log(eps))
    return PartitionScheme(eps, c, T, c * T * L, math.floor(1.0 / (c * eps * L)))


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of one epsilon sweep.

    ``lambda_target`` defaults to 0.8 of the admissible ceiling.  ``eta0`` is
    ``"estimate"`` (fit the ergodic rate before the sweep) or ``"none"``.
    """

    system: str = "ou_lines"
    system_params: dict = field(default_factory=dict)
    p: float = 2.0
    T: float = 1.0
    eps_grid: tuple = (0.2, 0.1, 0.05, 0.025)
    n_paths: int = 200
    lambda_target: Optional[float] = None
    c: float = 1.0
    c_grid: tuple = (0.5, 1.0, 2.0)
    seed: int = 0
    numerics: NumericParams = NumericParams()
    eta0: str = "estimate"
    eta0_times: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    eta0_replications: int = 64
    q_table: Optional[str] = None

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError("p must be >= 2")
        if not 0 < self.T <= 1:
            raise ValueError("T must lie in (0, 1]")
        eps = tuple(float(e) for e in self.eps_grid)
        object.__setattr__(self, "eps_grid", eps)
        if not eps or any(not 0 < e <= 1 for e in eps):
            raise ValueError("eps grid values must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps grid must be strictly decreasing")
        if self.n_paths < 2:
            raise ValueError("n_paths must be >= 2")
        lam = 0.8 * lambda_ceiling(self.p) if self.lambda_target is None else float(self.lambda_target)
        if not 0 < lam < lambda_ceiling(self.p):
            raise ValueError(
                f"lambda_target={lam} outside (0, {lambda_ceiling(self.p)}) for p={self.p}"
            )
        object.__setattr__(self, "lambda_target", lam)
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.eta0 not in ("estimate", "none"):
            raise ValueError("eta0 must be 'estimate' or 'none'")

    def build_system(self) -> TestSystem:
        return builtin_system(self.system, **self.system_params)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    halfwidth: float
    prefactor: float


def fit_loglog(eps, errors, std_errors=None, level: float = 0.95) -> SlopeFit:
    """Weighted least squares of ``ln error`` on ``ln eps``.

    Weights are inverse delta-method variances of ``ln error`` when every
    standard error is positive.  The slope variance is the larger of the
    weight-implied and the residual-implied one; the half-width uses a
    Student-t quantile with ``n - 2`` degrees of freedom.
    """
    x = np.log(np.asarray(eps, dtype=float))
    e = np.asarray(errors, dtype=float)
    if len(x) < 3:
        raise ValueError("slope fit needs at least 3 eps values")
    if np.any(e <= 0):
        raise ValueError("errors must be positive for a log-log fit")
    y = np.log(e)
    se = None if std_errors is None else np.asarray(std_errors, dtype=float)
    weighted = se is not None and np.all(se > 0)
    w = (e / se) ** 2 if weighted else np.ones_like(x)
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = float(np.sum(w * (x - xm) ** 2))
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    s2 = float(np.sum(w * resid**2)) / (len(x) - 2)
    var = max(s2, 1.0 if weighted else 0.0) / sxx
    half = float(stats.t.ppf(0.5 + level / 2, len(x) - 2) * math.sqrt(var))
    return SlopeFit(slope, half, float(math.exp(intercept)))


def bound_constant(eps, errors, T, lam, eta0: Callable, c: float) -> float:
    """Smallest ``C`` with ``error <= C T [eps^lam + eta0(c T |ln eps|)]`` on the grid."""
    eps = np.asarray(eps, dtype=float)
    shape = T * (eps**lam + np.asarray([eta0(c * T * abs(math.log(e))) for e in eps]))
    return float(np.max(np.asarray(errors, dtype=float) / shape))


@dataclass
class RateFitResult:
    eps: np.ndarray
    lp_errors: np.ndarray
    std_errors: np.ndarray
    trunc_frac: np.ndarray
    n_paths: int
    p: float
    T: float
    slope: float
    slope_halfwidth: float
    prefactor: float
    bound_constant: float
    bound_values: np.ndarray
    lambda_target: float
    c: float
    c_sensitivity: dict
    eta0_description: str = ""
    samples: dict = field(default_factory=dict, repr=False)
    eta0: Optional[Callable] = field(default=None, repr=False, compare=False)

    @property
    def lambda_ceiling(self) -> float:
        return lambda_ceiling(self.p)

    def monotone_violations(self, n_sigma: float = 4.0) -> list[int]:
        """Grid indices where the error grows as eps shrinks beyond ``n_sigma`` bands."""
        bad = []
        for i in range(len(self.eps) - 1):
            band = n_sigma * math.hypot(self.std_errors[i], self.std_errors[i + 1])
            if self.lp_errors[i + 1] > self.lp_errors[i] + band:
                bad.append(i + 1)
        return bad

    CSV_HEADER = ("eps", "p", "T", "n_paths", "lp_sup_error", "std_error", "trunc_frac", "bound_value")

    def csv_rows(self):
        for i, e in enumerate(self.eps):
            yield (e, self.p, self.T, self.n_paths, self.lp_errors[i], self.std_errors[i],
                   self.trunc_frac[i], self.bound_values[i])

    def to_csv(self, path):
        return write_csv(path, self.CSV_HEADER, self.csv_rows())

    def summary(self) -> dict:
        return {
            "lambda_hat": self.slope,
            "lambda_hat_halfwidth_95": self.slope_halfwidth,
            "prefactor": self.prefactor,
            "bound_constant": self.bound_constant,
            "lambda_target": self.lambda_target,
            "lambda_ceiling": self.lambda_ceiling,
            "c": self.c,
            "c_sensitivity": {repr(k): v for k, v in self.c_sensitivity.items()},
            "eps_grid": [float(e) for e in self.eps],
            "p": self.p,
            "T": self.T,
            "n_paths": self.n_paths,
            "eta0": self.eta0_description,
        }


def _eta0_function(config: ExperimentConfig, system: TestSystem, streams: RandomStreams, Q):
    if config.eta0 == "none":
        return (lambda t: 0.0), "none"
    v0 = system.chart.project(system.initial_point)
    est = estimate_eta0(system, None, v0, config.eta0_times, config.eta0_replications, config.p, streams,
                        Q=Q(v0), step=config.numerics.leaf_h, ode_steps=config.numerics.ode_steps,
                        first_index=1_000_000)
    if est.fitted_form is None:
        return (lambda t: 0.0), f"no fit ({est.note})"
    desc = est.fitted_form + "(" + ", ".join(f"{k}={v:.6g}" for k, v in est.params.items() if k != "ssr") + ")"
    return (lambda t: float(est.eta0(t))), desc


def summarize_errors(config, eps_values, errors_by_eps, trunc_by_eps, eta0, eta0_desc) -> RateFitResult:
    p, T = config.p, config.T
    lp, se = [], []
    for e in eps_values:
        a, b = lp_norm(errors_by_eps[e], p)
        lp.append(a)
        se.append(b)
    lp, se = np.array(lp), np.array(se)
    fit = fit_loglog(eps_values, lp, se)
    C = bound_constant(eps_values, lp, T, config.lambda_target, eta0, config.c)
    bounds = np.array([C * T * (e**config.lambda_target + eta0(config.c * T * abs(math.log(e)))) for e in eps_values])
    sens = {c: bound_constant(eps_values, lp, T, config.lambda_target, eta0, c) for c in config.c_grid}
    return RateFitResult(np.asarray(eps_values, dtype=float), lp, se, np.array([trunc_by_eps[e] for e in eps_values]),
                         config.n_paths, p, T, fit.slope, fit.halfwidth, fit.prefactor, C, bounds,
                         config.lambda_target, config.c, sens, eta0_desc, dict(errors_by_eps), eta0)


def run_rate_experiment(
    config: ExperimentConfig,
    *,
    error_injector: Optional[Callable[[float], float]] = None,
    Q_source=None,
    on_eps: Optional[Callable] = None,
) -> RateFitResult:
    """Sweep the eps grid, take L^p norms of the coupled sup-errors, fit the rate.

    ``error_injector`` replaces the simulation by a deterministic error curve
    (every path gets ``error_injector(eps)``), which exercises the fitter.
    ``on_eps(eps, samples)`` is called after each eps, in grid order.
    """
    streams = RandomStreams(config.seed)
    errors, trunc = {}, {}
    if error_injector is not None:
        eta0, desc = (lambda t: 0.0), "none"
        for e in config.eps_grid:
            errors[e] = np.full(config.n_paths, float(error_injector(e)))
            trunc[e] = 0.0
            if on_eps:
                on_eps(e, None)
        return summarize_errors(config, config.eps_grid, errors, trunc, eta0, desc)

    system = config.build_system()
    if not bool(system.chart.in_U(system.initial_point[None])[0]):
        raise DegenerateExperimentError("the initial point lies outside the chart: every path stops at time 0")
    if Q_source is None and config.q_table:
        from .averaging import QTable

        Q_source = QTable.from_csv(config.q_table)
    Q = resolve_Q(system, Q_source)
    eta0, desc = _eta0_function(config, system, streams, Q)
    for e in config.eps_grid:
        samples = coupled_errors(system, e, config.T, streams, range(config.n_paths), config.numerics, Q)
        if all(s.truncation_time == 0 for s in samples):
            raise DegenerateExperimentError(f"every path truncated at time 0 for eps={e}")
        errors[e] = np.array([s.sup_error for s in samples])
        trunc[e] = float(np.mean([s.truncation_cause != "horizon" for s in samples]))
        if on_eps:
            on_eps(e, samples)
    return summarize_errors(config, config.eps_grid, errors, trunc, eta0, desc)


# ---------------------------------------------------------------------------
# block decomposition of the integrated averaging error


@dataclass(frozen=True)
class Decomposition:
    """Norms of the three block sums and of their total ``delta``.

    ``residual`` is ``|A1 + A2 + A3 - delta|`` computed on the vectors, which
    vanishes in exact arithmetic.
    """

    A1: float
    A2: float
    A3: float
    total: float
    path_index: int = 0
    residual: float = 0.0

    @property
    def triangle_holds(self) -> bool:
        s = self.A1 + self.A2 + self.A3
        return self.total <= s + 64 * np.finfo(float).eps * s + self.residual


def _norm(x):
    return np.linalg.norm(np.atleast_2d(x), axis=-1)


def decompose_errors(
    system: TestSystem,
    eps: float,
    T: float,
    p: float,
    stream: RandomStreams,
    path_indices: Sequence[int],
    params: NumericParams = NumericParams(),
    c: float = 1.0,
    Q_source=None,
) -> list[Decomposition]:
    """Split ``delta = eps int_0^{T/eps ^ tau} (h - Q o pi)(X^eps_s) ds`` over blocks.

    ``h`` is the transversal part of ``K``.  On each block ``[t_n, t_{n+1}]``:
    A1 compares the perturbed path with the unperturbed one restarted at
    ``X^eps_{t_n}`` under the same leaf noise, A2 compares that frozen run's
    integral with ``(t_{n+1} - t_n) Q(pi X^eps_{t_n})``, A3 compares the
    latter with the integral of ``Q o pi`` along the perturbed path.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not 0 < T <= 1:
        raise ValueError("T must lie in (0, 1]")
    if not p >= 2:
        raise ValueError("p must be >= 2")
    Q = resolve_Q(system, Q_source)
    chart = system.chart
    idx = list(path_indices)
    B = len(idx)
    part = partition(eps, c, T)
    z_paths = [sample_levy_path(system.nu, T / eps, stream.generator(i, "Z")) for i in idx]
    zt_paths = [sample_levy_path(system.nu_prime, T, stream.generator(i, "Ztilde")) for i in idx]
    drivers = [stacked_driver(zp, ztp, eps)[0] for zp, ztp in zip(z_paths, zt_paths)]
    r = system.nu.dim + system.nu_prime.dim
    x = np.tile(system.initial_point, (B, 1))
    if not np.all(chart.in_U(x)):
        raise ValueError("initial point exits the chart at time 0")
    d = chart.transversal_dim
    A1, A2, A3 = np.zeros((B, d)), np.zeros((B, d)), np.zeros((B, d))
    delta = np.zeros((B, d))
    stopped = np.zeros(B, dtype=bool)
    Qpi = lambda y: Q(chart.project(y))  # noqa: E731
    drift, jump = system.perturbed_drift(eps), system.perturbed_jump(eps)
    for a, b in part.blocks():
        L = b - a
        window = [(dv.times > a) & (dv.times <= b) for dv in drivers]
        pt, pj = _window_events(drivers, window, a, r)
        grid = uniform_grid(L, params.h)
        grid[-1] = L
        until0 = np.where(stopped, 0.0, np.inf)
        I_h = TimeIntegral(system.pi_K, until=until0, stop_on_exit=True)
        I_q = TimeIntegral(Qpi, until=until0, stop_on_exit=True)
        x_start = x.copy()
        q_start = Q(chart.project(x_start))
        run = run_batch(drift, jump, x_start, pt, pj, L, grid=grid, ode_steps=params.ode_steps,
                        observers=[I_h, I_q], exit_region=chart.in_U)
        cut = np.minimum(I_h.until, L)
        # frozen leaf flow restarted at the block start, same leaf noise
        leaf_window = [(zp.times > a) & (zp.times <= b) for zp in z_paths]
        ft, fj = _window_events(z_paths, leaf_window, a, system.nu.dim)
        I_f = TimeIntegral(system.pi_K, until=cut)
        run_batch(system.leaf_drift, system.leaf_jump, x_start, ft, fj, L, grid=grid,
                  ode_steps=params.ode_steps, observers=[I_f], jump_map=system.leaf_jump_map)
        length = np.clip(cut, 0.0, L)[:, None]
        A1 += eps * (I_h.value - I_f.value)
        A2 += eps * (I_f.value - length * q_start)
        A3 += eps * (length * q_start - I_q.value)
        delta += eps * (I_h.value - I_q.value)
        x = run.x
        stopped |= np.isfinite(I_h.until)
    n1, n2, n3, nd = _norm(A1), _norm(A2), _norm(A3), _norm(delta)
    resid = _norm(A1 + A2 + A3 - delta)
    return [Decomposition(float(n1[k]), float(n2[k]), float(n3[k]), float(nd[k]), int(i), float(resid[k]))
            for k, i in enumerate(idx)]


def _window_events(paths, masks, offset, dim):
    width = max((int(m.sum()) for m in masks), default=0) + 1
    times = np.full((len(paths), width), np.inf)
    jumps = np.zeros((len(paths), width, dim))
    for b, (pth, m) in enumerate(zip(paths, masks)):
        n = int(m.sum())
        if n:
            times[b, :n] = pth.times[m] - offset
            jumps[b, :n] = pth.jumps[m]
    return times, jumps


def decompose_error(system: TestSystem, eps: float, T: float, p: float, stream: RandomStreams,
                    path_index: int = 0, params: NumericParams = NumericParams(), c: float = 1.0,
                    Q_source=None) -> Decomposition:
    """Single-realization form of :func:`decompose_errors`."""
    return decompose_errors(system, eps, T, p, stream, [path_index], params, c, Q_source)[0]
