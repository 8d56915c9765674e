"""Leafwise averages, ergodic rates, the averaged SDE and the coupled averaging error."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .foliation import TestSystem
from .io import read_csv, write_csv
from .levy import LevyPath, sample_levy_path
from .marcus import (
    DEFAULT_ODE_STEPS,
    DEFAULT_STEP,
    Observer,
    SamplePath,
    PathRecorder,
    TimeIntegral,
    pad_events,
    run_batch,
    uniform_grid,
)
from .rng import RandomStreams


class QUnavailableError(RuntimeError):
    """No closed-form average and no reference run allowed."""


class ExtrapolationError(ValueError):
    """A tabulated average was queried outside its grid."""


@dataclass(frozen=True)
class NumericParams:
    """Discretization knobs shared by the experiments.

    ``h`` is the drift step of the perturbed and averaged integrations,
    ``leaf_h`` the step of the long ergodic runs on a single leaf.
    """

    h: float = DEFAULT_STEP
    ode_steps: int = DEFAULT_ODE_STEPS
    leaf_h: float = 1e-2
    burn_in: float = 0.1
    batch_size: int = 100
    threads: int = 1


def _as_rows(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=float))


# ---------------------------------------------------------------------------
# ergodic averages


@dataclass(frozen=True)
class ErgodicEstimate:
    v: np.ndarray
    h_id: str
    value: np.ndarray
    time_horizon: float
    replications: int
    std_error: float
    samples: np.ndarray = field(repr=False, default=None)


def _leaf_runs(system, h, v, horizon, replications, streams, *, u0, step, ode_steps, tag, first_index,
               start_index=0, snapshot_times=()):
    v = _as_rows(v)
    if not bool(system.chart.in_V(v)):
        raise ValueError(f"transversal point {v} lies outside V")
    u = system.chart.leaf_part(system.initial_point) if u0 is None else _as_rows(u0)
    x0 = np.tile(system.chart.point(u, v), (replications, 1))
    paths = [sample_levy_path(system.nu, horizon, streams.generator(first_index + i, tag)) for i in range(replications)]
    times, jumps = pad_events(paths, system.nu.dim)
    grid = uniform_grid(horizon, step)
    snap_idx = []
    if len(snapshot_times):
        grid = np.union1d(grid, np.asarray(snapshot_times, dtype=float))
        snap_idx = np.searchsorted(grid, snapshot_times)
    f = system.pi_K if h is None else h
    acc = TimeIntegral(f, start_index=start_index, snapshot_indices=snap_idx)
    run_batch(system.leaf_drift, system.leaf_jump, x0, times, jumps, horizon, grid=grid,
              ode_steps=ode_steps, observers=[acc], jump_map=system.leaf_jump_map)
    return acc, grid


def estimate_Q(
    system: TestSystem,
    h: Optional[Callable],
    v,
    time_horizon: float,
    replications: int,
    stream: RandomStreams,
    *,
    u0=None,
    step: float = 1e-2,
    burn_in: float = 0.1,
    ode_steps: int = DEFAULT_ODE_STEPS,
    tag: str = "leaf",
    first_index: int = 0,
    h_id: Optional[str] = None,
) -> ErgodicEstimate:
    """Time average of ``h`` along the unperturbed leaf dynamics through ``v``.

    ``h=None`` averages the transversal part of ``K``.  The first ``burn_in``
    fraction of each run is discarded; the standard error is taken across
    replications (``inf`` for a single replication).
    """
    if replications < 1:
        raise ValueError("need at least one replication")
    burn = burn_in * time_horizon
    if not time_horizon > burn:
        raise ValueError("time_horizon must exceed the burn-in")
    grid = uniform_grid(time_horizon, step)
    k_burn = int(round(burn / (grid[1] - grid[0]))) if len(grid) > 1 else 0
    acc, grid = _leaf_runs(system, h, v, time_horizon, replications, stream, u0=u0, step=step,
                           ode_steps=ode_steps, tag=tag, first_index=first_index, start_index=k_burn)
    span = grid[-1] - grid[k_burn]
    samples = acc.value / span
    value = samples.mean(axis=0)
    if replications > 1:
        se = float(np.max(samples.std(axis=0, ddof=1))) / math.sqrt(replications)
    else:
        se = math.inf
    return ErgodicEstimate(_as_rows(v), h_id or ("piK" if h is None else getattr(h, "__name__", "h")),
                           value, float(time_horizon), replications, se, samples)


@dataclass(frozen=True)
class MixingRateEstimate:
    """L^p distance of finite-time averages from the average, and its decay fit."""

    times: np.ndarray
    lp_errors: np.ndarray
    std_errors: np.ndarray
    fitted_form: Optional[str]
    params: dict
    Q_value: np.ndarray
    note: str = ""

    def eta0(self, t):
        t = np.asarray(t, dtype=float)
        if self.fitted_form == "exponential":
            return self.params["C"] * np.exp(-self.params["c"] * t)
        if self.fitted_form == "power":
            return self.params["C"] * t ** (-self.params["alpha"])
        raise ValueError(f"no decay fit available ({self.note})")


def fit_decay(times, errors) -> tuple[Optional[str], dict, str]:
    """Least-squares fits of ``log e`` against ``t`` and ``log t``; keep the better."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = (e > 0) & (t > 0)
    if ok.sum() < 2:
        return None, {}, "fit needs at least two positive errors"
    t, y = t[ok], np.log(e[ok])
    fits = {}
    for form, x in (("exponential", t), ("power", np.log(t))):
        A = np.column_stack([np.ones_like(x), x])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        ssr = float(np.sum((A @ coef - y) ** 2))
        fits[form] = (ssr, coef)
    form = min(fits, key=lambda k: fits[k][0])
    a, b = fits[form][1]
    params = {"C": float(np.exp(a)), "c" if form == "exponential" else "alpha": float(-b),
              "ssr": fits[form][0]}
    return form, params, ""


def estimate_eta0(
    system: TestSystem,
    h: Optional[Callable],
    v,
    time_grid: Sequence[float],
    replications: int,
    p: float,
    stream: RandomStreams,
    *,
    Q=None,
    reference: str = "auto",
    step: float = 1e-2,
    ode_steps: int = DEFAULT_ODE_STEPS,
    tag: str = "leaf",
    first_index: int = 0,
) -> MixingRateEstimate:
    """Monte Carlo ``(E|t^-1 int_0^t h(X_s) ds - Q|^p)^(1/p)`` along ``time_grid``.

    The reference value ``Q`` is, in order: the argument, the closed form
    (only for ``h=None``), or a run ten times longer than the last time when
    ``reference`` allows it.
    """
    tg = np.asarray(time_grid, dtype=float)
    if tg.ndim != 1 or tg.size < 1 or np.any(tg <= 0) or np.any(np.diff(tg) <= 0):
        raise ValueError("time_grid must be positive and strictly increasing")
    if not p >= 2:
        raise ValueError("p must be >= 2")
    v = _as_rows(v)
    if Q is None:
        if h is None and system.closed_form_Q is not None and reference in ("auto", "closed_form"):
            Q = system.closed_form_Q(v)
        elif reference in ("auto", "run"):
            ref = estimate_Q(system, h, v, 10.0 * tg[-1], replications, stream, step=step,
                             ode_steps=ode_steps, tag=tag, first_index=first_index + replications)
            Q = ref.value
        else:
            raise QUnavailableError("no closed-form average and reference runs are disabled")
    Q = _as_rows(Q)
    acc, grid = _leaf_runs(system, h, v, tg[-1], replications, stream, u0=None, step=step, ode_steps=ode_steps,
                           tag=tag, first_index=first_index, snapshot_times=tg)
    averages = acc.snapshots / tg[:, None, None]  # (n_t, R, m)
    dev = np.linalg.norm(averages - Q, axis=-1) ** p  # (n_t, R)
    m = dev.mean(axis=1)
    lp = m ** (1.0 / p)
    if replications > 1:
        se_m = dev.std(axis=1, ddof=1) / math.sqrt(replications)
        with np.errstate(divide="ignore", invalid="ignore"):
            se = np.where(m > 0, lp * se_m / (p * m), 0.0)
    else:
        se = np.full_like(lp, np.inf)
    form, params, note = fit_decay(tg, lp)
    if tg.size < 2:
        note = "fit needs at least two times"
    return MixingRateEstimate(tg, lp, se, form, params, Q, note)


# ---------------------------------------------------------------------------
# tabulated averages


@dataclass(frozen=True)
class QTable:
    """Averages on a 1-d grid of transversal points, interpolated piecewise linearly."""

    v: np.ndarray
    Q: np.ndarray
    std_error: np.ndarray
    horizon: float
    reps: int

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        flat = v[..., 0]
        if np.any(flat < self.v[0] - 1e-12) or np.any(flat > self.v[-1] + 1e-12):
            raise ExtrapolationError(
                f"Q table covers [{self.v[0]}, {self.v[-1]}], queried at "
                f"[{float(np.min(flat))}, {float(np.max(flat))}]"
            )
        return np.interp(flat, self.v, self.Q)[..., None]

    def to_csv(self, path):
        rows = zip(self.v, self.Q, self.std_error, [self.horizon] * len(self.v), [self.reps] * len(self.v))
        return write_csv(path, ["v", "Q", "std_error", "horizon", "reps"], rows)

    @classmethod
    def from_csv(cls, path) -> "QTable":
        header, rows = read_csv(path)
        if header != ["v", "Q", "std_error", "horizon", "reps"]:
            raise ValueError(f"unexpected Q table header {header}")
        a = np.array(rows, dtype=float)
        order = np.argsort(a[:, 0])
        a = a[order]
        return cls(a[:, 0], a[:, 1], a[:, 2], float(a[0, 3]), int(a[0, 4]))


def build_Q_table(system: TestSystem, v_grid, time_horizon, replications, stream: RandomStreams,
                  h: Optional[Callable] = None, **kw) -> QTable:
    """Ergodic averages of ``h`` (default the transversal part of ``K``) on a sorted ``v`` grid."""
    if system.chart.transversal_dim != 1:
        raise NotImplementedError("Q tables are one-dimensional")
    vs = np.sort(np.asarray(v_grid, dtype=float))
    ests = [estimate_Q(system, h, v, time_horizon, replications, stream, **kw) for v in vs]
    return QTable(vs, np.array([e.value[0] for e in ests]), np.array([e.std_error for e in ests]),
                  float(time_horizon), int(replications))


def resolve_Q(system: TestSystem, Q_source) -> Callable:
    if Q_source is None or (isinstance(Q_source, str) and Q_source == "closed_form"):
        if system.closed_form_Q is None:
            raise QUnavailableError(f"{system.name} has no closed-form average; supply a Q table")
        return system.closed_form_Q
    if callable(Q_source):
        return Q_source
    raise TypeError(f"cannot use {Q_source!r} as an average")


# ---------------------------------------------------------------------------
# averaged SDE


def _fixed_grid(horizon: float, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(1)
    g = horizon * np.arange(n + 1) / n
    g[-1] = horizon
    return g


def integrate_averaged(
    system: TestSystem,
    Q_source,
    v0,
    T: float,
    levy_path_tilde: LevyPath,
    h_step: float = DEFAULT_STEP,
    ode_steps: int = DEFAULT_ODE_STEPS,
) -> SamplePath:
    """Marcus integration of ``dw = Q(w) dt + Ktilde(w) <> dZtilde`` on ``[0, T]``.

    The returned path carries the first exit time from ``V`` as ``exit_time``.
    """
    v0 = _as_rows(v0)
    if not bool(system.chart.in_V(v0)):
        raise ValueError("v0 must lie in V")
    Q = resolve_Q(system, Q_source)
    times, jumps = pad_events([levy_path_tilde], system.nu_prime.dim)
    rec = PathRecorder()
    run = run_batch(Q, system.averaged_jump, v0[None, :], times, jumps, T, h_step, ode_steps=ode_steps,
                    observers=[rec], exit_region=system.chart.in_V)
    return rec.paths(run)[0]


# ---------------------------------------------------------------------------
# coupled averaging error


@dataclass(frozen=True)
class CoupledErrorSample:
    eps: float
    T: float
    sup_error: float
    truncation_cause: str  # "horizon" | "tau_exit" | "sigma_exit"
    truncation_time: float
    path_index: int = 0


def stacked_driver(z_path: LevyPath, zt_path: LevyPath, eps: float):
    """Driver of the perturbed system on the fast clock.

    ``Ztilde`` events at time ``t`` reappear at ``t / eps`` with jump
    ``z / eps``; through the ``eps * Ktilde`` coefficient this applies exactly
    the jump ``Ktilde z`` that the averaged equation sees at ``t``.
    Returns the merged path and, per event, the index of the ``Ztilde`` event
    it came from (``-1`` for leaf events).
    """
    r, rt = z_path.dim, zt_path.dim
    t = np.concatenate([z_path.times, zt_path.times / eps])
    z = np.zeros((len(t), r + rt))
    z[: len(z_path), :r] = z_path.jumps
    z[len(z_path) :, r:] = zt_path.jumps / eps
    src = np.concatenate([np.full(len(z_path), -1), np.arange(len(zt_path))])
    order = np.argsort(t, kind="stable")
    horizon = max(z_path.horizon, zt_path.horizon / eps)
    return LevyPath(horizon, t[order], z[order]), src[order]


class _GridRecorder(Observer):
    def __init__(self, project=None):
        self.project = project

    def on_start(self, run):
        x = run.x if self.project is None else self.project(run.x)
        self.values = np.empty((len(run.grid),) + x.shape)
        self.values[0] = x

    def on_grid(self, k, t, x):
        self.values[k] = x if self.project is None else self.project(x)


class _EventRecorder(Observer):
    def __init__(self, width):
        self.width = width

    def on_start(self, run):
        B, d = run.x.shape
        self.pre = np.full((B, self.width, d), np.nan)
        self.post = np.full((B, self.width, d), np.nan)

    def on_jump(self, k, rows, ptr, t, pre, post):
        self.pre[rows, ptr] = pre
        self.post[rows, ptr] = post


class _CoupledSup(Observer):
    """Running ``sup |pi(X^eps_{t/eps}) - w_t|`` on the merged grid."""

    def __init__(self, project, w_grid_vals, w_pre, w_post, w_grid, sigma, src, zt_times):
        self.project = project
        self.w_vals = w_grid_vals
        self.w_pre, self.w_post = w_pre, w_post
        self.w_grid = w_grid
        self.sigma = sigma
        self.src = src
        self.zt_times = zt_times

    def on_start(self, run):
        self.run = run
        B = run.x.shape[0]
        self.sup = np.zeros(B)
        self._update(np.arange(B), run.grid[0], self.w_grid[0], self.project(run.x) - self.w_vals[0])

    def _update(self, rows, s, t, diff):
        err = np.linalg.norm(diff, axis=-1)
        active = (s <= self.run.exit_time[rows]) & (t <= self.sigma[rows])
        self.sup[rows] = np.where(active, np.maximum(self.sup[rows], err), self.sup[rows])

    def on_jump(self, k, rows, ptr, t, pre, post):
        j = self.src[rows, ptr]
        mask = j >= 0
        if not mask.any():
            return
        rows, j, t = rows[mask], j[mask], t[mask]
        tw = self.zt_times[rows, j]
        self._update(rows, t, tw, self.project(pre[mask]) - self.w_pre[rows, j])
        self._update(rows, t, tw, self.project(post[mask]) - self.w_post[rows, j])

    def on_grid(self, k, t, x):
        rows = np.arange(x.shape[0])
        self._update(rows, t, self.w_grid[k], self.project(x) - self.w_vals[k])


def _coupled_batch(system, eps, T, streams, indices, params: NumericParams, Q):
    chart = system.chart
    v0 = chart.project(system.initial_point)
    if not bool(chart.in_V(v0)):
        raise ValueError("initial point exits the chart at time 0")
    B = len(indices)
    z_paths = [sample_levy_path(system.nu, T / eps, streams.generator(i, "Z")) for i in indices]
    zt_paths = [sample_levy_path(system.nu_prime, T, streams.generator(i, "Ztilde")) for i in indices]
    n = math.ceil(T / (eps * params.h) - 1e-9) if T > 0 else 0
    w_grid = _fixed_grid(T, n)
    x_grid = _fixed_grid(T / eps, n)

    # averaged equation on the slow clock
    wt, wj = pad_events(zt_paths, system.nu_prime.dim)
    w_rec, w_ev = _GridRecorder(), _EventRecorder(wt.shape[1])
    w_run = run_batch(Q, system.averaged_jump, np.tile(v0, (B, 1)), wt, wj, T, grid=w_grid,
                      ode_steps=params.ode_steps, observers=[w_rec, w_ev], exit_region=chart.in_V)
    sigma = w_run.exit_time

    # perturbed system on the fast clock, same Ztilde realization
    stacked = [stacked_driver(zp, ztp, eps) for zp, ztp in zip(z_paths, zt_paths)]
    xt, xj = pad_events([s[0] for s in stacked], system.nu.dim + system.nu_prime.dim)
    src = np.full(xt.shape, -1)
    for b, (_, s) in enumerate(stacked):
        src[b, : len(s)] = s
    sup = _CoupledSup(chart.project, w_rec.values, w_ev.pre, w_ev.post, w_grid, sigma, src, wt)
    x_run = run_batch(system.perturbed_drift(eps), system.perturbed_jump(eps),
                      np.tile(system.initial_point, (B, 1)), xt, xj, T / eps, grid=x_grid,
                      ode_steps=params.ode_steps, observers=[sup], exit_region=chart.in_U)

    out = []
    for b, idx in enumerate(indices):
        cands = {"horizon": T, "tau_exit": eps * x_run.exit_time[b], "sigma_exit": sigma[b]}
        cause = min(cands, key=lambda c: (cands[c], c != "horizon"))
        out.append(CoupledErrorSample(float(eps), float(T), float(sup.sup[b]), cause,
                                      float(cands[cause]), int(idx)))
    return out


def coupled_errors(
    system: TestSystem,
    eps: float,
    T: float,
    stream: RandomStreams,
    path_indices: Sequence[int],
    params: NumericParams = NumericParams(),
    Q_source=None,
) -> list[CoupledErrorSample]:
    """Coupled sup-errors for many paths, batched and ordered by path index."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not 0 <= T <= 1:
        raise ValueError("T must lie in [0, 1]")
    Q = resolve_Q(system, Q_source)
    idx = list(path_indices)
    batches = [idx[i : i + params.batch_size] for i in range(0, len(idx), params.batch_size)]
    work = lambda b: _coupled_batch(system, eps, T, stream, b, params, Q)  # noqa: E731
    if params.threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(params.threads) as pool:
            results = list(pool.map(work, batches))
    else:
        results = [work(b) for b in batches]
    return [s for batch in results for s in batch]


def coupled_error(
    system: TestSystem,
    eps: float,
    T: float,
    p: float,
    stream: RandomStreams,
    numeric_params: NumericParams = NumericParams(),
    path_index: int = 0,
    Q_source=None,
) -> CoupledErrorSample:
    """One strongly coupled realization of ``sup |pi(X^eps_{t/eps}) - w_t|``.

    ``Z`` is sampled on ``[0, T/eps]`` and ``Ztilde`` on ``[0, T]`` from the
    streams keyed by ``path_index``; the sup runs over the common grid and the
    ``Ztilde`` jump instants up to ``T ^ eps*tau ^ sigma``.
    """
    if not p >= 2:
        raise ValueError("p must be >= 2")
    return coupled_errors(system, eps, T, stream, [path_index], numeric_params, Q_source)[0]


def lp_norm(samples: Sequence[float], p: float) -> tuple[float, float]:
    """``(mean |x|^p)^(1/p)`` with a delta-method standard error."""
    x = np.abs(np.asarray(samples, dtype=float)) ** p
    m = float(x.mean())
    val = m ** (1.0 / p)
    if len(x) < 2 or m == 0:
        return val, 0.0
    se_m = float(x.std(ddof=1)) / math.sqrt(len(x))
    return val, val * se_m / (p * m)
