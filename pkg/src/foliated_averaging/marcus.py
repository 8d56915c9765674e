"""Jump-adapted integration of Marcus canonical SDEs with finite-activity drivers.

Between jumps the drift ODE is advanced with classical RK4 on a uniform grid
(refined so that every jump time is hit exactly).  At a jump time ``t`` with
jump vector ``z`` the state is mapped through the time-one flow of
``dY/dsigma = F(Y) z``, again solved with RK4.

All vector fields act on batches: a field receives states of shape
``(..., D)`` (and jumps of shape ``(..., r)``) and returns ``(..., D)``.
:func:`run_batch` integrates many paths at once; :func:`integrate` is the
single-path front end returning a :class:`SamplePath`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .levy import LevyPath

Field = Callable[[np.ndarray], np.ndarray]
JumpField = Callable[[np.ndarray, np.ndarray], np.ndarray]
Region = Callable[[np.ndarray], np.ndarray]

DEFAULT_ODE_STEPS = 64
DEFAULT_STEP = 1e-3


class FlowDivergenceError(FloatingPointError):
    """The increment ODE produced a non-finite state."""

    def __init__(self, sigma: float, jump_index: Optional[int] = None):
        self.sigma = sigma
        self.jump_index = jump_index
        where = "" if jump_index is None else f" at jump {jump_index}"
        super().__init__(f"Marcus flow diverged{where}; last finite sigma = {sigma:g}")


class DriftDivergenceError(FloatingPointError):
    """The drift ODE produced a non-finite state."""

    def __init__(self, time: float):
        self.time = time
        super().__init__(f"drift integration produced a non-finite state at t = {time!r}")


def rk4_step(f: Field, x: np.ndarray, dt) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + (0.5 * dt) * k1)
    k3 = f(x + (0.5 * dt) * k2)
    k4 = f(x + dt * k3)
    return x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def increment_flow(jump_field: JumpField, x, z, sigma: float = 1.0, ode_steps: int = DEFAULT_ODE_STEPS) -> np.ndarray:
    """RK4 solution ``Y(sigma)`` of ``dY/dsigma = F(Y) z``, ``Y(0) = x``."""
    if ode_steps < 1:
        raise ValueError("ode_steps must be >= 1")
    y = np.array(x, dtype=float, copy=True)
    z = np.asarray(z, dtype=float)
    ds = sigma / ode_steps
    f = lambda state: jump_field(state, z)  # noqa: E731
    for i in range(ode_steps):
        y_new = rk4_step(f, y, ds)
        if not np.all(np.isfinite(y_new)):
            raise FlowDivergenceError(i * ds)
        y = y_new
    return y


def marcus_flow(jump_field: JumpField, x, z, ode_steps: int = DEFAULT_ODE_STEPS) -> np.ndarray:
    """The Marcus jump map ``Phi^{Fz}(x)``: time-one flow of ``dY/dsigma = F(Y) z``."""
    return increment_flow(jump_field, x, z, 1.0, ode_steps)


def flow_difference_diagnostics(jump_field: JumpField, x, y, z, ode_steps: int = DEFAULT_ODE_STEPS):
    """Second-order residual of the Marcus map and its Lipschitz quotient.

    Returns ``(||Phi(x) - x - F(x)z|| / ||z||^2,
    ||R(x) - R(y)|| / (||x - y|| ||z||^2))`` where ``R`` is the residual map.
    The second quotient is reported as 0 when ``x == y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    nz = float(np.linalg.norm(z))
    if nz == 0.0:
        raise ValueError("z = 0 leaves the residual ratios undefined")

    def residual(p):
        return marcus_flow(jump_field, p, z, ode_steps) - p - jump_field(p, z)

    rx = residual(x)
    res = float(np.linalg.norm(rx)) / nz**2
    dxy = float(np.linalg.norm(x - y))
    if dxy == 0.0:
        return res, 0.0
    lip = float(np.linalg.norm(rx - residual(y))) / (dxy * nz**2)
    return res, lip


# ---------------------------------------------------------------------------
# batched engine


class Observer:
    """Hooks called by :func:`run_batch`.  ``rows`` is a slice or index array."""

    def on_start(self, run: "BatchRun"):
        pass

    def on_segment(self, k: int, rows, t0, x0: np.ndarray, t1, x1: np.ndarray):
        pass

    def on_jump(self, k: int, rows, ptr: np.ndarray, t: np.ndarray, pre: np.ndarray, post: np.ndarray):
        pass

    def on_grid(self, k: int, t: float, x: np.ndarray):
        pass


def uniform_grid(horizon: float, h: float) -> np.ndarray:
    """Uniform grid on ``[0, horizon]`` with step ``<= h``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if horizon == 0:
        return np.zeros(1)
    if not h > 0:
        raise ValueError("grid step must be positive")
    n = max(1, math.ceil(horizon / h - 1e-9))
    return horizon * np.arange(n + 1) / n


def pad_events(paths: Sequence[LevyPath], dim: Optional[int] = None):
    """Pack per-path events into ``(B, E+1)`` time and ``(B, E+1, r)`` jump arrays.

    Unused slots carry time ``+inf``; the extra trailing column keeps the event
    pointer in range after the last event of a path.
    """
    if dim is None:
        dim = max((p.dim for p in paths), default=1)
    width = max((len(p) for p in paths), default=0) + 1
    times = np.full((len(paths), width), np.inf)
    jumps = np.zeros((len(paths), width, dim))
    for b, p in enumerate(paths):
        n = len(p)
        times[b, :n] = p.times
        if n:
            jumps[b, :n, : p.dim] = p.jumps
    return times, jumps


@dataclass
class BatchRun:
    """Mutable state of one batched integration, visible to observers."""

    grid: np.ndarray
    x: np.ndarray
    x0: np.ndarray
    exit_time: np.ndarray
    exit_index: np.ndarray  # grid interval index at which exit was detected, -1 if none


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise DriftDivergenceError(float(np.max(t)) if np.ndim(t) else float(t))


def run_batch(
    drift: Field,
    jump_field: Optional[JumpField],
    x0: np.ndarray,
    event_times: np.ndarray,
    event_jumps: np.ndarray,
    horizon: float,
    h: float = DEFAULT_STEP,
    *,
    ode_steps: int = DEFAULT_ODE_STEPS,
    observers: Sequence[Observer] = (),
    exit_region: Optional[Region] = None,
    grid: Optional[np.ndarray] = None,
    jump_map: Optional[Callable] = None,
) -> BatchRun:
    """Integrate ``B`` paths of a Marcus SDE on a common grid.

    Parameters
    ----------
    x0 : (B, D) initial states.
    event_times, event_jumps : padded event arrays from :func:`pad_events`.
    exit_region : optional predicate returning ``True`` for states inside the
        region.  The first grid or post-jump time at which a path is found
        outside is recorded in ``exit_time``; integration continues.
    grid : optional explicit grid (overrides ``horizon``/``h``).
    jump_map : optional closed form ``(x, z) -> Phi^{Fz}(x)`` used instead of
        the RK4 flow, for fields whose Marcus map is known exactly.
    """
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim != 2:
        raise ValueError("x0 must have shape (B, D)")
    B = x.shape[0]
    grid = uniform_grid(horizon, h) if grid is None else np.asarray(grid, dtype=float)
    run = BatchRun(grid, x, x.copy(), np.full(B, np.inf), np.full(B, -1, dtype=int))
    if exit_region is not None:
        out = ~np.asarray(exit_region(x), dtype=bool)
        run.exit_time[out] = grid[0]
        run.exit_index[out] = 0
    for ob in observers:
        ob.on_start(run)

    finite = event_times[np.isfinite(event_times)]
    if finite.size:
        srt = np.sort(finite)
        counts = np.diff(np.searchsorted(srt, grid, side="right"))
    else:
        counts = np.zeros(len(grid) - 1, dtype=int)
    ptr = np.zeros(B, dtype=int)
    rows_all = np.arange(B)
    jump_count = 0

    for k in range(len(grid) - 1):
        t0, t1 = grid[k], grid[k + 1]
        if counts[k] == 0:
            x_old = x
            x = rk4_step(drift, x, t1 - t0)
            _check_finite(x, t1)
            run.x = x
            for ob in observers:
                ob.on_segment(k, slice(None), t0, x_old, t1, x)
        else:
            cur = np.full(B, t0)
            while True:
                nxt = event_times[rows_all, ptr]
                target = np.minimum(nxt, t1)
                move = np.flatnonzero(target > cur)
                if move.size:
                    dt = (target[move] - cur[move])[:, None]
                    x_old = x[move]
                    x_new = rk4_step(drift, x_old, dt)
                    _check_finite(x_new, target[move])
                    x[move] = x_new
                    for ob in observers:
                        ob.on_segment(k, move, cur[move], x_old, target[move], x_new)
                    cur[move] = target[move]
                fire = np.flatnonzero(nxt <= t1)
                if not fire.size:
                    break
                pre = x[fire]
                z = event_jumps[fire, ptr[fire]]
                try:
                    post = marcus_flow(jump_field, pre, z, ode_steps) if jump_map is None else jump_map(pre, z)
                except FlowDivergenceError as err:
                    raise FlowDivergenceError(err.sigma, jump_count) from err
                x[fire] = post
                tf = cur[fire]
                for ob in observers:
                    ob.on_jump(k, fire, ptr[fire].copy(), tf, pre, post)
                if exit_region is not None:
                    out = ~np.asarray(exit_region(post), dtype=bool)
                    new = fire[out & ~np.isfinite(run.exit_time[fire])]
                    run.exit_time[new] = cur[new]
                    run.exit_index[new] = k
                ptr[fire] += 1
                jump_count += fire.size
            run.x = x
        if exit_region is not None:
            fresh = ~np.isfinite(run.exit_time)
            if fresh.any():
                out = fresh & ~np.asarray(exit_region(x), dtype=bool)
                run.exit_time[out] = t1
                run.exit_index[out] = k + 1
        for ob in observers:
            ob.on_grid(k + 1, t1, x)
    run.x = x
    return run


# ---------------------------------------------------------------------------
# single-path front end


@dataclass
class MarcusProblem:
    """One realization of a Marcus SDE: fields, start point, driver path, grid."""

    drift: Field
    jump_field: Optional[JumpField]
    initial_point: np.ndarray
    levy_path: LevyPath
    horizon: float
    grid_step: float = DEFAULT_STEP
    ode_steps: int = DEFAULT_ODE_STEPS

    def __post_init__(self):
        self.initial_point = np.asarray(self.initial_point, dtype=float).reshape(-1)
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")
        if self.horizon > 0 and self.grid_step > self.horizon:
            raise ValueError("grid_step may not exceed a positive horizon")
        if len(self.levy_path) and self.levy_path.times[-1] > self.horizon:
            raise ValueError("driver has events beyond the horizon")
        if len(self.levy_path) and self.jump_field is None:
            raise ValueError("driver has jumps but no jump field was given")


@dataclass
class SamplePath:
    """Càdlàg trajectory: ``states`` are post-jump values, ``pre_states`` left limits.

    ``pre_states`` differs from ``states`` only at jump times.
    """

    times: np.ndarray
    states: np.ndarray
    pre_states: np.ndarray
    jump_mask: np.ndarray
    exit_time: float = np.inf
    exit_index: int = -1

    def __len__(self):
        return len(self.times)

    @property
    def exited(self) -> bool:
        return bool(np.isfinite(self.exit_time))

    def at(self, t: float) -> np.ndarray:
        """State at time ``t`` (right-continuous lookup on the stored times)."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[max(i, 0)]

    def to_csv(self, path, component_names: Optional[Sequence[str]] = None):
        from .io import write_csv

        D = self.states.shape[1]
        names = list(component_names or [f"x_{i}" for i in range(D)])
        header = ["t", "is_jump", *names, *[f"pre_{n}" for n in names]]
        rows = (
            [t, int(j), *s, *ps]
            for t, j, s, ps in zip(self.times, self.jump_mask, self.states, self.pre_states)
        )
        return write_csv(path, header, rows)


class PathRecorder(Observer):
    """Collects full trajectories (grid points plus jump times) for every row."""

    def on_start(self, run):
        B = run.x.shape[0]
        self._rows = [[(run.grid[0], run.x[b].copy(), run.x[b].copy(), False)] for b in range(B)]

    def _push(self, b, t, pre, post, jump):
        last = self._rows[b][-1]
        if last[0] == t:
            # several events at one instant: keep the first left limit
            self._rows[b][-1] = (t, last[1], post.copy(), last[3] or jump)
        else:
            self._rows[b].append((t, pre.copy(), post.copy(), jump))

    def on_jump(self, k, rows, ptr, t, pre, post):
        for i, b in enumerate(rows):
            self._push(b, t[i], pre[i], post[i], True)

    def on_grid(self, k, t, x):
        for b in range(x.shape[0]):
            self._push(b, t, x[b], x[b], False)

    def paths(self, run: BatchRun) -> list[SamplePath]:
        out = []
        for b, rec in enumerate(self._rows):
            out.append(
                SamplePath(
                    times=np.array([r[0] for r in rec]),
                    states=np.array([r[2] for r in rec]),
                    pre_states=np.array([r[1] for r in rec]),
                    jump_mask=np.array([r[3] for r in rec], dtype=bool),
                    exit_time=float(run.exit_time[b]),
                    exit_index=int(run.exit_index[b]),
                )
            )
        return out


def integrate(problem: MarcusProblem, exit_region: Optional[Region] = None) -> SamplePath:
    """Integrate one realization and return its full sample path."""
    times, jumps = pad_events([problem.levy_path])
    rec = PathRecorder()
    run = run_batch(
        problem.drift,
        problem.jump_field,
        problem.initial_point[None, :],
        times,
        jumps,
        problem.horizon,
        problem.grid_step,
        ode_steps=problem.ode_steps,
        observers=[rec],
        exit_region=exit_region,
    )
    return rec.paths(run)[0]


class TimeIntegral(Observer):
    """Trapezoidal ``int f(X_s) ds`` per row, with optional snapshots and cutoffs.

    Only intervals with index ``>= start_index`` contribute.  ``until`` holds a
    per-row upper time limit; with ``stop_on_exit`` the limit is set to the grid
    time closing the interval in which the row left the exit region.
    ``snapshot_indices`` lists grid indices at which the running integral is
    copied into ``snapshots``.
    """

    def __init__(self, f: Field, start_index: int = 0, until=None, stop_on_exit: bool = False,
                 snapshot_indices: Sequence[int] = ()):
        self.f = f
        self.start_index = start_index
        self._until = until
        self.stop_on_exit = stop_on_exit
        self.snapshot_indices = {int(i): j for j, i in enumerate(snapshot_indices)}

    def _eval(self, x):
        v = np.asarray(self.f(x), dtype=float)
        return v[..., None] if v.ndim == x.ndim - 1 else v

    def on_start(self, run):
        self.run = run
        self.last = self._eval(run.x)
        B = run.x.shape[0]
        self.value = np.zeros((B, self.last.shape[-1]))
        self.until = np.full(B, np.inf) if self._until is None else np.array(self._until, dtype=float)
        self.snapshots = np.zeros((len(self.snapshot_indices), B, self.last.shape[-1]))
        if self.stop_on_exit:
            self.until[run.exit_index == 0] = run.grid[0]

    def on_segment(self, k, rows, t0, x0, t1, x1):
        f1 = self._eval(x1)
        if k >= self.start_index:
            dt = np.asarray(t1 - t0, dtype=float)
            w = dt * (np.asarray(t1) <= self.until[rows] + 1e-12)
            self.value[rows] += (0.5 * w)[:, None] * (self.last[rows] + f1)
        self.last[rows] = f1

    def on_jump(self, k, rows, ptr, t, pre, post):
        self.last[rows] = self._eval(post)

    def on_grid(self, k, t, x):
        if self.stop_on_exit:
            newly = (self.run.exit_index >= 0) & ~np.isfinite(self.until)
            # exit detected inside interval k-1 or at grid point k: stop at t_k
            self.until[newly] = t
        j = self.snapshot_indices.get(k)
        if j is not None:
            self.snapshots[j] = self.value
