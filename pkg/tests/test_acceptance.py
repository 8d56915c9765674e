"""Acceptance checks, one per criterion, each at its stated tolerance.

Every check prints a single ``ACCEPTANCE <n> PASS|FAIL: ...`` line; the lines
are also collected and repeated in the pytest terminal summary.  Run directly
with ``python tests/test_acceptance.py`` to get only the report.
"""

from __future__ import annotations

import filecmp
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from foliated_averaging.averaging import NumericParams, coupled_errors, estimate_Q
from foliated_averaging.bihari import BihariProblem, DominanceFailure, identity_errors, verify_dominance
from foliated_averaging.cli import run as cli_run
from foliated_averaging.foliation import builtin_system
from foliated_averaging.harness import ExperimentConfig, decompose_errors, run_rate_experiment, summarize_errors
from foliated_averaging.levy import LevyMeasureSpec, UniformLaw, sample_levy_path
from foliated_averaging.marcus import Observer, flow_difference_diagnostics, marcus_flow, pad_events, run_batch
from foliated_averaging.rng import RandomStreams

REPORT: list[str] = []
ROOT = Path(__file__).resolve().parents[1]


def _record(n: int, ok: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    REPORT.append(line)
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1. leaf invariance


class _TransversalDrift(Observer):
    """Largest ``|pi(x) - pi(x0)|`` seen on the grid and right after each jump."""

    def __init__(self, project):
        self.project = project

    def on_start(self, run):
        self.v0 = self.project(run.x).copy()
        self.worst = 0.0

    def on_jump(self, k, rows, ptr, t, pre, post):
        self.worst = max(self.worst, float(np.max(np.abs(self.project(post) - self.v0[rows]))))

    def on_grid(self, k, t, x):
        self.worst = max(self.worst, float(np.max(np.abs(self.project(x) - self.v0))))


def criterion_1() -> bool:
    start = time.perf_counter()
    worst = {}
    for name in ("ou_lines", "rotation_coupled"):
        system = builtin_system(name)
        streams = RandomStreams(1)
        n, horizon = 1000, 10.0
        paths = [sample_levy_path(system.nu, horizon, streams.generator(i, "leaf")) for i in range(n)]
        times, jumps = pad_events(paths, system.nu.dim)
        x0 = np.tile(system.initial_point, (n, 1))
        obs = _TransversalDrift(system.chart.project)
        run_batch(system.leaf_drift, system.leaf_jump, x0, times, jumps, horizon, 1e-2, observers=[obs])
        worst[name] = obs.worst
    elapsed = time.perf_counter() - start
    ok = all(w == 0.0 for w in worst.values()) and elapsed < 30
    return _record(1, ok, f"sup|pi(X_t)-pi(x0)| ou_lines={worst['ou_lines']!r} "
                          f"rotation_coupled={worst['rotation_coupled']!r} (need exactly 0), "
                          f"{elapsed:.1f}s (limit 30s)")


# ---------------------------------------------------------------------------
# 2. Marcus flow oracle


_J = np.array([[0.0, -1.0], [1.0, 0.0]])


def _rotation(x, z):
    return z[..., :1] * (x @ _J.T)


def criterion_2() -> bool:
    start = time.perf_counter()
    x = np.array([1.0, 0.0])
    zs = np.linspace(-math.pi, math.pi, 81)
    flow_err = max(float(np.max(np.abs(marcus_flow(_rotation, x, np.array([z]), 64) - expm(z * _J) @ x)))
                   for z in zs)
    # second-order residual ||Phi(x) - x - F(x) z|| under halving of z
    sizes = 0.8 / 2.0 ** np.arange(6)
    resid = [flow_difference_diagnostics(_rotation, x, x, np.array([z]), 64)[0] * z**2 for z in sizes]
    slope = float(np.polyfit(np.log(sizes), np.log(resid), 1)[0])
    elapsed = time.perf_counter() - start
    ok_flow, ok_slope = flow_err < 1e-8, abs(slope - 2.0) <= 0.2
    ok = ok_flow and ok_slope and elapsed < 5
    return _record(2, ok, f"max flow error over |z|<=pi = {flow_err:.3e} (limit 1e-8, "
                          f"{'met' if ok_flow else 'missed'}); residual slope = {slope:.4f} "
                          f"(target 2.0 +/- 0.2, {'met' if ok_slope else 'missed'}), {elapsed:.2f}s (limit 5s)")


# ---------------------------------------------------------------------------
# 3. ergodic average oracle


def _second_moment_ode(rate: float, m1: float, m2: float, horizon: float = 40.0, dt: float = 1e-4) -> float:
    """Euler solution of the moment ODEs of ``dU = -U dt + dZ`` run to stationarity."""
    a, b = 0.0, 0.0  # E U, E U^2
    for _ in range(int(horizon / dt)):
        a, b = a + dt * (-a + rate * m1), b + dt * (-2.0 * b + 2.0 * rate * m1 * a + rate * m2)
    return b


def _exact_ou_time_average(rate, half_width, horizon, burn, reps, seed):
    """Independent shot-noise simulation: exact decay between jumps, exact integral of u^2."""
    rng = np.random.default_rng(seed)
    out = np.empty(reps)
    for r in range(reps):
        n = rng.poisson(rate * horizon)
        t = np.sort(rng.uniform(0.0, horizon, n))
        xi = rng.uniform(-half_width, half_width, n)
        u, s, acc = 0.0, 0.0, 0.0
        for tk, zk in zip(np.append(t, horizon), np.append(xi, 0.0)):
            lo = max(s, burn)
            if tk > lo:
                # u(r) = u e^{-(r - s)} on [s, tk]; integrate u^2 over [lo, tk]
                acc += u * u * (math.exp(-2 * (lo - s)) - math.exp(-2 * (tk - s))) / 2.0
            u = u * math.exp(-(tk - s)) + zk
            s = tk
        out[r] = acc / (horizon - burn)
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(reps))


def criterion_3() -> bool:
    start = time.perf_counter()
    nu = LevyMeasureSpec(1.0, UniformLaw(1.0))
    system = builtin_system("ou_lines", nu=nu)

    def u_squared(x):
        return x[..., :1] ** 2

    est = estimate_Q(system, u_squared, 0.0, 1e3, 64, RandomStreams(3), step=1e-2, burn_in=0.1)
    value, se = float(est.value[0]), est.std_error
    ode = _second_moment_ode(1.0, 0.0, 1.0 / 3.0)
    sim, sim_se = _exact_ou_time_average(1.0, 1.0, 1e3, 100.0, 64, seed=20240)
    combined = math.hypot(se, sim_se)
    elapsed = time.perf_counter() - start
    ok_ode = abs(value - 1.0 / 6.0) <= 4 * se and abs(ode - 1.0 / 6.0) < 1e-3
    ok_sim = abs(value - sim) <= 4 * combined
    ok = ok_ode and ok_sim and elapsed < 120
    return _record(3, ok, f"estimate {value:.5f} +/- {se:.5f}; moment ODE {ode:.5f} (|diff| {abs(value - ode):.5f} "
                          f"vs 4 SE {4 * se:.5f}); independent run {sim:.5f} +/- {sim_se:.5f} (|diff| "
                          f"{abs(value - sim):.5f} vs 4 combined SE {4 * combined:.5f}), {elapsed:.1f}s (limit 120s)")


# ---------------------------------------------------------------------------
# 4. averaging principle, property form


def criterion_4() -> bool:
    start = time.perf_counter()
    cfg = ExperimentConfig(system="ou_lines", p=2, T=1, eps_grid=(0.2, 0.1, 0.05, 0.025), n_paths=200, seed=0)
    res = run_rate_experiment(cfg)
    # extend with eps = 0.0125 on the same path indices and the same eta0 fit
    extra = 0.0125
    samples = coupled_errors(cfg.build_system(), extra, cfg.T, RandomStreams(cfg.seed), range(cfg.n_paths),
                             cfg.numerics)
    errors = dict(res.samples)
    errors[extra] = np.array([s.sup_error for s in samples])
    trunc = {e: float(f) for e, f in zip(res.eps, res.trunc_frac)}
    trunc[extra] = float(np.mean([s.truncation_cause != "horizon" for s in samples]))
    grid5 = cfg.eps_grid + (extra,)
    ext = summarize_errors(replace(cfg, eps_grid=grid5), grid5, errors, trunc,
                           res.eta0, res.eta0_description)
    elapsed = time.perf_counter() - start

    viol = res.monotone_violations(4.0)
    lo = res.slope - res.slope_halfwidth
    ratio = max(ext.bound_constant, res.bound_constant) / min(ext.bound_constant, res.bound_constant)
    ok_a, ok_b, ok_c = not viol, lo > 0, ratio <= 2.0
    ok = ok_a and ok_b and ok_c and elapsed < 1200
    errs = ", ".join(f"{e:g}:{v:.4f}+/-{s:.4f}" for e, v, s in zip(ext.eps, ext.lp_errors, ext.std_errors))
    return _record(4, ok, f"(a) 4-sigma monotonicity violations {viol} [{'ok' if ok_a else 'fail'}]; "
                          f"(b) lambda_hat {res.slope:.3f}, 95% lower end {lo:.3f} > 0 [{'ok' if ok_b else 'fail'}]; "
                          f"(c) C_hat {res.bound_constant:.4f} -> {ext.bound_constant:.4f}, ratio {ratio:.3f} <= 2 "
                          f"[{'ok' if ok_c else 'fail'}]; L2 errors {errs}; {elapsed:.0f}s (limit 1200s)")


# ---------------------------------------------------------------------------
# 5. exact cancellation


def criterion_5() -> bool:
    start = time.perf_counter()
    system = builtin_system("ou_lines", kappa=0.7, beta=0.0)
    worst = {}
    for eps in (0.2, 0.1, 0.05, 0.025, 0.0125):
        samples = coupled_errors(system, eps, 1.0, RandomStreams(5), range(10), NumericParams(batch_size=10))
        worst[eps] = max(s.sup_error for s in samples)
    elapsed = time.perf_counter() - start
    ok = all(w < 1e-8 for w in worst.values()) and elapsed < 60
    return _record(5, ok, "sup errors " + ", ".join(f"eps={e:g}:{w:.2e}" for e, w in worst.items())
                   + f" (limit 1e-8), {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# 6. block decomposition


def criterion_6() -> bool:
    start = time.perf_counter()
    system = builtin_system("ou_lines")
    decs = decompose_errors(system, 0.1, 1.0, 2.0, RandomStreams(6), range(100))
    bad = [d.path_index for d in decs if not d.triangle_holds]
    slack = min(d.A1 + d.A2 + d.A3 - d.total for d in decs)
    resid = max(d.residual for d in decs)
    elapsed = time.perf_counter() - start
    ok = len(decs) == 100 and not bad and elapsed < 300
    return _record(6, ok, f"{len(bad)} violations of |delta| <= |A1|+|A2|+|A3| in {len(decs)} realizations, "
                          f"smallest slack {slack:.3e}, largest vector residual {resid:.1e}, "
                          f"{elapsed:.1f}s (limit 300s)")


# ---------------------------------------------------------------------------
# 7. Bihari dominance


def criterion_7() -> bool:
    start = time.perf_counter()
    reports, failures, ident = [], [], 0.0
    for p in (2, 3, 4):
        for et in (0.01, 0.05, 0.1):
            prob = BihariProblem(p, et, 1.0, 1.0)
            try:
                rep = verify_dominance(prob)
                reports.append(rep)
                if not rep.holds:
                    failures.append((p, et))
            except DominanceFailure as exc:
                failures.append((p, et, exc.t))
            ident = max(ident, *identity_errors(prob).values())
    fitted = [r.fitted_C for r in reports]
    spread = max(fitted) / min(fitted) if fitted else math.inf
    elapsed = time.perf_counter() - start
    ok = not failures and spread <= 10 and ident < 1e-10 and elapsed < 60
    return _record(7, ok, f"dominance failures {failures}; fitted C in [{min(fitted):.3f}, {max(fitted):.3f}], "
                          f"spread {spread:.2f} (limit 10); identity error {ident:.1e} (limit 1e-10), "
                          f"{elapsed:.2f}s (limit 60s)")


# ---------------------------------------------------------------------------
# 8. reproducibility across thread counts


def criterion_8(workdir: Path) -> bool:
    start = time.perf_counter()
    config = str(ROOT / "configs" / "default.ini")
    outs = []
    for threads in (1, 3):
        out = workdir / f"threads{threads}"
        code = cli_run(["rate", "--config", config, "--seed", "0", "--threads", str(threads), "--out", str(out)])
        if code != 0:
            return _record(8, False, f"rate run with {threads} threads exited with {code}")
        outs.append(out)
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    same = [name for name in csvs if filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False)]
    elapsed = time.perf_counter() - start
    ok = bool(csvs) and same == csvs
    return _record(8, ok, f"byte-identical CSVs at 1 and 3 threads: {same} of {csvs}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# pytest entry points


def test_criterion_1_leaf_invariance():
    assert criterion_1()


def test_criterion_2_marcus_flow_oracle():
    assert criterion_2()


def test_criterion_3_ergodic_average():
    assert criterion_3()


@pytest.mark.slow
def test_criterion_4_averaging_rate_properties():
    assert criterion_4()


def test_criterion_5_exact_cancellation():
    assert criterion_5()


def test_criterion_6_decomposition_identity():
    assert criterion_6()


def test_criterion_7_bihari_dominance():
    assert criterion_7()


@pytest.mark.slow
def test_criterion_8_reproducible_rate_runs(tmp_path):
    assert criterion_8(tmp_path)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(),
                   criterion_7(), criterion_8(Path(tmp))]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
