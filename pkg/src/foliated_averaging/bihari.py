"""Nonlinear Gronwall-Bihari comparison: Pachpatte envelope, power-law bound, maximal solutions.

The integral inequality treated here is

    Psi(t) <= eps c t^p + eps c int_0^t (Psi(s) + Psi(s)^((p-1)/p)) ds,   t in [0, T].

Its equality version has a pointwise-maximal solution ``Psi*``; the Pachpatte
envelope ``P`` dominates every solution of the inequality and in turn is
dominated by ``C (eps t^p + t^p (eps t)^((p-1)/p))`` for a finite ``C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from scipy import integrate


class SmallnessViolationError(ValueError):
    """``eps * T`` exceeds the smallness threshold ``k``."""


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration did not reach the tolerance."""


class DominanceFailure(AssertionError):
    def __init__(self, t: float, psi: float, bound: float):
        super().__init__(f"dominance fails at t={t!r}: Psi*={psi!r} > bound={bound!r}")
        self.t, self.psi, self.bound = t, psi, bound


@dataclass(frozen=True)
class BihariProblem:
    """Parameters of the inequality; ``m`` grid intervals on ``[0, T]``.

    ``eps`` may be zero (everything then vanishes).  The threshold is
    inclusive: ``eps * T <= k`` is admissible.
    """

    p: float
    eps: float
    c: float = 1.0
    T: float = 1.0
    m: int = 1000
    k: float = 0.1

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError("p must be >= 2")
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if not (self.c > 0 and self.T > 0 and self.k > 0):
            raise ValueError("c, T and k must be positive")
        if int(self.m) != self.m or self.m < 10:
            raise ValueError("grid resolution m must be an integer >= 10")

    @property
    def small(self) -> bool:
        return self.eps * self.T <= self.k

    @property
    def grid(self) -> np.ndarray:
        g = np.linspace(0.0, self.T, int(self.m) + 1)
        g[-1] = self.T
        return g

    @property
    def exponent(self) -> float:
        return (self.p - 1.0) / self.p


@dataclass(frozen=True)
class PachpatteCoefficients:
    """Coefficients for ``e = eps c t^p``, ``g = 1``, ``f = h = eps c``, ``phi(t) = t``, ``v(u) = u^((p-1)/p)``."""

    problem: BihariProblem

    def a(self, t):
        pr = self.problem
        return np.exp(pr.eps * pr.c * np.asarray(t, dtype=float))

    def e(self, t):
        pr = self.problem
        return pr.eps * pr.c * np.asarray(t, dtype=float) ** pr.p

    def A(self, t) -> float:
        """``int_0^t h v(a e) ds``."""
        pr = self.problem
        q = pr.exponent
        ec = pr.eps * pr.c
        if ec == 0 or t == 0:
            return 0.0
        val, _ = integrate.quad(lambda s: (math.exp(ec * s) * ec * s**pr.p) ** q, 0.0, float(t),
                                epsabs=0.0, epsrel=1e-13, limit=200)
        return ec * val

    def B(self, t) -> float:
        """``int_0^t h v(a) ds``, in closed form."""
        pr = self.problem
        ec = pr.eps * pr.c
        rate = ec * pr.exponent
        if rate == 0:
            return 0.0
        return ec * math.expm1(rate * t) / rate

    def F(self, x):
        return self.problem.p * np.asarray(x, dtype=float) ** (1.0 / self.problem.p)

    def F_inverse(self, y):
        p = self.problem.p
        return (np.asarray(y, dtype=float) / p) ** p

    def envelope(self, t) -> float:
        """``a(t) [e(t) + F^{-1}(F(A(t)) + B(t))]``."""
        return float(self.a(t) * (self.e(t) + self.F_inverse(self.F(self.A(t)) + self.B(t))))


def corollary_terms(problem: BihariProblem, t):
    """Shape ``eps t^p + t^p (eps t)^((p-1)/p)`` without the constant."""
    t = np.asarray(t, dtype=float)
    return problem.eps * t**problem.p + t**problem.p * (problem.eps * t) ** problem.exponent


def _check_small(problem: BihariProblem):
    if not problem.small:
        raise SmallnessViolationError(
            f"eps*T = {problem.eps * problem.T!r} exceeds the threshold k = {problem.k!r}"
        )


def corollary_constant(problem: BihariProblem) -> float:
    """``sup_t P(t) / shape(t)`` over the problem grid (``t > 0``)."""
    _check_small(problem)
    if problem.eps == 0:
        return 0.0
    co = PachpatteCoefficients(problem)
    t = problem.grid[1:]
    return float(max(co.envelope(s) / corollary_terms(problem, s) for s in t))


def corollary_bound(problem: BihariProblem, t, C: float | None = None):
    """``C (eps t^p + t^p (eps t)^((p-1)/p))`` with ``C`` from the Pachpatte envelope."""
    _check_small(problem)
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > problem.T * (1 + 1e-12))):
        raise ValueError("t must lie in [0, T]")
    C = corollary_constant(problem) if C is None else C
    return C * corollary_terms(problem, t_arr)


def _product_weights(t: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights of ``int_{t_j}^{t_j+1} g(s) s^r ds`` for ``g`` linear on each interval."""
    a, b = t[:-1], t[1:]
    h = b - a
    m0 = (b ** (r + 1) - a ** (r + 1)) / (r + 1)
    m1 = (b ** (r + 2) - a ** (r + 2)) / (r + 2)
    return (b * m0 - m1) / h, (m1 - a * m0) / h


def maximal_solution(problem: BihariProblem, *, drop_nonlinear: bool = False, tol: float = 1e-12,
                     max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Picard iteration for the equality version on the uniform grid.

    Starts from the inhomogeneity ``eps c t^p``.  Integrals use the product
    trapezoidal rule: ``Psi / t^p`` is interpolated linearly and integrated
    against the exact weights ``t^p`` and ``t^(p-1)``.  The plain trapezoid
    overestimates ``int Psi^((p-1)/p)`` on the first intervals by a relative
    amount that does not shrink with ``m``; this rule is exact for the leading
    power law and keeps second order.  Returns ``(grid, Psi*)``.
    ``drop_nonlinear`` removes the ``Psi^((p-1)/p)`` term.
    """
    t = problem.grid
    p, q = problem.p, problem.exponent
    ec = problem.eps * problem.c
    e = ec * t**p
    psi = e.copy()
    if ec == 0:
        return t, psi
    lin0, lin1 = _product_weights(t, p)
    non0, non1 = _product_weights(t, p - 1)
    tp = t[1:] ** p
    diff = math.inf
    for _ in range(max_iter):
        g = np.empty_like(t)
        g[1:] = psi[1:] / tp
        g[0] = ec  # Psi / t^p -> eps c as t -> 0
        inc = lin0 * g[:-1] + lin1 * g[1:]
        if not drop_nonlinear:
            gq = g**q
            inc = inc + non0 * gq[:-1] + non1 * gq[1:]
        new = e + ec * np.concatenate(([0.0], np.cumsum(inc)))
        diff = float(np.max(np.abs(new - psi)))
        psi = new
        if diff < tol:
            return t, psi
    raise NonConvergenceError(f"no convergence in {max_iter} iterations (last difference {diff!r})")


@dataclass
class DominanceReport:
    problem: BihariProblem
    t: np.ndarray
    psi: np.ndarray
    bound: np.ndarray
    envelope: np.ndarray
    C: float
    fitted_C: float
    C_at_T: float

    @property
    def margin(self) -> np.ndarray:
        return self.bound - self.psi

    @property
    def holds(self) -> bool:
        return bool(np.all(self.psi <= self.bound))

    def as_dict(self) -> dict:
        return {
            "p": self.problem.p,
            "eps": self.problem.eps,
            "c": self.problem.c,
            "T": self.problem.T,
            "C": self.C,
            "fitted_C": self.fitted_C,
            "C_at_T": self.C_at_T,
            "min_margin": float(np.min(self.margin)),
            "holds": self.holds,
        }


def verify_dominance(problem: BihariProblem, *, raise_on_failure: bool = True) -> DominanceReport:
    """Check ``Psi* <= P <= C shape`` on the grid and report the margin profile.

    ``fitted_C`` is the smallest constant with ``Psi* <= C shape`` on the whole
    grid; ``C_at_T`` only enforces it at ``t = T``, which is not enough since
    ``Psi*/shape`` decreases in ``t``.
    """
    _check_small(problem)
    t, psi = maximal_solution(problem)
    if problem.eps == 0:
        z = np.zeros_like(t)
        return DominanceReport(problem, t, psi, z, z, 0.0, 0.0, 0.0)
    co = PachpatteCoefficients(problem)
    env = np.array([co.envelope(s) for s in t])
    shape = corollary_terms(problem, t)
    ratio = env[1:] / shape[1:]
    C = float(np.max(ratio))
    bound = C * shape
    fitted = float(np.max(psi[1:] / shape[1:]))
    report = DominanceReport(problem, t, psi, bound, env, C, fitted, float(psi[-1] / shape[-1]))
    if raise_on_failure:
        # small relative slack absorbs the trapezoidal error in Psi*
        tol = 1e-9 * np.maximum(bound, 1e-300)
        for arr in (env, bound):
            bad = np.nonzero(psi > arr + tol)[0]
            if bad.size:
                i = int(bad[0])
                raise DominanceFailure(float(t[i]), float(psi[i]), float(arr[i]))
    return report


def sweep(ps=(2, 3, 4), eps_T=(0.01, 0.05, 0.1), *, c: float = 1.0, T: float = 1.0, m: int = 1000,
          k: float = 0.1) -> list[DominanceReport]:
    """Dominance reports on a ``p x eps T`` grid."""
    return [verify_dominance(BihariProblem(p, et / T, c, T, m, k)) for p in ps for et in eps_T]


SWEEP_HEADER = ("p", "eps", "c", "T", "C", "fitted_C", "C_at_T", "min_margin", "holds")


def sweep_rows(reports) -> list[tuple]:
    return [tuple(r.as_dict()[h] for h in SWEEP_HEADER) for r in reports]


def identity_errors(problem: BihariProblem, n: int = 201) -> dict[str, float]:
    """Max deviations of ``a(t) = exp(eps c t)`` (from its defining integral) and ``F(F^{-1}(x)) = x`` on ``[0, 10]``."""
    co = PachpatteCoefficients(problem)
    ec = problem.eps * problem.c
    ts = np.linspace(0.0, problem.T, 21)
    a_err = 0.0
    for t in ts:
        # definition: 1 + g int_0^t f exp(int_s^t g f) ds
        val, _ = integrate.quad(lambda s: ec * math.exp(ec * (t - s)), 0.0, t, epsabs=0.0, epsrel=1e-13)
        a_err = max(a_err, abs(1.0 + val - float(co.a(t))))
    x = np.linspace(0.0, 10.0, n)
    f_err = float(np.max(np.abs(co.F(co.F_inverse(x)) - x)))
    return {"a": a_err, "F_F_inverse": f_err}
