"""Trivially foliated model spaces ``R^n x V`` and the built-in test systems.

States are stored as ``x = (u, v)`` with the leaf coordinate ``u`` first and the
transversal coordinate ``v = pi(x)`` in the last ``d`` slots.  Leaves are the
level sets ``{v = const}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .levy import LevyMeasureSpec, UniformLaw


class TangencyViolationError(AssertionError):
    """A field that should be tangent to the leaves has a transversal component."""


@dataclass(frozen=True)
class Box:
    low: tuple
    high: tuple

    def contains(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return np.all((v > np.asarray(self.low)) & (v < np.asarray(self.high)), axis=-1)

    def sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, len(self.low)))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, v: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(v) - np.asarray(self.center), axis=-1) < self.radius

    def sample(self, rng, n):
        d = len(self.center)
        g = rng.normal(size=(n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
        return np.asarray(self.center) + r * g


@dataclass(frozen=True)
class FoliationChart:
    leaf_dim: int
    transversal_dim: int
    region: Box | Ball

    def __post_init__(self):
        if self.leaf_dim < 1 or self.transversal_dim < 1:
            raise ValueError("leaf and transversal dimensions must be positive")
        if not bool(self.region.contains(np.zeros(self.transversal_dim))):
            raise ValueError("the transversal region must contain the origin")

    @property
    def dim(self) -> int:
        return self.leaf_dim + self.transversal_dim

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.leaf_dim :]

    def leaf_part(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., : self.leaf_dim]

    def point(self, u, v) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(u, float)), np.atleast_1d(np.asarray(v, float))])

    def in_V(self, v: np.ndarray) -> np.ndarray:
        return self.region.contains(v)

    def in_U(self, x: np.ndarray) -> np.ndarray:
        return self.region.contains(self.project(x))


@dataclass(frozen=True)
class VectorFieldSet:
    """Coefficients of the perturbed foliated system.

    ``F0(x)`` and ``F(x, z)`` must be tangent to the leaves; ``K(x)`` is free;
    ``Ktilde(v, z)`` only sees the transversal coordinate.  All return full
    ambient vectors.  ``additive_jumps`` declares that ``F(x, z)`` does not
    depend on ``x``; the Marcus map is then the exact translation ``x + F z``.
    """

    F0: Callable
    F: Callable
    K: Callable
    Ktilde: Callable
    jump_dim: int = 1
    jump_dim_tilde: int = 1
    lipschitz_budget: float = 1.0
    additive_jumps: bool = False


@dataclass(frozen=True)
class TestSystem:
    """A concrete foliated system with its drivers and (optionally) a known average."""

    __test__ = False  # keep pytest from collecting this class

    name: str
    chart: FoliationChart
    fields: VectorFieldSet
    nu: LevyMeasureSpec
    nu_prime: LevyMeasureSpec
    p: float = 2.0
    closed_form_Q: Optional[Callable] = None
    x0: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def initial_point(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)

    def pi_K(self, x: np.ndarray) -> np.ndarray:
        return self.chart.project(self.fields.K(x))

    # composite fields used by the integrators

    def leaf_drift(self, x):
        return self.fields.F0(x)

    def leaf_jump(self, x, z):
        return self.fields.F(x, z)

    @property
    def leaf_jump_map(self) -> Optional[Callable]:
        """Closed-form Marcus map of the leaf jumps, or ``None`` when it needs an ODE solve."""
        if not self.fields.additive_jumps:
            return None
        F = self.fields.F
        return lambda x, z: x + F(x, z)

    def perturbed_drift(self, eps: float):
        F0, K = self.fields.F0, self.fields.K
        return lambda x: F0(x) + eps * K(x)

    def perturbed_jump(self, eps: float):
        """Jump field of the perturbed system on the stacked driver ``(Z, Ztilde)``."""
        F, Kt, r = self.fields.F, self.fields.Ktilde, self.fields.jump_dim
        project = self.chart.project

        def jump(x, z):
            return F(x, z[..., :r]) + eps * Kt(project(x), z[..., r:])

        return jump

    def averaged_jump(self, v, z):
        return self.chart.project(self.fields.Ktilde(v, z))


@dataclass(frozen=True)
class TangencyReport:
    samples: int
    max_violation_F0: float
    max_violation_F: float

    @property
    def max_violation(self) -> float:
        return max(self.max_violation_F0, self.max_violation_F)


def assert_leaf_tangency(fields: VectorFieldSet, chart: FoliationChart, sample_count: int, stream,
                         tol: float = 1e-14) -> TangencyReport:
    """Sample states and jumps; fail if ``F0`` or ``F(.)z`` leave the leaf."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    u = stream.normal(scale=2.0, size=(sample_count, chart.leaf_dim))
    v = chart.region.sample(stream, sample_count)
    x = np.concatenate([u, v], axis=1)
    z = stream.normal(size=(sample_count, fields.jump_dim))
    viol0 = float(np.max(np.abs(chart.project(fields.F0(x)))))
    viol1 = float(np.max(np.abs(chart.project(fields.F(x, z)))))
    for name, viol in (("F0", viol0), ("F", viol1)):
        if viol > tol:
            raise TangencyViolationError(f"field {name} has transversal component {viol:.3e} > {tol:g}")
    return TangencyReport(sample_count, viol0, viol1)


def check_Q_lipschitz(system: TestSystem, v_grid: Sequence, estimator: Callable) -> float:
    """Largest difference quotient ``|Q(v_i) - Q(v_j)| / |v_i - v_j|`` over the grid."""
    vs = np.asarray(v_grid, dtype=float)
    if vs.ndim == 1:
        vs = vs[:, None]
    if len(vs) < 3:
        raise ValueError("need at least 3 grid points")
    if not np.all(system.chart.in_V(vs)):
        raise ValueError("grid points must lie inside V")
    q = np.array([np.atleast_1d(np.asarray(estimator(v), dtype=float)) for v in vs])
    best = 0.0
    for i in range(len(vs)):
        dv = np.linalg.norm(vs[i + 1 :] - vs[i], axis=1)
        dq = np.linalg.norm(q[i + 1 :] - q[i], axis=1)
        ok = dv > 0
        if ok.any():
            best = max(best, float(np.max(dq[ok] / dv[ok])))
    return best


# ---------------------------------------------------------------------------
# built-in systems


def _ou_stationary_second_moment(nu: LevyMeasureSpec) -> float:
    # dU = -U dt + dZ:  E U^2 = rho E xi^2 / 2 + (rho E xi)^2
    m1 = float(np.asarray(nu.law.mean()).reshape(-1)[0])
    return nu.rate * nu.law.abs_moment(2) / 2.0 + (nu.rate * m1) ** 2


def _ou_lines(params: dict) -> TestSystem:
    nu = params.get("nu") or LevyMeasureSpec(1.0, UniformLaw(1.0))
    nu_prime = params.get("nu_prime") or LevyMeasureSpec(1.0, UniformLaw(1.0))
    if nu.dim != 1 or nu_prime.dim != 1:
        raise ValueError("ou_lines uses scalar drivers")
    c0 = float(params.get("c0", 0.5))
    beta = float(params.get("beta", 0.5))
    kappa = params.get("kappa")
    nonlinear = params.get("_nonlinear", False)
    lo, hi = params.get("v_bounds", (-5.0, 5.0))
    chart = FoliationChart(1, 1, Box((lo,), (hi,)))
    m2 = _ou_stationary_second_moment(nu)

    def F0(x):
        out = np.zeros_like(x)
        out[..., 0] = -x[..., 0]
        return out

    def F(x, z):
        out = np.zeros(np.broadcast_shapes(x.shape, z.shape[:-1] + (2,)))
        out[..., 0] = z[..., 0]
        return out

    if kappa is not None:
        kappa = float(kappa)

        def k(u, v):
            return np.full(np.broadcast_shapes(np.shape(u), np.shape(v)), kappa)

        def Q(v):
            return np.full(np.shape(v), kappa)
    elif nonlinear:
        # average of u^2 / (1 + v^2) + c0 - v over the stationary OU law
        def k(u, v):
            return u * u / (1.0 + v * v) + c0 - v

        def Q(v):
            v = np.asarray(v, dtype=float)
            return m2 / (1.0 + v * v) + c0 - v
    else:
        def k(u, v):
            return u * u + c0 - v

        def Q(v):
            return m2 + c0 - np.asarray(v, dtype=float)

    def K(x):
        out = np.zeros_like(x)
        out[..., 1] = k(x[..., 0], x[..., 1])
        return out

    def Ktilde(v, z):
        v = np.asarray(v)
        out = np.zeros(np.broadcast_shapes(v.shape[:-1], z.shape[:-1]) + (2,))
        out[..., 1] = beta * v[..., 0] * z[..., 0]
        return out

    fields = VectorFieldSet(F0, F, K, Ktilde, 1, 1, lipschitz_budget=max(1.0, abs(beta)), additive_jumps=True)
    x0 = tuple(params.get("x0", (0.0, 0.25)))
    return TestSystem("ou_lines_nonlinear_K" if nonlinear else "ou_lines", chart, fields, nu, nu_prime,
                      float(params.get("p", 2.0)), Q, x0,
                      {"c0": c0, "beta": beta, "kappa": kappa, "v_bounds": (lo, hi)})


def _rotation_coupled(params: dict) -> TestSystem:
    nu = params.get("nu") or LevyMeasureSpec(1.0, UniformLaw(1.0, dim=2))
    nu_prime = params.get("nu_prime") or LevyMeasureSpec(1.0, UniformLaw(1.0))
    if nu.dim != 2 or nu_prime.dim != 1:
        raise ValueError("rotation_coupled needs a planar leaf driver and a scalar transversal driver")
    omega0 = float(params.get("omega0", 1.0))
    gamma = float(params.get("gamma", 0.5))
    c0 = float(params.get("c0", 0.5))
    beta = float(params.get("beta", 0.5))
    lo, hi = params.get("v_bounds", (-5.0, 5.0))
    chart = FoliationChart(2, 1, Box((lo,), (hi,)))

    def F0(x):
        u1, u2, v = x[..., 0], x[..., 1], x[..., 2]
        w = omega0 + v
        out = np.zeros_like(x)
        out[..., 0] = -u1 - w * u2
        out[..., 1] = -u2 + w * u1
        return out

    def F(x, z):
        # additive kick plus a rotation of the leaf proportional to z_1
        out = np.zeros(np.broadcast_shapes(x.shape, z.shape[:-1] + (3,)))
        out[..., 0] = z[..., 0] - gamma * z[..., 0] * x[..., 1]
        out[..., 1] = z[..., 1] + gamma * z[..., 0] * x[..., 0]
        return out

    def K(x):
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        out = np.zeros_like(x)
        out[..., 2] = r2 / (1.0 + r2) + c0 - x[..., 2]
        return out

    def Ktilde(v, z):
        v = np.asarray(v)
        out = np.zeros(np.broadcast_shapes(v.shape[:-1], z.shape[:-1]) + (3,))
        out[..., 2] = beta * v[..., 0] * z[..., 0]
        return out

    fields = VectorFieldSet(F0, F, K, Ktilde, 2, 1, lipschitz_budget=max(1.0 + abs(omega0), abs(gamma)))
    x0 = tuple(params.get("x0", (0.0, 0.0, 0.25)))
    return TestSystem("rotation_coupled", chart, fields, nu, nu_prime, float(params.get("p", 2.0)), None, x0,
                      {"omega0": omega0, "gamma": gamma, "c0": c0, "beta": beta, "v_bounds": (lo, hi)})


BUILTIN_SYSTEMS = ("ou_lines", "ou_lines_nonlinear_K", "rotation_coupled")


def builtin_system(name: str, **params) -> TestSystem:
    """Instantiate a built-in system.

    ``ou_lines``: leaves are horizontal lines, ``dU = -U dt + dZ``, vertical
    perturbation ``k(u, v) = u^2 + c0 - v`` (or ``k = kappa`` when given) and
    ``Ktilde(v) z = beta v z``.  The leaf process is independent of ``v``, so the
    average is ``Q(v) = E u^2 + c0 - v`` with the stationary Lévy-OU moment
    ``E u^2 = rho m2 / 2 + (rho m1)^2``.

    ``ou_lines_nonlinear_K``: same leaves with ``k(u, v) = u^2 / (1 + v^2) + c0 - v``.

    ``rotation_coupled``: planar leaves with a damped rotation whose angular
    speed depends on the leaf, jumps that kick and rotate, and a bounded
    vertical drift.  No closed-form average.

    Keyword parameters: ``nu``, ``nu_prime`` (:class:`LevyMeasureSpec`),
    ``c0``, ``beta``, ``kappa``, ``v_bounds``, ``x0``, ``p``, plus
    ``omega0``/``gamma`` for ``rotation_coupled``.
    """
    if name == "ou_lines":
        return _ou_lines(params)
    if name == "ou_lines_nonlinear_K":
        return _ou_lines({**params, "_nonlinear": True})
    if name == "rotation_coupled":
        return _rotation_coupled(params)
    raise KeyError(f"unknown system {name!r}; available: {', '.join(BUILTIN_SYSTEMS)}")


def with_fields(system: TestSystem, **changes) -> TestSystem:
    """Copy of ``system`` with some coefficient fields replaced."""
    keep_q = changes.pop("closed_form_Q", system.closed_form_Q)
    return replace(system, fields=replace(system.fields, **changes), closed_form_Q=keep_q)
