"""Finite-activity (compound Poisson) Lévy drivers.

A driver is described by a :class:`LevyMeasureSpec`: a jump rate and a jump
law.  Paths are sampled with exponential interarrival times, and absolute
moments of the Lévy measure are available in closed form for every supported
law, so the integrability conditions on the drivers can be checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special, stats


class InvalidSpecError(ValueError):
    """A Lévy measure specification violates its invariants."""


class UnsupportedMomentError(ValueError):
    """The requested moment has no closed form for this jump law."""


def _even_norm_moment(component_even_moment: Callable[[int], float], dim: int, order: float) -> float:
    # E(sum_i xi_i^2)^k for i.i.d. components, via the exponential generating
    # function of the even component moments.
    if dim == 1:
        return component_even_moment(int(round(order)))
    if not (float(order).is_integer() and int(order) % 2 == 0):
        raise UnsupportedMomentError(
            f"norm moment of order {order} in dimension {dim} has no closed form; "
            "only even integer orders are supported for dim > 1"
        )
    k = int(order) // 2
    egf = np.array([component_even_moment(2 * j) / math.factorial(j) for j in range(k + 1)])
    poly = np.zeros(k + 1)
    poly[0] = 1.0
    for _ in range(dim):
        poly = np.convolve(poly, egf)[: k + 1]
    return float(poly[k] * math.factorial(k))


@dataclass(frozen=True)
class UniformLaw:
    """Jumps uniform on ``(-a, a)^dim`` componentwise."""

    a: float = 1.0
    dim: int = 1

    def validate(self):
        if not self.a > 0:
            raise InvalidSpecError("uniform half-width must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-self.a, self.a, size=(n, self.dim))

    def _component_moment(self, q: float) -> float:
        return self.a**q / (q + 1.0)

    def abs_moment(self, order: float) -> float:
        if self.dim == 1:
            return self._component_moment(order)
        return _even_norm_moment(self._component_moment, self.dim, order)

    def mean(self) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> str:
        return f"uniform({self.a!r}, dim={self.dim})"


@dataclass(frozen=True)
class AtomLaw:
    """Discrete jump law ``sum_i p_i delta_{z_i}``."""

    atoms: tuple  # tuple of tuples, one per atom
    probs: tuple

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if atoms.shape[0] == 1 and len(self.probs) > 1:
            atoms = atoms.T
        object.__setattr__(self, "atoms", tuple(map(tuple, atoms)))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    @property
    def dim(self) -> int:
        return len(self.atoms[0])

    @property
    def _z(self) -> np.ndarray:
        return np.asarray(self.atoms, dtype=float)

    def validate(self):
        p = np.asarray(self.probs)
        if len(self.atoms) != len(p) or len(p) == 0:
            raise InvalidSpecError("atom list and probability list must have equal nonzero length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidSpecError(f"atom probabilities must be nonnegative and sum to 1, got {p.sum()!r}")
        if np.any(np.linalg.norm(self._z, axis=1) == 0.0):
            raise InvalidSpecError("the jump law may not charge the origin")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=np.asarray(self.probs))
        return self._z[idx]

    def abs_moment(self, order: float) -> float:
        return float(np.dot(self.probs, np.linalg.norm(self._z, axis=1) ** order))

    def mean(self) -> np.ndarray:
        return np.asarray(self.probs) @ self._z

    def describe(self) -> str:
        return "atoms(" + ", ".join(f"{z}:{p!r}" for z, p in zip(self.atoms, self.probs)) + ")"


@dataclass(frozen=True)
class TruncatedNormalLaw:
    """Componentwise ``N(0, sigma^2)`` conditioned on ``|xi_i| <= cutoff``."""

    sigma: float = 1.0
    cutoff: float = 3.0
    dim: int = 1

    def validate(self):
        if not (self.sigma > 0 and self.cutoff > 0):
            raise InvalidSpecError("truncated normal needs sigma > 0 and cutoff > 0")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        b = self.cutoff / self.sigma
        return stats.truncnorm.rvs(-b, b, scale=self.sigma, size=(n, self.dim), random_state=rng)

    def _component_moment(self, q: float) -> float:
        y = 0.5 * (self.cutoff / self.sigma) ** 2
        a = 0.5 * (q + 1.0)
        num = self.sigma**q * 2.0 ** (0.5 * q) * special.gamma(a) * special.gammainc(a, y)
        return float(num / (math.sqrt(math.pi) * special.gammainc(0.5, y)))

    def abs_moment(self, order: float) -> float:
        if self.dim == 1:
            return self._component_moment(order)
        return _even_norm_moment(self._component_moment, self.dim, order)

    def mean(self) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> str:
        return f"truncnorm({self.sigma!r}, {self.cutoff!r}, dim={self.dim})"


JumpLaw = UniformLaw | AtomLaw | TruncatedNormalLaw


@dataclass(frozen=True)
class LevyMeasureSpec:
    """Finite Lévy measure ``nu = rate * law``."""

    rate: float
    law: JumpLaw = field(default_factory=UniformLaw)

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise InvalidSpecError(f"jump rate must be positive and finite, got {self.rate!r}")
        self.law.validate()

    @property
    def dim(self) -> int:
        return self.law.dim


@dataclass(frozen=True)
class JumpEvent:
    time: float
    jump: np.ndarray


@dataclass(frozen=True, eq=False)
class LevyPath:
    """Jump times and jump vectors of one compound Poisson path on ``[0, horizon]``."""

    horizon: float
    times: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        jumps = np.asarray(self.jumps, dtype=float)
        if jumps.ndim == 1:
            jumps = jumps.reshape(len(times), -1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "jumps", jumps)
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if jumps.shape[0] != times.shape[0]:
            raise ValueError("times and jumps must have the same length")
        if times.size:
            if times[0] <= 0 or times[-1] > self.horizon:
                raise ValueError("event times must lie in (0, horizon]")
            if np.any(np.diff(times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if np.any(np.linalg.norm(jumps, axis=1) == 0):
                raise ValueError("jump vectors must be nonzero")

    @property
    def dim(self) -> int:
        return self.jumps.shape[1] if self.jumps.ndim == 2 else 0

    @property
    def events(self) -> list[JumpEvent]:
        return [JumpEvent(float(t), z.copy()) for t, z in zip(self.times, self.jumps)]

    def __len__(self):
        return self.times.size

    def count_in(self, t0: float, t1: float) -> int:
        """Number of events in ``(t0, t1]``."""
        return int(np.searchsorted(self.times, t1, "right") - np.searchsorted(self.times, t0, "right"))

    @classmethod
    def empty(cls, horizon: float, dim: int) -> "LevyPath":
        return cls(horizon, np.empty(0), np.empty((0, dim)))


_BLOCK = 64


def sample_levy_path(spec: LevyMeasureSpec, horizon: float, stream: np.random.Generator) -> LevyPath:
    """Sample a compound Poisson path on ``[0, horizon]``.

    Interarrival times and jump vectors are drawn in fixed-size blocks, so for a
    given stream the path on a shorter horizon is a prefix of the path on a
    longer one.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon!r}")
    if not isinstance(spec, LevyMeasureSpec):
        raise InvalidSpecError("spec must be a LevyMeasureSpec")
    if horizon == 0:
        return LevyPath.empty(0.0, spec.dim)
    times, jumps = [], []
    t = 0.0
    while t <= horizon:
        gaps = stream.exponential(1.0 / spec.rate, size=_BLOCK)
        z = spec.law.sample(stream, _BLOCK)
        block_t = t + np.cumsum(gaps)
        times.append(block_t)
        jumps.append(z)
        t = block_t[-1]
    times = np.concatenate(times)
    jumps = np.concatenate(jumps)
    keep = times <= horizon
    times, jumps = times[keep], jumps[keep]
    # zero jumps have probability zero under the supported laws; drop defensively
    nz = np.linalg.norm(jumps, axis=1) > 0
    return LevyPath(float(horizon), times[nz], jumps[nz])


def moment(spec: LevyMeasureSpec, order: float) -> float:
    """``int ||z||^order nu(dz)`` in closed form."""
    if not order >= 1:
        raise ValueError(f"moment order must be >= 1, got {order!r}")
    return spec.rate * spec.law.abs_moment(order)


@dataclass(frozen=True)
class Hypothesis1Report:
    p: float
    moment_Z: float
    moment_Ztilde: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.moment_Z) and np.isfinite(self.moment_Ztilde))

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "moment_Z_order_p": self.moment_Z,
            "moment_Ztilde_order_2p": self.moment_Ztilde,
            "passed": self.passed,
        }


def validate_hypothesis1(spec_Z: LevyMeasureSpec, spec_Ztilde: LevyMeasureSpec, p: float) -> Hypothesis1Report:
    """Check the p-th moment of ``nu`` and the 2p-th moment of ``nu'``."""
    if not p >= 2:
        raise ValueError(f"integrability exponent p must be >= 2, got {p!r}")
    return Hypothesis1Report(p, moment(spec_Z, p), moment(spec_Ztilde, 2 * p))


@dataclass(frozen=True)
class TruncationReport:
    cutoff: float
    upper: float
    rate: float
    discarded_small_second_moment: float
    discarded_tail_rate: float


def finite_activity_approximation(
    density: Callable[[float], float],
    cutoff: float,
    upper: float,
    n_atoms: int = 64,
) -> tuple[LevyMeasureSpec, TruncationReport]:
    """Approximate a (possibly infinite-activity) 1-d Lévy density by a finite one.

    Jumps with ``|z| < cutoff`` are discarded and so are jumps beyond ``upper``;
    the remaining mass is lumped onto ``n_atoms`` bin midpoints per side.  The
    report carries the discarded second moment near the origin and the
    discarded tail rate.
    """
    if not 0 < cutoff < upper:
        raise ValueError("need 0 < cutoff < upper")
    edges = np.linspace(cutoff, upper, n_atoms + 1)
    atoms, weights = [], []
    for sign in (-1.0, 1.0):
        for lo, hi in zip(edges[:-1], edges[1:]):
            w, _ = integrate.quad(lambda z: density(sign * z), lo, hi)
            if w > 0:
                atoms.append(sign * 0.5 * (lo + hi))
                weights.append(w)
    weights = np.asarray(weights)
    rate = float(weights.sum())
    if rate <= 0:
        raise InvalidSpecError("density has no mass between cutoff and upper")
    probs = weights / rate
    probs[-1] = 1.0 - probs[:-1].sum()
    small = sum(integrate.quad(lambda z: z * z * density(s * z), 0.0, cutoff)[0] for s in (-1.0, 1.0))
    tail = sum(integrate.quad(lambda z: density(s * z), upper, np.inf)[0] for s in (-1.0, 1.0))
    spec = LevyMeasureSpec(rate, AtomLaw(tuple((a,) for a in atoms), tuple(probs)))
    return spec, TruncationReport(cutoff, upper, rate, float(small), float(tail))


def merge_paths(paths: Sequence[LevyPath], scales: Sequence[float] | None = None) -> LevyPath:
    """Stack independent drivers into one driver on the product space.

    Events of ``paths[i]`` occupy the i-th block of coordinates; ``scales[i]``
    rescales event times of that driver (``t -> t * scale``).
    """
    scales = scales or [1.0] * len(paths)
    dims = [p.dim for p in paths]
    total = sum(dims)
    horizon = max(p.horizon * s for p, s in zip(paths, scales))
    ts, zs = [], []
    offset = 0
    for path, s, d in zip(paths, scales, dims):
        z = np.zeros((len(path), total))
        z[:, offset : offset + d] = path.jumps
        ts.append(path.times * s)
        zs.append(z)
        offset += d
    t = np.concatenate(ts)
    z = np.concatenate(zs)
    order = np.argsort(t, kind="stable")
    return LevyPath(horizon, t[order], z[order])
