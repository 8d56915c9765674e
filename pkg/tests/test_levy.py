import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from foliated_averaging.levy import (
    AtomLaw,
    InvalidSpecError,
    LevyMeasureSpec,
    LevyPath,
    TruncatedNormalLaw,
    UniformLaw,
    UnsupportedMomentError,
    finite_activity_approximation,
    merge_paths,
    moment,
    sample_levy_path,
    validate_hypothesis1,
)
from foliated_averaging.rng import RandomStreams

UNIT = LevyMeasureSpec(1.0, UniformLaw(1.0))


def test_horizon_zero_gives_empty_path():
    path = sample_levy_path(UNIT, 0.0, RandomStreams(0).generator())
    assert len(path) == 0 and path.horizon == 0.0


def test_negative_horizon_rejected():
    with pytest.raises(ValueError):
        sample_levy_path(UNIT, -1.0, RandomStreams(0).generator())


def test_poisson_count_within_five_sigma():
    spec = LevyMeasureSpec(2.0, TruncatedNormalLaw(1.0, 3.0))
    for i in range(20):
        n = len(sample_levy_path(spec, 1000.0, RandomStreams(1).generator(i)))
        assert abs(n - 2000) < 5 * math.sqrt(2000)


def test_poisson_count_distribution():
    # counts over many streams: mean and variance both match rate * horizon
    counts = np.array([len(sample_levy_path(UNIT, 50.0, RandomStreams(2).generator(i))) for i in range(400)])
    assert abs(counts.mean() - 50) < 4 * math.sqrt(50 / 400)
    assert 0.7 < counts.var(ddof=1) / 50 < 1.3


def test_deterministic_bytes():
    a = sample_levy_path(UNIT, 100.0, RandomStreams(9).generator(0))
    b = sample_levy_path(UNIT, 100.0, RandomStreams(9).generator(0))
    assert a.times.tobytes() == b.times.tobytes() and a.jumps.tobytes() == b.jumps.tobytes()


def test_prefix_property_across_horizons():
    short = sample_levy_path(UNIT, 10.0, RandomStreams(3).generator(5))
    long = sample_levy_path(UNIT, 40.0, RandomStreams(3).generator(5))
    n = len(short)
    assert np.array_equal(long.times[:n], short.times)
    assert np.array_equal(long.jumps[:n], short.jumps)
    assert n == len(long) or long.times[n] > 10.0


@given(st.floats(0.5, 30.0), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.integers(0, 50))
def test_counts_over_partition_add_up(horizon, cuts, idx):
    path = sample_levy_path(UNIT, horizon, RandomStreams(4).generator(idx))
    pts = np.unique(np.concatenate([[0.0], np.sort(cuts) * horizon, [horizon]]))
    assert sum(path.count_in(a, b) for a, b in zip(pts[:-1], pts[1:])) == len(path)


def test_independent_streams_share_no_times():
    a = sample_levy_path(UNIT, 500.0, RandomStreams(0).generator(0, "Z"))
    b = sample_levy_path(UNIT, 500.0, RandomStreams(0).generator(0, "Ztilde"))
    assert not set(a.times.tolist()) & set(b.times.tolist())


def test_uniform_second_moment_vs_quadrature():
    quad, _ = integrate.quad(lambda z: z * z / 2.0, -1.0, 1.0)
    assert moment(LevyMeasureSpec(2.5, UniformLaw(1.0)), 2) == pytest.approx(2.5 * quad, rel=1e-14)
    assert moment(UNIT, 2) == pytest.approx(1 / 3, rel=1e-15)


def test_single_atom_moment():
    spec = LevyMeasureSpec(3.0, AtomLaw(((2.0,),), (1.0,)))
    assert moment(spec, 2) == 12.0


@pytest.mark.parametrize("order", [1, 2, 3, 4, 2.5])
def test_truncated_normal_moment_vs_quadrature(order):
    law = TruncatedNormalLaw(0.7, 2.0)
    dist = stats.truncnorm(-2.0 / 0.7, 2.0 / 0.7, scale=0.7)
    quad, _ = integrate.quad(lambda z: abs(z) ** order * dist.pdf(z), -2.0, 2.0, epsabs=1e-14)
    assert law.abs_moment(order) == pytest.approx(quad, abs=1e-8)


def test_multivariate_moments():
    law = UniformLaw(1.0, dim=2)
    # E|z|^2 = 2/3, E|z|^4 = 2/5 + 2/9 for independent uniforms on (-1,1)
    assert law.abs_moment(2) == pytest.approx(2 / 3, rel=1e-14)
    assert law.abs_moment(4) == pytest.approx(2 / 5 + 2 / 9, rel=1e-14)
    with pytest.raises(UnsupportedMomentError):
        law.abs_moment(3)


def test_empirical_moment_converges():
    law = TruncatedNormalLaw(1.0, 2.5)
    z = law.sample(RandomStreams(5).generator(0, "sample"), 200_000)
    for q in (2, 4):
        assert abs(np.mean(np.abs(z) ** q) / law.abs_moment(q) - 1) < 4 / math.sqrt(len(z))


def test_hypothesis1_uniform_values():
    rep = validate_hypothesis1(UNIT, UNIT, 2)
    assert rep.passed
    assert rep.moment_Z == pytest.approx(1 / 3, rel=1e-14)
    assert rep.moment_Ztilde == pytest.approx(1 / 5, rel=1e-14)


def test_hypothesis1_atoms_and_bad_p():
    atoms = LevyMeasureSpec(1.0, AtomLaw(((1.0,), (-2.0,)), (0.5, 0.5)))
    assert validate_hypothesis1(atoms, atoms, 2).passed
    with pytest.raises(ValueError):
        validate_hypothesis1(UNIT, UNIT, 1.5)


@pytest.mark.parametrize("make", [
    lambda: LevyMeasureSpec(0.0, UniformLaw(1.0)),
    lambda: LevyMeasureSpec(1.0, AtomLaw(((1.0,), (2.0,)), (0.5, 0.4))),
    lambda: LevyMeasureSpec(1.0, AtomLaw(((0.0,),), (1.0,))),
    lambda: LevyMeasureSpec(1.0, UniformLaw(-1.0)),
])
def test_invalid_specs(make):
    with pytest.raises(InvalidSpecError):
        make()


@pytest.mark.parametrize("times, jumps", [
    ([0.5, 0.4], [[1.0], [1.0]]),
    ([0.5], [[0.0]]),
    ([1.5], [[1.0]]),
    ([0.0], [[1.0]]),
])
def test_levy_path_validation(times, jumps):
    with pytest.raises(ValueError):
        LevyPath(1.0, np.array(times), np.array(jumps))


def test_truncation_helper_reports_discarded_mass():
    # symmetric stable-like density c |z|^{-1-a}: infinite activity near 0
    a = 0.8
    spec, rep = finite_activity_approximation(lambda z: abs(z) ** (-1 - a), 0.1, 5.0, n_atoms=32)
    exact_rate = 2 * (0.1 ** -a - 5.0 ** -a) / a
    assert spec.rate == pytest.approx(exact_rate, rel=1e-8)
    assert rep.discarded_small_second_moment == pytest.approx(2 * 0.1 ** (2 - a) / (2 - a), rel=1e-6)
    assert rep.discarded_tail_rate == pytest.approx(2 * 5.0 ** -a / a, rel=1e-6)


def test_merge_paths_stacks_components():
    a = sample_levy_path(UNIT, 5.0, RandomStreams(0).generator(0))
    b = sample_levy_path(UNIT, 5.0, RandomStreams(0).generator(1))
    m = merge_paths([a, b])
    assert len(m) == len(a) + len(b) and m.dim == 2
    assert np.all(np.diff(m.times) > 0)
