import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvlab.errors import ModelError, PreconditionError
from mkvlab.measures import (
    EmpiricalMeasure,
    convolve_gaussian,
    entropic_w2,
    optimal_assignment,
    pair,
    pair2,
    w2_quantile_1d,
    w2_sorted_1d,
    wasserstein2,
)


def brute_force_w2(x, y):
    C = np.sum((x[:, None] - y[None]) ** 2, axis=-1)
    n = len(x)
    return math.sqrt(min(np.mean(C[np.arange(n), list(p)]) for p in itertools.permutations(range(n))))


def cloud(seed, n, d, scale=1.0):
    return EmpiricalMeasure(np.random.default_rng(seed).normal(scale=scale, size=(n, d)))


# --- construction -----------------------------------------------------------------

def test_rejects_nonfinite_and_reshapes_1d():
    with pytest.raises(PreconditionError):
        EmpiricalMeasure([0.0, np.nan])
    mu = EmpiricalMeasure([1.0, 2.0, 3.0])
    assert (mu.n, mu.d) == (3, 1)
    assert mu.mean()[0] == 2.0


def test_csv_and_binary_round_trip(tmp_path):
    mu = cloud(0, 7, 2)
    mu.to_csv(tmp_path / "mu.csv")
    assert np.array_equal(EmpiricalMeasure.from_csv(tmp_path / "mu.csv").points, mu.points)
    mu.dump(tmp_path / "mu.bin", seed=3)
    assert np.array_equal(EmpiricalMeasure.load(tmp_path / "mu.bin").points, mu.points)


# --- Wasserstein ------------------------------------------------------------------

def test_distance_to_itself_is_zero():
    mu = cloud(1, 20, 3)
    assert wasserstein2(mu, mu) == 0.0


def test_single_atoms():
    assert wasserstein2(EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0])) == 1.0


def test_two_point_clouds():
    assert wasserstein2(EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0])) == pytest.approx(1.0, abs=1e-15)


def test_mismatched_inputs_raise():
    with pytest.raises(PreconditionError):
        wasserstein2(cloud(0, 4, 1), cloud(1, 4, 2))
    with pytest.raises(PreconditionError):
        wasserstein2(cloud(0, 4, 1), cloud(1, 5, 1))
    with pytest.raises(PreconditionError):
        wasserstein2(cloud(0, 600, 1), cloud(1, 600, 1))


@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 6), d=st.integers(1, 3))
def test_exact_matches_permutation_brute_force(seed, n, d):
    mu, nu = cloud(seed, n, d), cloud(seed + 1, n, d)
    assert abs(wasserstein2(mu, nu) - brute_force_w2(mu.points, nu.points)) <= 1e-10


@pytest.mark.parametrize("n", [2, 17, 128, 512])
def test_exact_matches_sorting_in_1d(n):
    mu, nu = cloud(n, n, 1), cloud(n + 1, n, 1, scale=2.0)
    assert abs(wasserstein2(mu, nu) - w2_sorted_1d(mu, nu)) <= 1e-10


def test_quantile_coupling_handles_unequal_sizes():
    x = np.array([0.0, 1.0])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    assert w2_quantile_1d(x, y) == 0.0
    assert w2_quantile_1d(np.array([0.0]), np.array([2.0, 2.0])) == 2.0


@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 64), d=st.integers(1, 3))
def test_metric_symmetry_and_triangle(seed, n, d):
    a, b, c = cloud(seed, n, d), cloud(seed + 1, n, d), cloud(seed + 2, n, d)
    ab, ba = wasserstein2(a, b), wasserstein2(b, a)
    assert ab == ba
    assert wasserstein2(a, c) <= ab + wasserstein2(b, c) + 1e-9


@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 32), shift=st.integers(-64, 64))
def test_translation_invariance_exact_on_dyadic_clouds(seed, n, shift):
    # dyadic atoms and shifts keep every subtraction exact in floating point
    rng = np.random.default_rng(seed)
    x, y = rng.integers(-64, 64, (n, 2)) / 8.0, rng.integers(-64, 64, (n, 2)) / 8.0
    c = np.array([shift / 8.0, -shift / 4.0])
    mu, nu = EmpiricalMeasure(x), EmpiricalMeasure(y)
    assert wasserstein2(mu.translate(c), nu.translate(c)) == wasserstein2(mu, nu)


@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 32))
def test_translation_invariance_generic(seed, n):
    mu, nu = cloud(seed, n, 2), cloud(seed + 1, n, 2)
    c = np.random.default_rng(seed).normal(size=2)
    assert wasserstein2(mu.translate(c), nu.translate(c)) == pytest.approx(wasserstein2(mu, nu), abs=1e-12)


@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 32), d=st.integers(1, 3))
def test_marginal_projection_contracts(seed, n, d):
    mu, nu = cloud(seed, n, d + 1), cloud(seed + 1, n, d + 1)
    full = wasserstein2(mu, nu)
    proj = wasserstein2(EmpiricalMeasure(mu.points[:, :d]), EmpiricalMeasure(nu.points[:, :d]))
    assert proj <= full + 1e-12


def test_lexicographic_tie_break():
    mu = EmpiricalMeasure([0.0, 0.0, 5.0])
    nu = EmpiricalMeasure([1.0, 1.0, 5.0])
    perm, cost = optimal_assignment(mu, nu)
    assert perm.tolist() == [0, 1, 2]
    mu2 = EmpiricalMeasure([5.0, 0.0, 0.0])
    perm2, _ = optimal_assignment(mu2, nu)
    assert perm2.tolist() == [2, 0, 1]


@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32), n=st.integers(2, 64), d=st.integers(1, 3))
def test_entropic_close_to_exact_with_small_regularisation(seed, n, d):
    mu, nu = cloud(seed, n, d), cloud(seed + 1, n, d)
    exact = wasserstein2(mu, nu)
    C = np.sum((mu.points[:, None] - nu.points[None]) ** 2, axis=-1)
    res = entropic_w2(mu, nu, reg=1e-4 * C.mean(), n_iter=3000)
    assert abs(res.value - exact) <= 1e-3


@given(seed=st.integers(0, 2 ** 32), n=st.integers(2, 48))
def test_entropic_brackets_exact_at_default_regularisation(seed, n):
    mu, nu = cloud(seed, n, 2), cloud(seed + 1, n + 3, 2)
    res = entropic_w2(mu, nu)
    plan = res.plan
    np.testing.assert_allclose(plan.sum(axis=1), 1 / n, atol=1e-12)
    np.testing.assert_allclose(plan.sum(axis=0), 1 / (n + 3), atol=1e-12)
    assert res.lower <= res.value + 1e-12
    if n <= 32:
        # unequal sizes: compare against an LP on the plan polytope
        from scipy.optimize import linprog

        C = np.sum((mu.points[:, None] - nu.points[None]) ** 2, axis=-1)
        m = n + 3
        A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
        rhs = np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)])
        lp = linprog(C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
        exact = math.sqrt(lp.fun)
        assert res.lower - 1e-7 <= exact <= res.value + 1e-7


# --- pairings ---------------------------------------------------------------------

def test_pair_examples():
    assert pair(cloud(0, 5, 2), lambda x: np.ones(len(x))) == 1.0
    assert pair(EmpiricalMeasure([-1.0, 1.0]), lambda x: x[:, 0]) == 0.0
    assert pair(EmpiricalMeasure([0.0, 1.0, 2.0]), lambda x: x[:, 0] ** 2) == pytest.approx(5 / 3, abs=1e-15)


def test_pair_nonfinite_raises():
    with pytest.raises(ModelError):
        pair(EmpiricalMeasure([0.0, 1.0]), lambda x: 1.0 / x[:, 0])


def test_pair2_examples():
    mu = EmpiricalMeasure([0.0, 1.0, 2.0])
    assert pair2(mu, lambda x, y: np.ones((3, 3))) == 1.0
    assert pair2(cloud(3, 9, 1), lambda x, y: (x - y)[..., 0]) == pytest.approx(0.0, abs=1e-15)
    assert pair2(mu, lambda x, y: (x * y)[..., 0]) == pytest.approx(1.0, abs=1e-15)


# --- Gaussian convolution -----------------------------------------------------------

def test_convolution_degenerate_cases():
    mu = cloud(4, 16, 2)
    same = convolve_gaussian(mu, np.zeros(2), 0.0, 16, seed=0)
    assert np.array_equal(same.points, mu.points)
    shifted = convolve_gaussian(mu, [0.5, -1.0], 0.0, 16, seed=0)
    np.testing.assert_array_equal(shifted.points, mu.points + np.array([0.5, -1.0]))
    with pytest.raises(PreconditionError):
        convolve_gaussian(mu, 0.0, -1.0, 16, seed=0)


def test_convolution_second_moment():
    mu = cloud(5, 100, 2)
    mean, var, n_out = np.array([0.3, -0.2]), 0.25, 10_000
    out = convolve_gaussian(mu, mean, var, n_out, seed=1)
    sq = np.sum(out.points ** 2, axis=1)
    expect = mu.second_moment() + mean @ mean + 2 * mean @ mu.mean() + mu.d * var
    assert abs(sq.mean() - expect) <= 3 * sq.std(ddof=1) / math.sqrt(n_out)
