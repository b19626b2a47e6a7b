import numpy as np
import pytest

from mkvlab.errors import PreconditionError
from mkvlab.measures import EmpiricalMeasure, wasserstein2
from mkvlab.verification import compactness_probe, dp_matrix, greedy_net, sample_PL
from mkvlab.verification.compact import PLElement, metric_defects

from conftest import gaussian_quantiles

RHO = gaussian_quantiles(0.9, 0.3, 256)


def test_no_coefficients_leaves_initial_law():
    rho = gaussian_quantiles(0.0, 1.0, 64)
    sample = sample_PL(0.0, 0.0, rho, 1.0, 8, sigma0=0.0, n_particles=64, n_worlds=2)
    for e in sample.elements:
        np.testing.assert_array_equal(e.states, np.broadcast_to(rho.points, e.states.shape))
    beyond = float(np.abs(rho.points).max()) + 1e-9
    assert all(e.tail(2, beyond) == 0.0 for e in sample.elements)


def test_gaussian_tails_decrease_in_radius():
    sample = sample_PL(0.0, 0.0, gaussian_quantiles(0.0, 1.0, 256), 1.0, 8, sigma0=0.5)
    assert sample.tails_decreasing
    t = sample.sup_tail
    assert t[0] > 0
    assert np.all((t[1:] < t[:-1]) | (t[:-1] == 0.0))  # finite clouds have empty far tails


@pytest.mark.parametrize("L", [0.5, 1.0])
def test_moment_constant_stable_under_doubling(L):
    small = sample_PL(L, 0.0, RHO, 1.0, 64, seed=0)
    large = sample_PL(L, 0.0, RHO, 1.0, 128, seed=0)
    assert abs(large.C_fit / small.C_fit - 1) <= 0.2


def test_samples_are_prefix_stable():
    a = sample_PL(1.0, 0.0, RHO, 1.0, 4, seed=3, n_worlds=2, n_particles=64)
    b = sample_PL(1.0, 0.0, RHO, 1.0, 8, seed=3, n_worlds=2, n_particles=64)
    for x, y in zip(a.elements, b.elements):
        np.testing.assert_array_equal(x.states, y.states)


def test_identical_samples_give_single_centre():
    e = PLElement(np.random.default_rng(0).normal(size=(3, 16, 1)), np.zeros(1), np.zeros(1), np.zeros(1), 1)
    rep = compactness_probe([e] * 40)
    assert rep.net_sizes == [1, 1, 1]


def test_metric_axioms_on_sampled_elements():
    rep = compactness_probe(sample_PL(1.0, 0.0, RHO, 1.0, 32, n_worlds=4, n_particles=128))
    assert rep.axioms_hold(1e-9)
    assert rep.net_sizes == sorted(rep.net_sizes)


def test_dp_uses_exact_w2_in_two_dimensions():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 12, 2)), rng.normal(scale=0.3, size=(2, 12, 2))
    D = dp_matrix([a, b])
    expect = np.mean([min(wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y)), 1.0) for x, y in zip(a, b)])
    assert D[0, 1] == pytest.approx(expect, abs=1e-12)


def test_greedy_net_in_index_order():
    D = np.array([[0.0, 0.1, 0.3], [0.1, 0.0, 0.15], [0.3, 0.15, 0.0]])
    assert greedy_net(D, 0.12) == [0, 2]
    assert greedy_net(D, 0.05) == [0, 1, 2]
    assert greedy_net(D, 0.3) == [0]


def test_metric_defects_detects_triangle_violation():
    D = np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [3.0, 1.0, 0.0]])
    assert metric_defects(D)["triangle"] == pytest.approx(1.0)


def test_preconditions():
    with pytest.raises(PreconditionError):
        sample_PL(-1.0, 0.0, RHO, 1.0, 4)
    with pytest.raises(PreconditionError):
        sample_PL(1.0, 1.0, RHO, 1.0, 4)
    with pytest.raises(PreconditionError):
        compactness_probe(sample_PL(1.0, 0.0, RHO, 1.0, 8, n_worlds=2, n_particles=32))
