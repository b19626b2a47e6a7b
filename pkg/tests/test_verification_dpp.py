from dataclasses import replace

import numpy as np
import pytest

from mkvlab.control_value import Budget, DeterministicTime, FirstHitting
from mkvlab.errors import PreconditionError, UnsupportedStructure
from mkvlab.measures import EmpiricalMeasure
from mkvlab.model import bang_bang, common_noise_anchored, trivial_model
from mkvlab.control_value import ConstantPolicy
from mkvlab.verification import dpp_enumeration_bound, dpp_residual, fit_value_table, law_invariance_gap
from mkvlab.verification.dpp import fit_value_lipschitz

from conftest import gaussian_quantiles

SMALL = Budget(n_worlds=8, n_particles=256, train_worlds=4, train_particles=128, n_blocks=4, n_xbins=5, n_mbins=3)


def test_constant_terminal_cost_zero_residual():
    res = dpp_residual(trivial_model(c=0.5), 0.0, gaussian_quantiles(0, 1, 64), 0.5, budget=SMALL, n_nodes=3)
    assert res.lhs.mean == res.rhs.mean == 0.5
    assert res.residual == 0.0


def test_theta_at_horizon_is_the_definition():
    res = dpp_residual(bang_bang(), 0.0, gaussian_quantiles(0.9, 0.3, 256), DeterministicTime(1.0), budget=SMALL)
    assert res.residual == 0.0 and res.table is None


def test_theta_must_follow_t0():
    with pytest.raises(PreconditionError):
        dpp_residual(bang_bang(), 0.5, gaussian_quantiles(0, 1, 16), 0.25, budget=SMALL)


def test_first_hitting_times_not_supported_by_particle_check():
    with pytest.raises(UnsupportedStructure):
        dpp_residual(bang_bang(), 0.0, gaussian_quantiles(0, 1, 16), FirstHitting(0.5), budget=SMALL)


def test_value_table_refuses_anchored_models():
    with pytest.raises(UnsupportedStructure):
        fit_value_table(common_noise_anchored(), gaussian_quantiles(0, 1, 16), 0.0, 0.5, "table", SMALL)


def test_value_table_interpolates_in_cloud_mean():
    table = fit_value_table(trivial_model(c=0.25, running=1.0), gaussian_quantiles(0, 1, 64), 0.0, 0.5, "constant",
                            SMALL, n_nodes=3)
    np.testing.assert_array_equal(table.values, 0.75)
    assert np.all(table(np.zeros((2, 5, 1))) == 0.75)


def test_enumeration_bound_on_constant_model_is_zero():
    enum = dpp_enumeration_bound(trivial_model(c=0.5), 0.0, gaussian_quantiles(0, 1, 64), 0.5, budget=SMALL, n_inner=2)
    assert enum.bound == 0.0 and enum.lhs == enum.rhs == 0.5


def test_easy_half_holds_for_table_class():
    budget = replace(SMALL, n_worlds=32, n_particles=1024)
    res = dpp_residual(bang_bang(), 0.0, gaussian_quantiles(0.9, 0.3, 256), 0.5, "table", budget)
    assert res.lhs.mean <= res.rhs.mean + 3 * res.stderr


# --- law invariance ----------------------------------------------------------------------------

def test_permutation_gives_zero_gap():
    xi = gaussian_quantiles(0.9, 0.3, 256)
    eta = EmpiricalMeasure(xi.points[np.random.default_rng(1).permutation(256)])
    res = law_invariance_gap(bang_bang(), 0.0, xi, eta, SMALL, fit_bias=False)
    assert res.gap == 0.0 and res.w2 == 0.0


def test_reflection_of_symmetric_cloud_gives_zero_gap():
    xi = EmpiricalMeasure([-1.0, 1.0])
    res = law_invariance_gap(bang_bang(), 0.0, xi, EmpiricalMeasure([1.0, -1.0]), SMALL, fit_bias=False)
    assert res.gap == 0.0


def test_resampled_cloud_within_threshold():
    xi = gaussian_quantiles(0.9, 0.3, 256)
    eta = EmpiricalMeasure(0.9 + 0.3 * np.random.default_rng(2).standard_normal((256, 1)))
    res = law_invariance_gap(bang_bang(), 0.0, xi, eta, replace(SMALL, n_worlds=16, n_particles=1024))
    assert res.w2 > 0
    assert res.gap <= res.threshold


def test_lipschitz_fit_sees_translations():
    # g(x) = x with frozen dynamics: J is the cloud mean, so a shift by s moves it by exactly s
    model = replace(trivial_model(), g=lambda x, atoms, w0: x[..., 0], state_free=frozenset({"b", "f"}))
    lip, _ = fit_value_lipschitz(model, 0.0, gaussian_quantiles(0, 1, 64), ConstantPolicy(0), SMALL)
    assert lip == pytest.approx(1.0, abs=1e-12)
