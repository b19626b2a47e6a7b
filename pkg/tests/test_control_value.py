import math
from dataclasses import replace

import numpy as np
import pytest

from mkvlab.control_value import (
    Budget,
    ConstantPolicy,
    DeterministicTime,
    FirstHitting,
    OpenLoopPolicy,
    TablePolicy,
    ValueEstimate,
    aggregate_value,
    combined_stderr,
    enumerate_tables,
    estimate_J,
    estimate_nplayer_value,
    estimate_value,
    make_problem,
    search_table,
)
from mkvlab.errors import ConfigurationError, PreconditionError
from mkvlab.measures import EmpiricalMeasure
from mkvlab.model import ControlSet, bang_bang, trivial_model
from mkvlab.noise_paths import TimeGrid, concat_paths, sample_brownian, sample_worlds

from conftest import gaussian_quantiles

SMALL = Budget(n_worlds=16, n_particles=256, train_worlds=4, train_particles=128, n_blocks=2, n_xbins=5, n_mbins=3)


def sign_w0(k, w0):
    return np.where(w0[:, k, 0] >= 0, 2, 0)


# --- policies and shifts -----------------------------------------------------------------

def test_table_policy_bins_and_blocks():
    pol = TablePolicy(np.arange(12).reshape(2, 3, 2), n_steps=8, x_range=(-1.0, 1.0), m_range=(-1.0, 1.0))
    x = np.array([[[-5.0], [0.0], [5.0]]])  # mean 0 -> upper mean bin
    assert pol.act(0, 0.0, x, None).tolist() == [[1, 3, 5]]
    assert pol.act(7, 0.0, x, None).tolist() == [[7, 9, 11]]
    assert [pol.block_of(k) for k in range(8)] == [0] * 4 + [1] * 4


def test_shift_at_start_is_identity():
    grid = TimeGrid(0.0, 1.0, 16)
    w_hat = sample_brownian(grid, 1, seed=3)
    base = OpenLoopPolicy(sign_w0)
    shifted = __import__("mkvlab.control_value", fromlist=["shift_control"]).shift_control(
        base, DeterministicTime(0.0), w_hat)
    noise = sample_worlds(grid, 4, 2, 1, seed=4)
    x = np.zeros((4, 2, 1))
    for k in range(16):
        assert np.array_equal(shifted.act(k, 0.0, x, noise.W0[:, :k + 1]), base.act(k, 0.0, x, noise.W0[:, :k + 1]))


def test_shift_leaves_feedback_and_constants_alone():
    from mkvlab.control_value import shift_control

    w_hat = sample_brownian(TimeGrid(0.0, 1.0, 16), 1, seed=3)
    pol = ConstantPolicy(1)
    assert shift_control(pol, DeterministicTime(0.5), w_hat) is pol
    table = TablePolicy.constant(0, 16)
    assert shift_control(table, FirstHitting(0.5), w_hat) is table


def test_shifted_open_loop_uses_concatenated_path():
    from mkvlab.control_value import shift_control

    grid = TimeGrid(0.0, 1.0, 16)
    w_hat = sample_brownian(grid, 1, seed=5)
    base = OpenLoopPolicy(sign_w0)
    shifted = shift_control(base, DeterministicTime(0.5), w_hat)
    noise = sample_worlds(grid, 3, 1, 1, seed=6)
    x = np.zeros((3, 1, 1))
    for k in range(16):
        got = shifted.act(k, 0.0, x, noise.W0[:, :k + 1])
        for w in range(3):
            live = sample_brownian(grid, 1, seed=0)
            live = replace(live, values=noise.W0[w])
            glued = concat_paths(w_hat, live, 0.5).values
            assert got[w, 0] == (2 if glued[k, 0] >= 0 else 0)
        if k < 8:
            assert np.all(got[:, 0] == (2 if w_hat.values[k, 0] >= 0 else 0))


def test_shift_off_grid_theta_raises():
    from mkvlab.control_value import shift_control

    w_hat = sample_brownian(TimeGrid(0.0, 1.0, 16), 1, seed=3)
    with pytest.raises(PreconditionError):
        shift_control(OpenLoopPolicy(sign_w0), DeterministicTime(0.51), w_hat)


# --- cost functional --------------------------------------------------------------------------

def test_constant_terminal_cost():
    est = estimate_J(trivial_model(c=0.7), 0.0, gaussian_quantiles(0, 1, 64), ConstantPolicy(0), 8, 64)
    assert est.mean == pytest.approx(0.7, rel=1e-15) and est.stderr == 0.0  # averaging rounds by an ulp


@pytest.mark.parametrize("t0", [0.0, 0.25, 0.5])
def test_unit_running_cost_integrates_to_remaining_time(t0):
    est = estimate_J(trivial_model(running=1.0), t0, gaussian_quantiles(0, 1, 64), ConstantPolicy(0), 8, 64)
    assert est.mean == 1.0 - t0


def test_stderr_definition():
    est = ValueEstimate.from_worlds([1.0, 2.0, 4.0], 10)
    assert est.stderr == pytest.approx(np.std([1.0, 2.0, 4.0], ddof=1) / math.sqrt(3), rel=1e-15)


def test_bang_bang_zero_control_matches_direct_sampling():
    mu = gaussian_quantiles(0.9, 0.3, 256)
    est = estimate_J(bang_bang(), 0.0, mu, ConstantPolicy(1), n_worlds=32, n_particles=2048)
    # exact in law with zero drift: X_T = xi + 0.2 W_T + 0.3 W0_T, sampled in one step
    rng = np.random.default_rng(12345)
    worlds, per = 1000, 1000
    z0 = rng.standard_normal((worlds, 1))
    x = mu.points[rng.integers(0, mu.n, (worlds, per)), 0] + 0.2 * rng.standard_normal((worlds, per)) + 0.3 * z0
    per_world = np.mean(np.clip(x, -1, 1), axis=1) * np.clip(x.mean(axis=1), -1, 1)
    oracle = ValueEstimate.from_worlds(per_world, per)
    assert abs(est.mean - oracle.mean) <= 3 * combined_stderr(est, oracle)


# --- value estimation --------------------------------------------------------------------------

def test_singleton_control_value_is_J():
    model = bang_bang(singleton=True)
    mu = gaussian_quantiles(0.9, 0.3, 256)
    est, pol = estimate_value(model, 0.0, mu, policy_class="table", budget=SMALL)
    J = estimate_J(model, 0.0, mu, ConstantPolicy(0), SMALL.n_worlds, SMALL.n_particles, SMALL.seed)
    assert est.mean == J.mean


def test_quadratic_running_cost_only_prefers_zero():
    model = replace(bang_bang(), g=lambda x, atoms, w0: np.zeros(np.shape(x)[:-1]))
    est, pol = estimate_value(model, 0.0, gaussian_quantiles(0, 1, 256), policy_class="constant", budget=SMALL)
    assert pol.index == 1 and est.mean == 0.0


def test_greedy_search_matches_enumeration_at_tiny_scale():
    model = bang_bang()
    budget = Budget(n_worlds=8, n_particles=64, n_steps=2, train_worlds=8, train_particles=64, n_blocks=2,
                    n_xbins=2, n_mbins=1, x_range=(-1.0, 1.0), passes=4)
    mu = gaussian_quantiles(0.3, 0.8, 64)
    prob = make_problem(model, 0.0, mu, budget, train=True)
    _, best_enum, size = enumerate_tables(prob, model.control, budget, 2)
    assert size == 3 ** 4
    _, best_search, partial = search_table(prob, model.control, budget, 2)
    assert not partial
    assert best_search == best_enum


def test_exhaustive_limit_switches_to_enumeration():
    model = bang_bang()
    budget = Budget(n_worlds=8, n_particles=64, n_steps=2, train_worlds=8, train_particles=64, n_blocks=2,
                    n_xbins=2, n_mbins=1, x_range=(-1.0, 1.0), exhaustive_limit=100)
    mu = gaussian_quantiles(0.3, 0.8, 64)
    prob = make_problem(model, 0.0, mu, budget, train=True)
    _, best_enum, _ = enumerate_tables(prob, model.control, budget, 2)
    est, pol = estimate_value(model, 0.0, mu, budget=budget)
    assert prob.values(pol).mean() == best_enum


def test_table_class_no_worse_than_constant():
    mu = gaussian_quantiles(0.9, 0.3, 256)
    table, _ = estimate_value(bang_bang(), 0.0, mu, policy_class="table", budget=SMALL)
    const, _ = estimate_value(bang_bang(), 0.0, mu, policy_class="constant", budget=SMALL)
    assert table.mean <= const.mean + 3 * combined_stderr(table, const)


def test_same_seed_reproduces_search():
    mu = gaussian_quantiles(0.9, 0.3, 256)
    a, pa = estimate_value(bang_bang(), 0.0, mu, budget=SMALL)
    b, pb = estimate_value(bang_bang(), 0.0, mu, budget=SMALL)
    assert np.array_equal(pa.table, pb.table)
    assert np.array_equal(a.per_world_values, b.per_world_values)


@pytest.mark.parametrize("policy_class", ["constant", "table"])
def test_value_bounded_by_K_times_horizon_plus_one(policy_class):
    model = bang_bang()
    est, _ = estimate_value(model, 0.0, gaussian_quantiles(-0.5, 1.0, 256), policy_class=policy_class, budget=SMALL)
    assert abs(est.mean) <= model.K * (model.horizon + 1) + 3 * est.stderr


def test_unknown_policy_class():
    with pytest.raises(ConfigurationError):
        estimate_value(bang_bang(), 0.0, gaussian_quantiles(0, 1, 16), policy_class="neural", budget=SMALL)


def test_initial_condition_lipschitz_constant_stable():
    model = bang_bang()
    pol = ConstantPolicy(1)

    def ratio(n_p):
        xi = gaussian_quantiles(0.4, 0.5, n_p)
        eta = EmpiricalMeasure(xi.points + 0.1 + 0.05 * np.sin(3 * xi.points))
        a = estimate_J(model, 0.0, xi, pol, 32, n_p, sort_init=False)
        b = estimate_J(model, 0.0, eta, pol, 32, n_p, sort_init=False)
        return abs(a.mean - b.mean) / math.sqrt(np.mean((xi.points - eta.points) ** 2))

    r1, r2 = ratio(1024), ratio(2048)
    assert abs(r2 / r1 - 1) <= 0.2


# --- n-player values -------------------------------------------------------------------------

def test_single_player_without_smoothing_matches_mean_field():
    model = bang_bang()
    mu = gaussian_quantiles(0.9, 0.3, 256)
    budget = replace(SMALL, n_worlds=512, train_worlds=64, n_particles=1)
    npl, _ = estimate_nplayer_value(model, 1, None, 0.0, 0.0, 0.0, mu, budget, policy_class="constant")
    mf, _ = estimate_value(model, 0.0, mu, policy_class="constant", budget=replace(budget, n_particles=1,
                                                                                   train_particles=1))
    assert abs(npl.mean - mf.mean) <= 3 * combined_stderr(npl, mf)


@pytest.mark.parametrize("n, m, eps", [(1, None, 0.0), (3, 8.0, 0.2), (4, 2.0, 0.5)])
def test_nplayer_unit_running_cost(n, m, eps):
    model = trivial_model(running=1.0)
    budget = replace(SMALL, n_worlds=4, train_worlds=2, n_nodes=64, train_nodes=16)
    est, _ = estimate_nplayer_value(model, n, m, eps, eps, 0.25, gaussian_quantiles(0, 1, 8), budget)
    assert est.mean == 0.75


def test_aggregate_degenerates_without_regularisation():
    model = bang_bang()
    mu = gaussian_quantiles(0.9, 0.3, 256)
    budget = replace(SMALL, n_nodes=256, train_nodes=64)
    a, _ = aggregate_value(model, 4, 8.0, 0.0, 0.0, 0.5, mu, budget=budget, policy=ConstantPolicy(1))
    b, _ = estimate_nplayer_value(model, 4, 8.0, 0.0, 0.0, 0.5, mu, budget, policy=ConstantPolicy(1))
    assert a.mean == b.mean
    c, _ = aggregate_value(model, 4, 8.0, 0.3, 0.3, 0.0, mu, budget=budget, policy=ConstantPolicy(1))
    assert c.mean == estimate_nplayer_value(model, 4, 8.0, 0.3, 0.3, 0.0, mu, budget, policy=ConstantPolicy(1))[0].mean


def test_aggregate_shift_bound():
    model = bang_bang()
    mu = gaussian_quantiles(0.9, 0.3, 256)
    t0, e0, e1 = 0.5, 0.1, 0.1
    budget = replace(SMALL, n_worlds=1024, n_nodes=256, train_nodes=64)
    agg, _ = aggregate_value(model, 4, None, e0, e1, t0, mu, budget=budget, policy=ConstantPolicy(1))
    base, _ = estimate_nplayer_value(model, 4, None, e0, e1, t0, mu, budget, policy=ConstantPolicy(1))
    bound = model.K * (e0 + e1) * math.sqrt(2 * t0 / math.pi)
    assert abs(agg.mean - base.mean) <= bound + 3 * combined_stderr(agg, base)
