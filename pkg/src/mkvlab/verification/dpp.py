"""Dynamic programming and law invariance checks at particle scale."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..control_value import (
    Budget,
    ConstantPolicy,
    DeterministicTime,
    Problem,
    ValueEstimate,
    canonical_cloud,
    estimate_value,
    make_problem,
    paired_stderr,
    search_policy,
)
from ..dynamics import initial_cloud, run_particles, terminal_cost
from ..errors import PreconditionError, UnsupportedStructure
from ..measures import EmpiricalMeasure, w2_quantile_1d, wasserstein2
from ..model import ModelSpec
from ..noise_paths import sample_worlds, stream_rng


@dataclass
class ValueTable:
    """v(theta, .) fitted on clouds of one shape shifted to several means; linear in the cloud mean."""

    theta: float
    means: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray

    def __call__(self, x, noise=None) -> np.ndarray:
        return np.interp(x[..., 0].mean(axis=-1), self.means, self.values)


def reference_cloud(model: ModelSpec, mu: EmpiricalMeasure, t0: float, theta: float, n_atoms: int) -> np.ndarray:
    """Shape of the cloud at theta: mu spread by the idiosyncratic diffusion, centred at 0."""
    sig, _ = model.diffusions(t0)
    spread = np.sqrt(np.sum(sig ** 2, axis=1) * (theta - t0))
    base = initial_cloud(mu, n_atoms, 1)[0]
    z = stream_rng(0, 0, 17).standard_normal(base.shape)
    cloud = base + spread * z
    return cloud - cloud.mean(axis=0)


def fit_value_table(model, mu, t0, theta, policy_class, budget: Budget, n_nodes: int = 7, half_width=None,
                    node_worlds=None) -> ValueTable:
    if model.anchor_times:
        raise UnsupportedStructure("value tables over measure features ignore W0; anchored models are out of scope")
    centre = float(mu.mean()[0])
    _, sig0 = model.diffusions(t0)
    if half_width is None:
        half_width = 1.0 * (theta - t0) * float(np.max(np.abs(model.control.atoms))) + 4 * np.linalg.norm(sig0) * \
            np.sqrt(theta - t0) + 0.05
    means = centre + np.linspace(-half_width, half_width, n_nodes)
    shape = reference_cloud(model, mu, t0, theta, budget.n_particles)
    nb = replace(budget, n_worlds=node_worlds or budget.n_worlds, seed=budget.seed + 101)
    vals, ses = [], []
    for c in means:
        est, _ = estimate_value(model, theta, EmpiricalMeasure(shape + c), policy_class=policy_class, budget=nb)
        vals.append(est.mean)
        ses.append(est.stderr)
    return ValueTable(theta, means, np.array(vals), np.array(ses))


@dataclass
class DppResult:
    lhs: ValueEstimate
    rhs: ValueEstimate
    residual: float
    stderr: float
    policy_class: str
    table: ValueTable | None = None


def _theta_index(theta, grid):
    if isinstance(theta, DeterministicTime):
        return grid.index_of(theta.time)
    if isinstance(theta, (int, float)):
        return grid.index_of(float(theta))
    raise UnsupportedStructure("the particle DPP check supports deterministic times only")


def dpp_residual(model: ModelSpec, t0: float, mu, theta, policy_class: str = "table", budget: Budget | None = None,
                 n_nodes: int = 7, table: ValueTable | None = None, node_worlds=None) -> DppResult:
    """|v(t0, mu) - min over the class of E[running cost to theta + v(theta, rho_theta)]|.

    Both sides are searched on training worlds and evaluated on the same
    evaluation worlds, so the residual carries a paired standard error.
    """
    budget = budget or Budget()
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    grid = budget.grid(model)
    k_theta = _theta_index(theta, grid)
    if k_theta <= grid.index_of(t0):
        raise PreconditionError("theta must lie after t0")
    lhs, _ = estimate_value(model, t0, mu, policy_class=policy_class, budget=budget)
    if k_theta == grid.n_steps:
        terminal = None
        stop = None
    else:
        table = table or fit_value_table(model, mu, t0, grid.times[k_theta], policy_class, budget, n_nodes,
                                         node_worlds=node_worlds)
        terminal, stop = table, k_theta
    train = make_problem(model, t0, mu, budget, train=True, stop=stop, terminal=terminal)
    policy, _, partial = search_policy(train, model.control, policy_class, budget, budget.n_steps)
    evaluation = make_problem(model, t0, mu, budget, train=False, stop=stop, terminal=terminal)
    rhs = ValueEstimate.from_worlds(evaluation.values(policy), budget.n_particles,
                                    {**policy.describe(), "search": policy_class}, partial)
    return DppResult(lhs, rhs, abs(lhs.mean - rhs.mean), paired_stderr(lhs, rhs), policy_class, table)


@dataclass
class EnumerationBound:
    lhs: float
    rhs: float
    bound: float
    stderr: float
    lhs_worlds: np.ndarray
    rhs_worlds: np.ndarray


def dpp_enumeration_bound(model: ModelSpec, t0: float, mu, theta, budget: Budget | None = None,
                          n_inner: int = 8) -> EnumerationBound:
    """DPP gap of two-stage constant controls by exhaustive enumeration on frozen noise.

    Left side: min over pairs (a1 before theta, a2 after) of the mean cost. Right
    side: min over a1 of the mean of running cost to theta plus, per world, the min
    over a2 of the cost-to-go estimated on ``n_inner`` fresh continuation worlds
    (fresh so that the per-world choice cannot see the future of its own world).
    """
    budget = budget or Budget()
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    grid = budget.grid(model)
    k0, k_theta = grid.index_of(t0), _theta_index(theta, grid)
    A = model.control.size
    noise = sample_worlds(grid, budget.n_worlds, budget.n_particles, model.m, budget.seed)
    x0 = canonical_cloud(initial_cloud(mu, budget.n_particles, budget.n_worlds, budget.seed))
    W = budget.n_worlds
    first = [run_particles(model, noise, x0, ConstantPolicy(a1), k0, k_theta, record=False) for a1 in range(A)]
    pair_costs = np.empty((A, A, W))
    for a1, tr in enumerate(first):
        for a2 in range(A):
            rest = run_particles(model, noise, tr.final, ConstantPolicy(a2), k_theta, record=False)
            g = terminal_cost(model, noise, rest.final)
            pair_costs[a1, a2] = (tr.running + rest.running + g).mean(axis=1)
    a1s, a2s = np.unravel_index(np.argmin(pair_costs.mean(axis=2)), (A, A))
    lhs_worlds = pair_costs[a1s, a2s]
    inner = sample_worlds(grid, W * n_inner, budget.n_particles, model.m, budget.seed, first_world=1 << 24)
    rhs_by_a1 = np.empty((A, W))
    for a1, tr in enumerate(first):
        start_states = np.repeat(tr.final, n_inner, axis=0)
        togo = np.empty((A, W))
        for a2 in range(A):
            rest = run_particles(model, inner, start_states, ConstantPolicy(a2), k_theta, record=False)
            g = terminal_cost(model, inner, rest.final)
            togo[a2] = (rest.running + g).mean(axis=1).reshape(W, n_inner).mean(axis=1)
        rhs_by_a1[a1] = tr.running.mean(axis=1) + togo.min(axis=0)
    a1r = int(np.argmin(rhs_by_a1.mean(axis=1)))
    rhs_worlds = rhs_by_a1[a1r]
    diff = lhs_worlds - rhs_worlds
    se = float(np.std(diff, ddof=1) / np.sqrt(W)) if W > 1 else 0.0
    return EnumerationBound(float(lhs_worlds.mean()), float(rhs_worlds.mean()), float(abs(diff.mean())), se,
                            lhs_worlds, rhs_worlds)


# --- law invariance ---------------------------------------------------------------------

@dataclass
class LawInvarianceResult:
    v_xi: ValueEstimate
    v_eta: ValueEstimate
    gap: float
    stderr: float
    w2: float
    lipschitz_sqrt: float
    lipschitz_squared: float
    bias: float

    @property
    def threshold(self) -> float:
        return 3 * self.stderr + self.bias


def _probe_directions(points: np.ndarray, rng, n_dirs: int) -> list:
    """Unit-norm perturbations: a translation, a dilation about the mean and ``n_dirs`` iid draws.

    iid draws alone average out in the cloud's moments and miss the coherent moves
    to which the value is most sensitive.
    """
    n, d = points.shape
    dirs = [np.ones_like(points) / np.sqrt(d)]
    spread = points - points.mean(axis=0)
    if np.any(spread):
        dirs.append(spread / np.sqrt(np.mean(np.sum(spread ** 2, axis=1))))
    for _ in range(n_dirs):
        g = rng.standard_normal((n, d))
        dirs.append(g / np.sqrt(np.mean(np.sum(g ** 2, axis=1))))
    return dirs


def fit_value_lipschitz(model, t0, xi, policy, budget: Budget, scales=(0.05, 0.1, 0.2), n_dirs: int = 3):
    """Largest observed |J(xi + delta) - J(xi)| / ||delta|| (and / ||delta||^2) over probe perturbations.

    ``||delta||`` is the L2 norm over atoms; each direction is tried with both signs.
    The policy is held fixed and the noise is common to all runs.
    """
    base_prob = make_problem(model, t0, xi, budget, train=False, sort_init=False)
    base = base_prob.values(policy).mean()
    rng = stream_rng(budget.seed, 0, 19)
    best_sqrt = best_sq = 0.0
    for s in scales:
        for unit in _probe_directions(xi.points, rng, n_dirs):
            for sign in (1.0, -1.0):
                moved = EmpiricalMeasure(xi.points + sign * s * unit)
                prob = make_problem(model, t0, moved, budget, train=False, sort_init=False)
                diff = abs(prob.values(policy).mean() - base)
                best_sqrt = max(best_sqrt, diff / s)
                best_sq = max(best_sq, diff / s ** 2)
    return best_sqrt, best_sq


def law_invariance_gap(model: ModelSpec, t0: float, xi, eta, budget: Budget | None = None,
                       policy_class: str = "table", fit_bias: bool = True) -> LawInvarianceResult:
    """|v(t0, xi) - v(t0, eta)| with its paired standard error and a W2 sampling-bias allowance."""
    budget = budget or Budget()
    xi = xi if isinstance(xi, EmpiricalMeasure) else EmpiricalMeasure(xi)
    eta = eta if isinstance(eta, EmpiricalMeasure) else EmpiricalMeasure(eta)
    v_xi, pol = estimate_value(model, t0, xi, policy_class=policy_class, budget=budget)
    v_eta, _ = estimate_value(model, t0, eta, policy_class=policy_class, budget=budget)
    gap = abs(v_xi.mean - v_eta.mean)
    se = paired_stderr(v_xi, v_eta)
    if xi.n == eta.n and xi.d == 1:
        w2 = float(np.sqrt(np.mean((np.sort(xi.points[:, 0]) - np.sort(eta.points[:, 0])) ** 2)))
    elif xi.d == 1:
        w2 = w2_quantile_1d(xi.points, eta.points)
    else:
        w2 = wasserstein2(xi, eta, method="exact" if xi.n == eta.n and xi.n <= 512 else "entropic")
    lip_sqrt = lip_sq = 0.0
    if fit_bias and gap > 0:
        lip_sqrt, lip_sq = fit_value_lipschitz(model, t0, xi, pol, budget)
    return LawInvarianceResult(v_xi, v_eta, gap, se, w2, lip_sqrt, lip_sq, lip_sqrt * w2)
