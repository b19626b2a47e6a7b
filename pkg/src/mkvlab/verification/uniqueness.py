"""BSDE envelope, gradient constant of the n-player value, the sandwich check and the n-player Cauchy trend."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..control_value import (
    Budget,
    ValueEstimate,
    aggregate_value,
    estimate_nplayer_value,
    estimate_value,
    nplayer_problem,
)
from ..dynamics import initial_cloud, run_particles
from ..errors import PreconditionError
from ..measures import EmpiricalMeasure, w2_quantile_1d
from ..model import ModelSpec, Mollifier, mollification_error_bound
from ..noise_paths import TimeGrid, sample_worlds, stream_rng

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass
class BsdePath:
    times: np.ndarray
    Y: np.ndarray
    eps: float
    eps0: float
    eps1: float
    K: float
    C_K: float
    terminal: float

    @property
    def Z(self) -> np.ndarray:
        return np.zeros_like(self.Y)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.Y)))


def _sqrt_integral(a: float, b: float, n_panels: int = 4) -> float:
    """Integral of sqrt(s) over [a, b] by Gauss-Legendre in u = sqrt(s), where the integrand is 2u^2."""
    ua, ub = math.sqrt(a), math.sqrt(b)
    edges = np.linspace(ua, ub, n_panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        u = 0.5 * (hi - lo) * GL_NODES + 0.5 * (hi + lo)
        total += 0.5 * (hi - lo) * np.sum(GL_WEIGHTS * 2.0 * u * u)
    return float(total)


def bsde_envelope(eps: float, eps0: float, eps1: float, K: float, C_K: float, grid: TimeGrid,
                  f_res=None, b_res=None, g_res: float = 0.0) -> BsdePath:
    """Y(t) = g_res + K(2 sqrt(2T)/sqrt(pi))(eps0 + eps1) + int_t^T [f_res + C_K b_res + 2K(1 + C_K) 2 sqrt(2s)/sqrt(pi) (eps0 + eps1)] ds.

    Residual paths are deterministic grid functions (trapezoid rule); the sqrt(s)
    part is integrated exactly by Gauss-Legendre after s = u^2. Z is identically 0.
    ``eps`` is carried for the budget; it enters only through the residual inputs.
    """
    if min(eps, eps0, eps1, K, C_K) < 0 or g_res < 0:
        raise PreconditionError("BSDE inputs must be nonnegative")
    t = grid.times
    T = grid.T
    zeros = np.zeros_like(t)
    f_res = zeros if f_res is None else np.asarray(f_res, float)
    b_res = zeros if b_res is None else np.asarray(b_res, float)
    if np.any(f_res < 0) or np.any(b_res < 0):
        raise PreconditionError("residual processes must be nonnegative")
    c = eps0 + eps1
    terminal = g_res + K * 2.0 * math.sqrt(2.0 * T) / math.sqrt(math.pi) * c
    grid_part = f_res + C_K * b_res
    step = 0.5 * (grid_part[1:] + grid_part[:-1]) * np.diff(t)
    tail_grid = np.concatenate([np.cumsum(step[::-1])[::-1], [0.0]])
    coef = 2.0 * K * (1.0 + C_K) * 2.0 * math.sqrt(2.0) / math.sqrt(math.pi) * c
    tail_sqrt = np.array([_sqrt_integral(max(s, 0.0), T) for s in t])
    Y = terminal + tail_grid + coef * tail_sqrt
    Y[-1] = terminal
    return BsdePath(t, Y, eps, eps0, eps1, K, C_K, terminal)


def bsde_closed_form(t, eps0: float, eps1: float, K: float, C_K: float, T: float) -> np.ndarray:
    """Zero-residual envelope: K(2 sqrt(2T)/sqrt(pi))c + 2K(1 + C_K)c(2 sqrt 2/sqrt(pi))(2/3)(T^1.5 - t^1.5)."""
    c = eps0 + eps1
    t = np.asarray(t, float)
    return (K * 2.0 * math.sqrt(2.0 * T) / math.sqrt(math.pi) * c
            + 2.0 * K * (1.0 + C_K) * c * 2.0 * math.sqrt(2.0) / math.sqrt(math.pi) * (2.0 / 3.0) * (T ** 1.5 - t ** 1.5))


def envelope_constant(K: float, C_K: float, T: float) -> float:
    """C_tilde with sup|Y| <= C_tilde (eps + eps0 + eps1) whenever the residuals are bounded by eps.

    Covers the closed-form noise part and residuals g, f, b each at most eps.
    """
    noise_part = K * 2.0 * math.sqrt(2.0 * T) / math.sqrt(math.pi) + \
        2.0 * K * (1.0 + C_K) * 2.0 * math.sqrt(2.0) / math.sqrt(math.pi) * (2.0 / 3.0) * T ** 1.5
    residual_part = 1.0 + T * (1.0 + C_K)
    return max(noise_part, residual_part)


# --- gradient constant ------------------------------------------------------------------

def fit_C_K(model: ModelSpec, n: int, m, eps0: float, eps1: float, t0: float, mu, policy, budget: Budget,
            h: float = 0.05) -> tuple[float, np.ndarray]:
    """n times the largest |d v / d x_i| over players, by central differences with common noise.

    The policy is held fixed; player i's initial state is moved by +-h in every world.
    """
    prob = nplayer_problem(model, n, m, eps0, eps1, t0, mu, budget, train=False)
    grads = np.empty(n)
    base_x0 = prob.x0.copy()
    for i in range(n):
        up, dn = base_x0.copy(), base_x0.copy()
        up[:, i, 0] += h
        dn[:, i, 0] -= h
        prob.x0 = up
        vu = prob.values(policy).mean()
        prob.x0 = dn
        vd = prob.values(policy).mean()
        grads[i] = (vu - vd) / (2 * h)
    prob.x0 = base_x0
    return float(n * np.max(np.abs(grads))), grads


def empirical_measure_bias(cloud: np.ndarray, n: int, n_draws: int = 256, seed: int = 0) -> float:
    """E W2(mu_n, mu) for n iid draws from the 1-d cloud, exact quantile coupling."""
    rng = stream_rng(seed, 0, 23)
    flat = np.asarray(cloud, float).ravel()
    return float(np.mean([w2_quantile_1d(flat[rng.integers(0, flat.size, n)], flat) for _ in range(n_draws)]))


@dataclass
class SandwichRow:
    n: int
    m: float | None
    eps: float
    frak_v: ValueEstimate
    Y0: float
    C_K: float
    h_term: float
    m_term: float
    lower: float
    upper: float
    slack: float
    violation: float  # distance of v outside [lower - slack, upper + slack], 0 inside

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass
class SandwichReport:
    v: ValueEstimate
    rows: list
    violations: list = field(default_factory=list)

    def widths(self, n=None, m=None) -> list:
        return [r.width for r in self.rows if (n is None or r.n == n) and (m is None or r.m == m)]

    @property
    def passed(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class _SandwichContext:
    model: ModelSpec
    t0: float
    mu: EmpiricalMeasure
    v: ValueEstimate
    terminal_cloud: np.ndarray
    budget: Budget
    nplayer_budget: Budget
    n_reg_samples: int
    residuals: dict
    policy_class: str


def sandwich_row(ctx: _SandwichContext, n: int, m, eps: float) -> SandwichRow:
    """One (n, m, eps) cell; pure given the context, so cells can run in any order or process."""
    model, nb = ctx.model, ctx.nplayer_budget
    grid = ctx.budget.grid(model)
    k0 = grid.index_of(ctx.t0)
    h_term = model.K * max(empirical_measure_bias(ctx.mu.points, n, seed=ctx.budget.seed),
                           empirical_measure_bias(ctx.terminal_cloud, n, seed=ctx.budget.seed))
    m_term = 0.0 if m is None else mollification_error_bound(model.K, m, Mollifier(model.d, m))
    frak, pol_n = aggregate_value(model, n, m, eps, eps, ctx.t0, ctx.mu, ctx.n_reg_samples, nb, ctx.policy_class)
    C_K, _ = fit_C_K(model, n, m, eps, eps, ctx.t0, ctx.mu, pol_n, nb)
    res = ctx.residuals
    Y = bsde_envelope(eps, eps, eps, model.K, C_K, TimeGrid(ctx.t0, grid.T, grid.n_steps - k0), res.get("f"),
                      res.get("b"), res.get("g", 0.0))
    Y0 = float(Y.Y[0])
    v = ctx.v
    slack = 3.0 * math.hypot(v.stderr, frak.stderr) + (1.0 + (C_K + 1.0) * (grid.T - ctx.t0)) * (h_term + m_term)
    lower, upper = frak.mean - Y0, frak.mean + Y0
    viol = max(lower - slack - v.mean, v.mean - upper - slack, 0.0)
    return SandwichRow(n, m, eps, frak, Y0, C_K, h_term, m_term, lower, upper, slack, viol)


def _call_row(args):
    return sandwich_row(*args)


def sandwich_check(model: ModelSpec, t0: float, mu, n_list=(8,), m_list=(8.0,),
                   eps_schedule=(0.2, 0.1, 0.05), budget: Budget | None = None,
                   nplayer_budget: Budget | None = None, n_reg_samples: int = 8, residuals=None,
                   policy_class: str = "table", map_fn=map) -> SandwichReport:
    """Checks frak_v - Y - slack <= v <= frak_v + Y + slack over (n, m, eps) with eps = eps0 = eps1.

    slack = 3 combined stderr + (1 + (C_K + 1)(T - t0)) (h_n term + m term), with the
    h_n term measured as K E W2(n-sample, law) over the initial and mean-field
    terminal clouds and the m term 2K M1/m. ``map_fn`` may be a process-pool map;
    cells are independent and seeded, so the report does not depend on it.
    """
    budget = budget or Budget()
    nb = nplayer_budget or replace(budget, n_worlds=2048, train_worlds=256)
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    grid = budget.grid(model)
    v, policy = estimate_value(model, t0, mu, policy_class=policy_class, budget=budget)
    noise = sample_worlds(grid, 1, budget.n_particles, model.m, budget.seed)
    x0 = initial_cloud(mu, budget.n_particles, 1, budget.seed)
    final = run_particles(model, noise, x0, policy, grid.index_of(t0), record=False).final[0]
    ctx = _SandwichContext(model, t0, mu, v, final, budget, nb, n_reg_samples, dict(residuals or {}), policy_class)
    cells = [(ctx, n, m, eps) for n in n_list for m in m_list for eps in eps_schedule]
    rows = list(map_fn(_call_row, cells))
    violations = [{"n": r.n, "m": r.m, "eps": r.eps, "magnitude": r.violation} for r in rows if r.violation > 0]
    return SandwichReport(v, rows, violations)


# --- n-player Cauchy trend ------------------------------------------------------------------

@dataclass
class CauchyTrend:
    n_list: list
    values: list
    diffs: np.ndarray
    diff_stderr: np.ndarray
    non_increasing: bool


def nplayer_cauchy(model: ModelSpec, mu, n_list=(2, 4, 8, 16), m=None, eps0: float = 0.0, eps1: float = 0.0,
                   t0: float = 0.0, budget: Budget | None = None, policy_class: str = "table") -> CauchyTrend:
    """|v_n - v_2n| along the list, with paired standard errors (worlds are shared across n).

    The trend holds when each difference is at most the previous one plus three
    standard errors of the two differences combined.
    """
    budget = budget or Budget(n_worlds=2048, train_worlds=256)
    ests = [estimate_nplayer_value(model, n, m, eps0, eps1, t0, mu, budget, policy_class)[0] for n in n_list]
    diffs, ses = [], []
    for a, b in zip(ests[:-1], ests[1:]):
        d = a.per_world_values - b.per_world_values
        diffs.append(abs(d.mean()))
        ses.append(float(np.std(d, ddof=1) / np.sqrt(d.size)))
    diffs, ses = np.array(diffs), np.array(ses)
    ok = all(diffs[j + 1] <= diffs[j] + 3.0 * math.hypot(ses[j], ses[j + 1]) for j in range(len(diffs) - 1))
    return CauchyTrend(list(n_list), ests, diffs, ses, bool(ok))
