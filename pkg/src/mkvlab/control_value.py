"""Policies, shifted controls, the Monte Carlo cost functional and value search.

The value over all adapted controls is replaced by a minimum over a finite class
of symmetric feedback policies; every estimate carries the descriptor of the class
it was computed over.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import NPlayerSystem, initial_cloud, run_particles, terminal_cost
from .errors import ConfigurationError, PreconditionError
from .measures import EmpiricalMeasure, convolve_gaussian
from .model import ControlSet, ModelSpec
from .noise_paths import BrownianPath, TimeGrid, WorldNoise, concat_paths, sample_worlds, stream_rng

TRAIN_WORLD_OFFSET = 1 << 20


# --- policies --------------------------------------------------------------------------

class ConstantPolicy:
    def __init__(self, index: int):
        self.index = int(index)

    def act(self, k, t, x, w0):
        return np.full(x.shape[:2], self.index, dtype=int)

    def describe(self):
        return {"class": "constant", "index": self.index}


def _bin(values, lo, hi, n_bins):
    if n_bins == 1:
        return np.zeros(np.shape(values), dtype=int)
    pos = (np.asarray(values) - lo) / (hi - lo) * n_bins
    return np.clip(np.floor(pos), 0, n_bins - 1).astype(int)


@dataclass
class TablePolicy:
    """Lookup table of control indices over (time block, state bin, cloud-mean bin).

    Blocks split the absolute step range [0, n_steps) into equal parts. State bins
    use the first coordinate; outer bins absorb everything beyond the range.
    """

    table: np.ndarray  # (n_blocks, n_xbins, n_mbins) of ints
    n_steps: int
    x_range: tuple = (-3.0, 3.0)
    m_range: tuple = (-1.5, 1.5)

    @classmethod
    def constant(cls, index, n_steps, n_blocks=4, n_xbins=17, n_mbins=9, x_range=(-3.0, 3.0), m_range=(-1.5, 1.5)):
        return cls(np.full((n_blocks, n_xbins, n_mbins), int(index), dtype=int), n_steps, x_range, m_range)

    @property
    def n_blocks(self) -> int:
        return self.table.shape[0]

    def block_of(self, k: int) -> int:
        return min(self.n_blocks - 1, k * self.n_blocks // self.n_steps)

    def block_start(self, b: int) -> int:
        return -(-b * self.n_steps // self.n_blocks)

    def bins(self, x):
        xb = _bin(x[..., 0], *self.x_range, self.table.shape[1])
        mb = _bin(x[..., 0].mean(axis=-1, keepdims=True), *self.m_range, self.table.shape[2])
        return xb, np.broadcast_to(mb, xb.shape)

    def act(self, k, t, x, w0):
        xb, mb = self.bins(x)
        return self.table[self.block_of(k)][xb, mb]

    def with_entry(self, b, xb, mb, a) -> "TablePolicy":
        tab = self.table.copy()
        tab[b, xb, mb] = a
        return replace(self, table=tab)

    def describe(self):
        return {"class": "table", "shape": list(self.table.shape), "x_range": list(self.x_range),
                "m_range": list(self.m_range)}


class OpenLoopPolicy:
    """Control read off the common-noise path: ``rule(k, w0_path) -> index per world``."""

    def __init__(self, rule):
        self.rule = rule

    def act(self, k, t, x, w0):
        return np.broadcast_to(np.asarray(self.rule(k, w0))[:, None], x.shape[:2])

    def describe(self):
        return {"class": "open_loop"}


# --- stopping rules and shifted controls ------------------------------------------------

@dataclass(frozen=True)
class DeterministicTime:
    time: float

    def index(self, grid: TimeGrid, w0_values=None) -> int:
        return grid.index_of(self.time)


@dataclass(frozen=True)
class FirstHitting:
    """First grid time at which |W0| reaches ``level``, capped at ``cap`` (default T)."""

    level: float
    cap: float | None = None

    def index(self, grid: TimeGrid, w0_values) -> int:
        last = grid.n_steps if self.cap is None else grid.index_of(self.cap)
        hit = np.nonzero(np.linalg.norm(np.atleast_2d(w0_values)[: last + 1], axis=-1) >= self.level)[0]
        return int(hit[0]) if hit.size else last


class ShiftedOpenLoop:
    """The open-loop control evaluated on ``w_hat`` concatenated with the live path at theta(w_hat)."""

    def __init__(self, base: OpenLoopPolicy, theta, w_hat: BrownianPath):
        self.base, self.w_hat = base, w_hat
        self.theta_index = theta.index(w_hat.grid, w_hat.values)
        self.r = w_hat.grid.times[self.theta_index]

    def act(self, k, t, x, w0):
        # same gluing as concat_paths, applied to every world's live prefix
        j = self.theta_index
        glued = np.broadcast_to(self.w_hat.values[: w0.shape[1]], w0.shape).copy()
        if w0.shape[1] > j:
            glued[:, j:] = self.w_hat.values[j] + (w0[:, j:] - w0[:, j:j + 1])
        return self.base.act(k, t, x, glued)


def shift_control(alpha, theta, w_hat: BrownianPath):
    """Shift of a control by the path ``w_hat`` at the stopping time ``theta``.

    Feedback policies are unchanged: they already read the current state only.
    """
    theta.index(w_hat.grid, w_hat.values)  # validates that theta is on the grid
    if isinstance(alpha, OpenLoopPolicy):
        return ShiftedOpenLoop(alpha, theta, w_hat)
    return alpha


# --- estimates ------------------------------------------------------------------------

@dataclass
class ValueEstimate:
    mean: float
    stderr: float
    n_worlds: int
    n_particles: int
    per_world_values: np.ndarray
    policy_class: dict = field(default_factory=dict)
    partial: bool = False
    n_evals: int = 0

    @classmethod
    def from_worlds(cls, values, n_particles, policy_class=None, partial=False, n_evals=0):
        v = np.asarray(values, dtype=float)
        se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        mean = float(v.mean())
        if np.ptp(v) == 0:  # identical worlds: report the value itself, free of summation rounding
            se, mean = 0.0, float(v[0])
        return cls(mean, se, v.size, n_particles, v, policy_class or {}, partial, n_evals)

    def record(self, **extra) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_worlds": self.n_worlds,
                "n_particles": self.n_particles, "class": self.policy_class, "partial": self.partial, **extra}


def combined_stderr(*estimates) -> float:
    return float(np.sqrt(sum(e.stderr ** 2 for e in estimates)))


def paired_stderr(a, b) -> float:
    diff = np.asarray(a.per_world_values) - np.asarray(b.per_world_values)
    return float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 and np.ptp(diff) > 0 else 0.0


@dataclass(frozen=True)
class Budget:
    n_worlds: int = 32
    n_particles: int = 2048
    n_steps: int = 32
    train_worlds: int = 8
    train_particles: int = 256
    n_blocks: int = 4
    n_xbins: int = 17
    n_mbins: int = 9
    x_range: tuple = (-3.0, 3.0)
    m_range: tuple = (-1.5, 1.5)
    passes: int = 2
    max_evals: int = 20000
    exhaustive_limit: int = 0
    n_nodes: int = 4096
    train_nodes: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("n_worlds", "n_particles", "n_steps", "train_worlds", "train_particles", "n_blocks",
                     "n_xbins", "n_mbins"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_steps % self.n_blocks:
            raise ConfigurationError("n_blocks must divide n_steps")

    def grid(self, model: ModelSpec) -> TimeGrid:
        return TimeGrid(0.0, model.horizon, self.n_steps)


def canonical_cloud(x0: np.ndarray) -> np.ndarray:
    """Sort each world's atoms lexicographically so results depend on the atoms as a set."""
    keys = x0[..., ::-1].transpose(2, 0, 1)
    order = np.lexsort(keys, axis=-1)
    return np.take_along_axis(x0, order[..., None], axis=1)


class Problem:
    """Frozen noise and initial cloud on which candidate policies are compared.

    ``terminal(x, noise)`` maps the state at step ``stop`` to per-world values; by
    default it is the mean terminal cost. ``system`` switches to the n-player
    dynamics. Value per world = mean over particles of running cost + terminal.
    """

    def __init__(self, model: ModelSpec, noise: WorldNoise, x0: np.ndarray, start: int = 0, stop: int | None = None,
                 terminal=None, system: NPlayerSystem | None = None):
        self.model, self.noise, self.x0 = model, noise, x0
        self.start = start
        self.stop = noise.grid.n_steps if stop is None else stop
        self.system = system
        self.terminal = terminal
        self.n_evals = 0

    def _run(self, policy, x, start, record):
        if self.system is None:
            return run_particles(self.model, self.noise, x, policy, start, self.stop, record=record)
        s = self.system
        return run_particles(self.model, self.noise, x, policy, start, self.stop, s.coefficients, s.eps0, s.eps1,
                             record=record)

    def _terminal(self, x):
        if self.terminal is not None:
            return np.asarray(self.terminal(x, self.noise), float)
        if self.stop != self.noise.grid.n_steps:
            raise PreconditionError("a stop before T needs a terminal functional")
        coeffs = None if self.system is None else self.system.coefficients
        return terminal_cost(self.model, self.noise, x, coeffs).mean(axis=1)

    def values(self, policy, record=False):
        """Per-world values; with ``record`` also the trajectory for restarts."""
        self.n_evals += 1
        tr = self._run(policy, self.x0, self.start, record)
        vals = tr.running.mean(axis=1) + self._terminal(tr.final)
        return (vals, tr) if record else vals

    def values_from(self, policy, tr, k):
        """Per-world values when ``policy`` agrees with the recorded one before step ``k``."""
        self.n_evals += 1
        j = k - self.start
        rest = self._run(policy, tr.states[:, j], k, False)
        return (tr.running_path[:, j] + rest.running).mean(axis=1) + self._terminal(rest.final)


def _visited(policy: TablePolicy, trs, block: int):
    seen = set()
    for tr in trs if isinstance(trs, list) else [trs]:
        lo = max(policy.block_start(block), tr.start)
        hi = min(policy.block_start(block + 1), tr.stop)
        for k in range(lo, hi):
            xb, mb = policy.bins(tr.states[:, k - tr.start])
            seen.update(zip(xb.ravel().tolist(), mb.ravel().tolist()))
    return sorted(seen)


def search_constant(problem: Problem, controls: ControlSet):
    vals = [problem.values(ConstantPolicy(i)).mean() for i in range(controls.size)]
    best = int(np.argmin(vals))  # first minimum: lowest atom index on ties
    return best, vals


def search_table(problem: Problem, controls: ControlSet, budget: Budget, n_steps: int):
    """Backward coordinate descent over visited table entries, started from the best constant.

    Entries are visited block by block from the last block to the first; a change
    is accepted only on strict improvement of the mean over worlds. Returns the
    policy, its objective and whether the evaluation budget ran out.
    """
    best_const, _ = search_constant(problem, controls)
    policy = TablePolicy.constant(best_const, n_steps, budget.n_blocks, budget.n_xbins, budget.n_mbins,
                                  budget.x_range, budget.m_range)
    first_block = policy.block_of(problem.start)
    last_block = policy.block_of(max(problem.stop - 1, problem.start))
    vals, tr = problem.values(policy, record=True)
    best = vals.mean()
    partial = False
    for _ in range(1 + budget.passes):
        improved = False
        for b in range(last_block, first_block - 1, -1):
            k_b = max(policy.block_start(b), problem.start)
            for xb, mb in _visited(policy, tr, b):
                for a in range(controls.size):
                    if a == policy.table[b, xb, mb]:
                        continue
                    if problem.n_evals >= budget.max_evals:
                        partial = True
                        break
                    cand = policy.with_entry(b, xb, mb, a)
                    v = problem.values_from(cand, tr, k_b).mean()
                    if v < best - 1e-12 * max(1.0, abs(best)):
                        policy, best, improved = cand, v, True
                        vals, tr = problem.values(policy, record=True)
                if partial:
                    break
            if partial:
                break
        if partial or not improved:
            break
    return policy, best, partial


def enumerate_tables(problem: Problem, controls: ControlSet, budget: Budget, n_steps: int):
    """Exhaustive minimum over every table in the class (tiny classes only)."""
    proto = TablePolicy.constant(0, n_steps, budget.n_blocks, budget.n_xbins, budget.n_mbins, budget.x_range,
                                 budget.m_range)
    first_block = proto.block_of(problem.start)
    last_block = proto.block_of(max(problem.stop - 1, problem.start))
    live = proto.table[first_block:last_block + 1].shape
    size = controls.size ** int(np.prod(live))
    if size > 10 ** 6:
        raise PreconditionError(f"class of {size} tables is too large to enumerate")
    best, best_policy = np.inf, None
    for combo in itertools.product(range(controls.size), repeat=int(np.prod(live))):
        tab = proto.table.copy()
        tab[first_block:last_block + 1] = np.array(combo).reshape(live)
        pol = replace(proto, table=tab)
        v = problem.values(pol).mean()
        if v < best:
            best, best_policy = v, pol
    return best_policy, best, size


def class_size(controls: ControlSet, budget: Budget, start: int, stop: int, n_steps: int) -> int:
    proto = TablePolicy.constant(0, n_steps, budget.n_blocks, budget.n_xbins, budget.n_mbins)
    blocks = proto.block_of(max(stop - 1, start)) - proto.block_of(start) + 1
    return controls.size ** (blocks * budget.n_xbins * budget.n_mbins)


def search_policy(problem: Problem, controls: ControlSet, policy_class: str, budget: Budget, n_steps: int):
    if policy_class == "constant":
        best, vals = search_constant(problem, controls)
        return ConstantPolicy(best), vals[best], False
    if policy_class == "table":
        if budget.exhaustive_limit and class_size(controls, budget, problem.start, problem.stop,
                                                  n_steps) <= budget.exhaustive_limit:
            pol, v, _ = enumerate_tables(problem, controls, budget, n_steps)
            return pol, v, False
        return search_table(problem, controls, budget, n_steps)
    raise ConfigurationError(f"unknown policy class {policy_class!r}")


def _start_index(grid: TimeGrid, t0: float) -> int:
    if not grid.t0 <= t0 < grid.T:
        raise PreconditionError(f"t0={t0} outside [{grid.t0}, {grid.T})")
    return grid.index_of(t0)


def make_problem(model, t0, init, budget: Budget, train: bool, stop=None, terminal=None, system=None,
                 sort_init=True, regularization=False, seed_offset=0) -> Problem:
    """Problem on training or evaluation worlds (disjoint world ids)."""
    grid = budget.grid(model)
    k0 = _start_index(grid, t0)
    n_worlds = budget.train_worlds if train else budget.n_worlds
    n_part = budget.train_particles if train else budget.n_particles
    if system is not None:
        n_part = system.n
    first = (TRAIN_WORLD_OFFSET if train else 0) + seed_offset
    noise = sample_worlds(grid, n_worlds, n_part, model.m, budget.seed, first, regularization, model.d)
    x0 = initial_cloud(init, n_part, n_worlds, budget.seed, first)
    if sort_init:
        x0 = canonical_cloud(x0)
    return Problem(model, noise, x0, k0, stop, terminal, system)


def estimate_J(model: ModelSpec, t0: float, init, policy, n_worlds: int = 32, n_particles: int = 2048, seed: int = 0,
               n_steps: int = 32, sort_init: bool = True) -> ValueEstimate:
    """Per world: mean over particles of running plus terminal cost; aggregated over worlds."""
    budget = Budget(n_worlds=n_worlds, n_particles=n_particles, n_steps=n_steps, n_blocks=1, seed=seed)
    problem = make_problem(model, t0, init, budget, train=False, sort_init=sort_init)
    desc = policy.describe() if hasattr(policy, "describe") else {"class": type(policy).__name__}
    return ValueEstimate.from_worlds(problem.values(policy), n_particles, desc, n_evals=1)


def estimate_value(model: ModelSpec, t0: float, init, controls: ControlSet | None = None, policy_class: str = "table",
                   budget: Budget | None = None):
    """Minimum of J over the policy class; the policy is chosen on training worlds.

    Returns the estimate on the evaluation worlds and the chosen policy.
    """
    budget = budget or Budget()
    controls = controls or model.control
    if controls is not model.control:
        model = replace(model, control=controls)
    train = make_problem(model, t0, init, budget, train=True)
    policy, _, partial = search_policy(train, controls, policy_class, budget, budget.n_steps)
    evaluation = make_problem(model, t0, init, budget, train=False)
    desc = {**policy.describe(), "search": policy_class, "grid_size": controls.size}
    return ValueEstimate.from_worlds(evaluation.values(policy), budget.n_particles, desc, partial,
                                     train.n_evals + 1), policy


# --- n-player values -------------------------------------------------------------------

def _iid_sampler(mu):
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    return lambda rng, n: mu.points[rng.integers(0, mu.n, size=n)]


def nplayer_problem(model, n, m, eps0, eps1, t0, mu, budget: Budget, train: bool, init=None, seed_offset=0):
    nodes = budget.train_nodes if train else budget.n_nodes
    system = NPlayerSystem(model, n, m, eps0, eps1, nodes, budget.seed)
    init = init or _iid_sampler(mu)
    return make_problem(model, t0, init, budget, train, system=system, sort_init=False,
                        regularization=bool(eps0 or eps1), seed_offset=seed_offset)


def estimate_nplayer_value(model: ModelSpec, n: int, m, eps0: float, eps1: float, t0: float, mu,
                           budget: Budget | None = None, policy_class: str = "table", init=None, policy=None):
    """Cooperative symmetric n-player value: one shared feedback rule, mean cost over players.

    Worlds carry ``n`` players with initial states iid from ``mu``. Training uses
    ``budget.train_nodes`` quadrature nodes for the mollified coefficients and
    evaluation uses ``budget.n_nodes``. Pass ``policy`` to skip the search.
    """
    budget = budget or Budget()
    partial, evals = False, 0
    if policy is None:
        train = nplayer_problem(model, n, m, eps0, eps1, t0, mu, budget, True, init)
        policy, _, partial = search_policy(train, model.control, policy_class, budget, budget.n_steps)
        evals = train.n_evals
    evaluation = nplayer_problem(model, n, m, eps0, eps1, t0, mu, budget, False, init)
    desc = {**policy.describe(), "search": policy_class, "n": n, "m": m, "eps0": eps0, "eps1": eps1}
    est = ValueEstimate.from_worlds(evaluation.values(policy), n, desc, partial, evals + 1)
    return est, policy


def aggregate_value(model: ModelSpec, n: int, m, eps0: float, eps1: float, t0: float, mu,
                    n_reg_samples: int = 8, budget: Budget | None = None, policy_class: str = "table",
                    policy=None, cloud_size: int = 4096):
    """n-player value averaged over Gaussian convolutions of the initial law.

    Sample r draws B0 ~ N(0, t0 I), convolves ``mu`` with N(eps0 B0, eps1^2 t0 I) and
    evaluates the n-player value there. One shared policy is searched on the pooled
    training samples. Per-sample values are pooled world by world. When the
    convolution is degenerate this is exactly :func:`estimate_nplayer_value`.
    """
    budget = budget or Budget()
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    if t0 == 0 or (eps0 == 0 and eps1 == 0):
        return estimate_nplayer_value(model, n, m, eps0, eps1, t0, mu, budget, policy_class, policy=policy)
    rng = stream_rng(budget.seed, 0, 13)
    shifts = eps0 * np.sqrt(t0) * rng.standard_normal((n_reg_samples, model.d))
    measures = [convolve_gaussian(mu, shifts[r], eps1 ** 2 * t0, cloud_size, budget.seed * 7919 + r)
                for r in range(n_reg_samples)]
    per = replace(budget, n_worlds=max(2, budget.n_worlds // n_reg_samples),
                  train_worlds=max(1, budget.train_worlds // n_reg_samples))
    partial = False
    if policy is None:
        probs = [nplayer_problem(model, n, m, eps0, eps1, t0, nu, per, True, seed_offset=r * 7919)
                 for r, nu in enumerate(measures)]
        pooled = _PooledProblem(probs)
        policy, _, partial = search_policy(pooled, model.control, policy_class, per, per.n_steps)
    vals = []
    for r, nu in enumerate(measures):
        prob = nplayer_problem(model, n, m, eps0, eps1, t0, nu, per, False, seed_offset=r * 7919)
        vals.append(prob.values(policy))
    desc = {**policy.describe(), "search": policy_class, "n": n, "m": m, "eps0": eps0, "eps1": eps1,
            "n_reg_samples": n_reg_samples}
    return ValueEstimate.from_worlds(np.concatenate(vals), n, desc, partial), policy


class _PooledProblem:
    """Several problems searched as one: per-world values concatenated."""

    def __init__(self, problems):
        self.problems = problems
        self.start = problems[0].start
        self.stop = problems[0].stop
        self.n_evals = 0

    def values(self, policy, record=False):
        self.n_evals += 1
        out = [p.values(policy, record) for p in self.problems]
        if not record:
            return np.concatenate(out)
        return np.concatenate([o[0] for o in out]), [o[1] for o in out]

    def values_from(self, policy, trs, k):
        self.n_evals += 1
        return np.concatenate([p.values_from(policy, tr, k) for p, tr in zip(self.problems, trs)])
