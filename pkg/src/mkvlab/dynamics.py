"""Euler–Maruyama for the controlled particle system with common noise and for the n-player system.

Worlds are simulated together: states have shape (W, n, d), where each world has
its own common-noise path and the within-world cloud stands in for the
conditional law given the common noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PreconditionError, SimulationBlowUp
from .measures import EmpiricalMeasure, tile_indices
from .model import MollifiedCoefficients, ModelSpec
from .noise_paths import INIT, NoiseBundle, TimeGrid, WorldNoise, sample_worlds, stream_rng

BLOW_UP = 1e6


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray  # (n_p, d)
    time_index: int
    world_id: int

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)


@dataclass(frozen=True)
class ConditionalLawPath:
    measures: tuple
    world_id: int


@dataclass
class Trajectory:
    """Result of one batched simulation.

    ``states`` holds (W, n_recorded, n, d) with ``n_recorded = stop - start + 1`` when
    the path was recorded, otherwise only the final state (W, 1, n, d).
    ``running`` is the per-particle running cost (W, n) accumulated over the window;
    ``running_path`` its cumulative values per recorded step.
    """

    grid: TimeGrid
    start: int
    stop: int
    states: np.ndarray
    running: np.ndarray
    actions: np.ndarray | None = None
    worlds: tuple = ()
    running_path: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    def ensemble(self, world: int, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.states[world, k - self.start], k, self.worlds[world] if self.worlds else world)

    def law_path(self, world: int = 0) -> ConditionalLawPath:
        wid = self.worlds[world] if self.worlds else world
        return ConditionalLawPath(tuple(EmpiricalMeasure(s) for s in self.states[world]), wid)

    def to_csv(self, world: int = 0) -> str:
        """Long-format CSV of the conditional law path: step, time, atom, coordinates."""
        rows = ["step,time,atom," + ",".join(f"x{j}" for j in range(self.states.shape[-1]))]
        for j, s in enumerate(self.states[world]):
            k = self.start + j
            for i, x in enumerate(s):
                rows.append(f"{k},{self.grid.times[k]:.17g},{i}," + ",".join(f"{v:.17g}" for v in x))
        return "\n".join(rows) + "\n"


# --- initial clouds -------------------------------------------------------------------

def initial_cloud(init, n_particles: int, n_worlds: int, seed: int = 0, first_world: int = 0) -> np.ndarray:
    """Initial states (W, n, d).

    ``init`` may be an EmpiricalMeasure or (n, d) array: its atoms are sorted, then
    tiled systematically when ``n_particles`` is a multiple of the atom count and
    resampled iid per world otherwise. A callable ``init(rng, n)`` is called once per world.
    """
    if callable(init) and not isinstance(init, EmpiricalMeasure):
        out = [np.asarray(init(stream_rng(seed, w, INIT), n_particles), float) for w in
               range(first_world, first_world + n_worlds)]
        out = np.stack(out)
        return out[..., None] if out.ndim == 2 else out
    atoms = init.points if isinstance(init, EmpiricalMeasure) else np.asarray(init, float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    # lexicographic order first, so the cloud depends on the atoms as a set
    atoms = atoms[np.lexsort(atoms.T[::-1])]
    if n_particles % atoms.shape[0] == 0:
        idx = tile_indices(atoms.shape[0], n_particles)
        return np.broadcast_to(atoms[idx], (n_worlds, n_particles, atoms.shape[1])).copy()
    idx = np.stack([tile_indices(atoms.shape[0], n_particles, stream_rng(seed, w, INIT))
                    for w in range(first_world, first_world + n_worlds)])
    return atoms[idx]


# --- the engine ----------------------------------------------------------------------

class _Coefficients:
    """Drift and running cost of the mean-field particle system (measure = own cloud)."""

    def __init__(self, model: ModelSpec):
        self.model = model

    def b(self, t, x, a, w0):
        return self.model.b(t, x, x, a, w0)

    def f(self, t, x, a, w0):
        return self.model.f(t, x, x, a, w0)

    def g(self, x, w0):
        return self.model.g(x, x, w0)


def run_particles(model: ModelSpec, noise: WorldNoise, x0: np.ndarray, policy, start: int = 0, stop: int | None = None,
                  coefficients=None, eps0: float = 0.0, eps1: float = 0.0, record: bool = True,
                  record_actions: bool = False, check_every: int = 1) -> Trajectory:
    """Euler–Maruyama from grid index ``start`` to ``stop`` on the given noise.

    ``policy.act(k, t, x, w0_path)`` returns control indices (W, n) into the model's
    control grid; ``w0_path`` is the common noise up to and including step k.
    Restarting at ``k`` from a recorded state reproduces the direct run exactly.
    """
    grid = noise.grid
    stop = grid.n_steps if stop is None else stop
    if not 0 <= start <= stop <= grid.n_steps:
        raise PreconditionError(f"bad simulation window [{start}, {stop}] on {grid.n_steps} steps")
    x = np.array(x0, dtype=float, copy=True)
    W, n, d = x.shape
    if d != model.d or noise.n_worlds != W or noise.n_paths < n:
        raise ConfigurationError(f"state shape {x.shape} does not match model/noise "
                                 f"(d={model.d}, worlds={noise.n_worlds}, paths={noise.n_paths})")
    coeffs = coefficients or _Coefficients(model)
    anchor_idx = model.anchor_indices(grid)
    atoms_a = model.control.atoms
    if (eps0 or eps1) and (noise.dB0 is None or noise.dB is None):
        raise ConfigurationError("regularisation noise requested but the noise carries none")
    dt = grid.dt
    states = [x.copy()] if record else None
    actions = [] if record_actions else None
    running = np.zeros((W, n))
    running_path = [running.copy()] if record else None
    for k in range(start, stop):
        t = grid.times[k]
        feats = model.w0_features(noise.W0, anchor_idx, k)
        idx = np.asarray(policy.act(k, t, x, noise.W0[:, :k + 1]))
        a = atoms_a[np.broadcast_to(idx, (W, n))]
        sig, sig0 = model.diffusions(t)
        drift = coeffs.b(t, x, a, feats)
        running += coeffs.f(t, x, a, feats) * dt
        x = x + drift * dt + noise.dW[:, :n, k] @ sig.T + (noise.dW0[:, k] @ sig0.T)[:, None, :]
        if eps0:
            x += eps0 * noise.dB0[:, None, k]
        if eps1:
            x += eps1 * noise.dB[:, :n, k]
        if (k - start) % check_every == 0 or k == stop - 1:
            if not np.all(np.abs(x) < BLOW_UP):
                raise SimulationBlowUp(k + 1)
        if record:
            states.append(x.copy())
            running_path.append(running.copy())
        if record_actions:
            actions.append(idx)
    st = np.stack(states, axis=1) if record else x[:, None]
    act = np.stack(actions, axis=1) if record_actions and actions else None
    rp = np.stack(running_path, axis=1) if record else None
    return Trajectory(grid, start, stop, st, running, act, noise.worlds, rp)


def terminal_cost(model: ModelSpec, noise: WorldNoise, x: np.ndarray, coefficients=None) -> np.ndarray:
    coeffs = coefficients or _Coefficients(model)
    feats = model.w0_features(noise.W0, model.anchor_indices(noise.grid), noise.grid.n_steps)
    return coeffs.g(x, feats)


# --- single-world entry points ---------------------------------------------------------

def _as_world_noise(noise) -> WorldNoise:
    if isinstance(noise, WorldNoise):
        return noise
    if isinstance(noise, NoiseBundle):
        return WorldNoise.from_bundles([noise])
    raise ConfigurationError("noise must be a NoiseBundle or WorldNoise")


def simulate_mkv(model: ModelSpec, t0: float, init, policy, noise) -> tuple[Trajectory, ConditionalLawPath]:
    """Particle approximation of the controlled dynamics on the given noise.

    One idiosyncratic path per particle; the number of particles is the number of
    idiosyncratic paths in the noise.
    """
    wn = _as_world_noise(noise)
    if abs(wn.grid.t0 - t0) > 1e-12:
        raise PreconditionError("noise grid must start at t0")
    x0 = initial_cloud(init, wn.n_paths, wn.n_worlds, wn.seed, wn.worlds[0] if wn.worlds else 0)
    traj = run_particles(model, wn, x0, policy)
    return traj, traj.law_path(0)


@dataclass
class NPlayerTrajectory:
    trajectory: Trajectory
    eps0: float
    eps1: float
    n: int
    m: float | None

    @property
    def paths(self) -> np.ndarray:
        """(W, steps + 1, n, d) player states."""
        return self.trajectory.states


class NPlayerSystem:
    """The regularised n-player system with mollified coefficients at scale ``m`` (None: off)."""

    def __init__(self, model: ModelSpec, n: int, m: float | None, eps0: float = 0.0, eps1: float = 0.0,
                 n_nodes: int = 4096, seed: int = 0):
        if n < 1:
            raise ConfigurationError("n must be >= 1")
        if eps0 < 0 or eps1 < 0:
            raise ConfigurationError("regularisation scales must be nonnegative")
        self.model, self.n, self.m, self.eps0, self.eps1 = model, n, m, eps0, eps1
        self.coefficients = MollifiedCoefficients(model, n, m, n_nodes, seed)

    def run(self, noise: WorldNoise, x0, policy, start=0, stop=None, record=False) -> Trajectory:
        return run_particles(self.model, noise, x0, policy, start, stop, self.coefficients,
                             self.eps0, self.eps1, record=record)

    def costs(self, noise: WorldNoise, x0, policy, start=0) -> np.ndarray:
        """Per-player total cost (W, n)."""
        tr = self.run(noise, x0, policy, start)
        return tr.running + terminal_cost(self.model, noise, tr.final, self.coefficients)


class _PerPlayer:
    def __init__(self, policies):
        self.policies = list(policies)

    def act(self, k, t, x, w0):
        cols = [np.asarray(p.act(k, t, x, w0)) for p in self.policies]
        cols = [np.broadcast_to(c, x.shape[:2])[:, i] for i, c in enumerate(cols)]
        return np.stack(cols, axis=1)


def simulate_nplayer(model, n, m, eps0, eps1, t0, init, policies, noise, n_nodes=4096, seed=0) -> NPlayerTrajectory:
    wn = _as_world_noise(noise)
    if abs(wn.grid.t0 - t0) > 1e-12:
        raise PreconditionError("noise grid must start at t0")
    if wn.n_paths < n:
        raise PreconditionError("noise must carry one idiosyncratic path per player")
    if (eps0 or eps1) and wn.dB is None:
        raise PreconditionError("noise must carry regularisation paths")
    policy = _PerPlayer(policies) if isinstance(policies, (list, tuple)) else policies
    x0 = initial_cloud(init, n, wn.n_worlds, wn.seed, wn.worlds[0] if wn.worlds else 0)
    system = NPlayerSystem(model, n, m, eps0, eps1, n_nodes, seed)
    return NPlayerTrajectory(system.run(wn, x0, policy, record=True), eps0, eps1, n, m)


# --- structural checks -------------------------------------------------------------------

def check_flow_property(model, t0, t1, init, policy, noise: WorldNoise, perturb: bool = False) -> float:
    """Max |direct run - run restarted at t1 from the t1 state| over particles and steps.

    ``perturb`` changes one idiosyncratic increment after t1 in the restarted run
    (a negative control that must give a positive gap).
    """
    wn = _as_world_noise(noise)
    if not t0 < t1:
        raise PreconditionError("need t0 < t1")
    k1 = wn.grid.index_of(t1)
    x0 = initial_cloud(init, wn.n_paths, wn.n_worlds, wn.seed)
    direct = run_particles(model, wn, x0, policy)
    second = wn
    if perturb:
        dW = wn.dW.copy()
        dW[0, 0, min(k1, wn.grid.n_steps - 1)] += 0.1
        second = WorldNoise(wn.grid, wn.W0, wn.dW0, dW, wn.dB0, wn.dB, wn.seed, wn.worlds)
    restart = run_particles(model, second, direct.states[:, k1], policy, start=k1)
    return float(np.max(np.abs(direct.states[:, k1:] - restart.states)))


@dataclass(frozen=True)
class MomentReport:
    p: int
    C_max: float
    C_increment: float
    slope: float
    per_world_max: np.ndarray
    lags: np.ndarray
    increment_moments: np.ndarray

    @property
    def C(self) -> float:
        return max(self.C_max, self.C_increment)


def moment_bounds(model, init, policy, n_worlds: int = 32, p: int = 2, n_particles: int = 512,
                  grid: TimeGrid | None = None, seed: int = 0) -> MomentReport:
    """Smallest constants in E max|X|^p <= C(1 + E|xi|^p) and E|X_s - X_t|^p <= C(1 + E|xi|^p)(s - t)^{p/2}.

    The expectations condition on the common noise up to the start time only, so
    the future common noise is averaged over worlds (the initial law is the same in
    every world). Per-world ratios are kept for inspection. The increment slope is
    fitted on log-log over lags from the initial time.
    """
    if p not in (2, 4):
        raise PreconditionError("p must be 2 or 4")
    grid = grid or TimeGrid(0.0, model.horizon, 64)
    wn = sample_worlds(grid, n_worlds, n_particles, model.m, seed)
    x0 = initial_cloud(init, n_particles, n_worlds, seed)
    tr = run_particles(model, wn, x0, policy)
    norms = np.linalg.norm(tr.states, axis=-1)  # (W, K+1, n)
    base = 1.0 + np.mean(np.linalg.norm(x0, axis=-1) ** p)
    max_moment = np.mean(np.max(norms, axis=1) ** p, axis=1)  # (W,)
    inc = np.linalg.norm(tr.states[:, 1:] - tr.states[:, :1], axis=-1) ** p  # (W, K, n)
    lags = grid.times[1:] - grid.t0
    pooled = inc.mean(axis=(0, 2))
    C_inc = float(np.max(pooled / (base * lags ** (p / 2))))
    ok = pooled > 0
    slope = float(np.polyfit(np.log(lags[ok]), np.log(pooled[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return MomentReport(p, float(max_moment.mean() / base), C_inc, slope, max_moment / base, lags, pooled)
