"""Diagnostics for the set of conditional laws reachable with drift and diffusion bounded by L."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import ParticleEnsemble, initial_cloud
from ..errors import PreconditionError
from ..measures import EmpiricalMeasure, optimal_assignment
from ..noise_paths import TimeGrid, sample_worlds, stream_rng

DEFAULT_RADII = (1.0, 2.0, 4.0, 8.0)
DEFAULT_NET_EPS = (0.2, 0.1, 0.05)


@dataclass
class PLElement:
    """One reachable process: terminal states per world plus the coefficients that drove it.

    Drift on piece j is ``L * clip(slope[j] * x + shift[j], -1, 1)``; the idiosyncratic
    volatility on piece j is ``vol[j]`` in [0, L].
    """

    states: np.ndarray  # (W, n, d)
    slope: np.ndarray
    shift: np.ndarray
    vol: np.ndarray
    time_index: int

    def ensembles(self) -> list:
        return [ParticleEnsemble(self.states[w], self.time_index, w) for w in range(self.states.shape[0])]

    def moment(self, p: float) -> float:
        return float(np.mean(np.linalg.norm(self.states, axis=-1) ** p))

    def tail(self, p: float, R: float) -> float:
        r = np.linalg.norm(self.states, axis=-1)
        return float(np.mean(np.where(r > R, r ** p, 0.0)))


@dataclass
class PLSample:
    elements: list
    L: float
    p: float
    initial_moment: float
    C_fit: float
    radii: tuple
    tails: np.ndarray  # (n_samples, len(radii))

    @property
    def sup_tail(self) -> np.ndarray:
        return self.tails.max(axis=0)

    @property
    def tails_decreasing(self) -> bool:
        """Each element's tail is non-increasing in R and the largest radius is strictly below the smallest, unless both vanish."""
        t = self.tails
        mono = np.all(np.diff(t, axis=1) <= 0.0)
        strict = np.all((t[:, -1] < t[:, 0]) | (t[:, 0] == 0.0))
        return bool(mono and strict)


def sample_PL(L: float, t0: float, rho0, tau: float, n_samples: int, seed: int = 0, sigma0: float = 0.3,
              n_worlds: int = 8, n_particles: int = 256, n_steps: int = 32, n_pieces: int = 4, p: float = 2.0,
              radii=DEFAULT_RADII) -> PLSample:
    """Draws ``n_samples`` processes X = xi + int b + int sigma0 dW0 + int sigma dW on [t0, tau].

    All samples share the same worlds and initial clouds, so differences between
    them come from the coefficients alone.
    """
    if L < 0:
        raise PreconditionError("L must be nonnegative")
    if tau <= t0:
        raise PreconditionError("tau must exceed t0")
    if n_steps % n_pieces:
        raise PreconditionError("n_pieces must divide n_steps")
    rho0 = rho0 if isinstance(rho0, EmpiricalMeasure) else EmpiricalMeasure(rho0)
    d = rho0.d
    grid = TimeGrid(t0, tau, n_steps)
    noise = sample_worlds(grid, n_worlds, n_particles, d, seed)
    x0 = initial_cloud(rho0, n_particles, n_worlds, seed)
    rng = stream_rng(seed, 0, 31)
    per_piece = n_steps // n_pieces
    sig0 = np.eye(d) * sigma0
    common = noise.dW0 @ sig0.T  # (W, K, d)
    elements = []
    for _ in range(n_samples):
        slope = rng.uniform(-2.0, 2.0, n_pieces)
        shift = rng.uniform(-1.0, 1.0, n_pieces)
        vol = rng.uniform(0.0, L, n_pieces)
        x = x0.copy()
        for k in range(n_steps):
            j = k // per_piece
            drift = L * np.clip(slope[j] * x + shift[j], -1.0, 1.0)
            x = x + drift * grid.dt + vol[j] * noise.dW[:, :n_particles, k] + common[:, k][:, None, :]
        elements.append(PLElement(x, slope, shift, vol, n_steps))
    init_moment = float(np.mean(np.linalg.norm(x0, axis=-1) ** p))
    moments = np.array([e.moment(p) for e in elements])
    C_fit = float(np.max(moments) / (init_moment + L ** p)) if init_moment + L ** p > 0 else 0.0
    tails = np.array([[e.tail(p, R) for R in radii] for e in elements])
    return PLSample(elements, L, p, init_moment, C_fit, tuple(radii), tails)


# --- covering ------------------------------------------------------------------------------

def _world_w2(x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[1] == 1:
        return float(np.sqrt(np.mean((np.sort(x[:, 0]) - np.sort(y[:, 0])) ** 2)))
    _, cost = optimal_assignment(EmpiricalMeasure(x), EmpiricalMeasure(y), lexicographic=False)
    return float(np.sqrt(cost))


def dp_matrix(elements) -> np.ndarray:
    """d_P(i, j) = mean over worlds of min(W2 of the two conditional laws, 1)."""
    states = [e.states if isinstance(e, PLElement) else np.asarray(e) for e in elements]
    n = len(states)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            w = [min(_world_w2(a, b), 1.0) for a, b in zip(states[i], states[j])]
            D[i, j] = D[j, i] = float(np.mean(w))
    return D


def greedy_net(D: np.ndarray, eps: float) -> list:
    """Centres chosen in index order; each uncovered point becomes a centre."""
    centres = []
    covered = np.zeros(D.shape[0], bool)
    for i in range(D.shape[0]):
        if covered[i]:
            continue
        centres.append(i)
        covered |= D[i] <= eps
    return centres


def metric_defects(D: np.ndarray) -> dict:
    """Largest violations of symmetry, zero diagonal, nonnegativity and the triangle inequality."""
    tri = D[:, None, :] - (D[:, :, None] + D[None, :, :])  # d(i,k) - d(i,j) - d(j,k), indexed [i, j, k]
    return {
        "symmetry": float(np.max(np.abs(D - D.T))),
        "diagonal": float(np.max(np.abs(np.diag(D)))),
        "negativity": float(max(0.0, -D.min())),
        "triangle": float(max(0.0, tri.max())),
    }


@dataclass
class CoveringReport:
    distances: np.ndarray
    eps: tuple
    net_sizes: list
    defects: dict
    poly_residual: float
    exp_residual: float

    @property
    def sub_exponential(self) -> bool:
        """Net growth in 1/eps fits a power law at least as well as an exponential."""
        return self.poly_residual <= self.exp_residual

    def axioms_hold(self, tol: float = 1e-9) -> bool:
        return all(v <= tol for v in self.defects.values())


def _fit_residual(x: np.ndarray, y: np.ndarray) -> float:
    if np.ptp(x) == 0:
        return 0.0
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(np.sum((A @ coef - y) ** 2))


def compactness_probe(sample, eps_list=DEFAULT_NET_EPS) -> CoveringReport:
    elements = sample.elements if isinstance(sample, PLSample) else list(sample)
    if len(elements) < 32:
        raise PreconditionError("compactness probe needs at least 32 samples")
    D = dp_matrix(elements)
    sizes = [len(greedy_net(D, e)) for e in eps_list]
    inv = 1.0 / np.asarray(eps_list, float)
    logs = np.log(np.asarray(sizes, float))
    return CoveringReport(D, tuple(eps_list), sizes, metric_defects(D),
                          _fit_residual(np.log(inv), logs), _fit_residual(inv, logs))
