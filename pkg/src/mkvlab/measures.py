"""Uniform-weight empirical measures on R^d and the Wasserstein-2 distance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import ModelError, PreconditionError
from .noise_paths import read_array, stream_rng, write_array

EXACT_CAP = 512
TIE_BREAK_CAP = 64


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Point cloud with weights 1/n; ``points`` has shape (n, d)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise PreconditionError(f"points must be a non-empty (n, d) array, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise PreconditionError("atoms must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def moment(self, p: float = 2.0) -> float:
        """(1/n) sum |x_i|^p."""
        return float(np.mean(np.linalg.norm(self.points, axis=1) ** p))

    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.points ** 2, axis=1)))

    def translate(self, c) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points + np.asarray(c, dtype=float))

    def sorted(self) -> "EmpiricalMeasure":
        """Same measure with atoms in lexicographic order (canonical representative)."""
        order = np.lexsort(self.points.T[::-1])
        return EmpiricalMeasure(self.points[order])

    def to_csv(self, file=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.d)])
        for row in self.points:
            w.writerow([f"{v:.17g}" for v in row])
        text = buf.getvalue()
        if file is not None:
            Path(file).write_text(text)
        return text

    @classmethod
    def from_csv(cls, file) -> "EmpiricalMeasure":
        with open(file, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]))

    def dump(self, file, seed: int = 0) -> None:
        write_array(self.points, file, seed)

    @classmethod
    def load(cls, file) -> "EmpiricalMeasure":
        return cls(read_array(file)[0])


@dataclass(frozen=True)
class TransportPlan:
    source: EmpiricalMeasure
    target: EmpiricalMeasure
    coupling: np.ndarray

    def cost(self) -> float:
        return float(np.sum(self.coupling * sq_dists(self.source.points, self.target.points)))


def sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # direct differences keep the diagonal of identical clouds at exactly 0
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _check_dims(mu, nu):
    if mu.d != nu.d:
        raise PreconditionError(f"dimension mismatch: {mu.d} vs {nu.d}")


def optimal_assignment(mu: EmpiricalMeasure, nu: EmpiricalMeasure, lexicographic: bool = True):
    """Optimal permutation ``perm`` (atom i of mu goes to atom perm[i] of nu) and its mean cost.

    With ``lexicographic`` and n <= 64, the lexicographically smallest optimal
    permutation is returned; larger problems keep the solver's choice.
    """
    _check_dims(mu, nu)
    if mu.n != nu.n:
        raise PreconditionError(f"exact transport needs equal atom counts, got {mu.n} and {nu.n}")
    C = sq_dists(mu.points, nu.points)
    rows, perm = linear_sum_assignment(C)
    best = C[rows, perm].sum()
    if lexicographic and mu.n <= TIE_BREAK_CAP and mu.n > 1:
        perm = _lexicographic_optimum(C, best)
    # summed in sorted order so the value does not depend on atom labelling (exact symmetry)
    return perm, float(np.sort(C[np.arange(mu.n), perm]).sum() / mu.n)


def _lexicographic_optimum(C, best):
    n = C.shape[0]
    tol = 1e-12 * max(1.0, abs(best))
    big = C.max() * n + 1.0
    fixed = {}
    used = set()
    for i in range(n):
        for j in range(n):
            if j in used:
                continue
            D = C.copy()
            for ii, jj in list(fixed.items()) + [(i, j)]:
                D[ii, :] = big
                D[:, jj] = big
                D[ii, jj] = C[ii, jj]
            r, c = linear_sum_assignment(D)
            if D[r, c].sum() <= best + tol:
                fixed[i] = j
                used.add(j)
                break
    return np.array([fixed[i] for i in range(n)])


def w2_sorted_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """1-d oracle: monotone rearrangement of equal-size clouds."""
    _check_dims(mu, nu)
    if mu.d != 1 or mu.n != nu.n:
        raise PreconditionError("sorting oracle needs d = 1 and equal atom counts")
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_quantile_1d(x, y) -> float:
    """1-d W2 between uniform clouds of possibly different sizes (quantile coupling)."""
    a = np.sort(np.asarray(x, dtype=float).ravel())
    b = np.sort(np.asarray(y, dtype=float).ravel())
    grid = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mids = 0.5 * (grid[1:] + grid[:-1])
    w = np.diff(grid)
    qa = a[np.minimum((mids * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mids * b.size).astype(int), b.size - 1)]
    return float(np.sqrt(np.sum(w * (qa - qb) ** 2)))


@dataclass(frozen=True)
class EntropicResult:
    value: float  # W2 of the rounded feasible plan, an upper bound
    lower: float  # W2 lower bound from the c-transformed dual
    gap: float  # primal minus dual, in squared units
    plan: np.ndarray


def entropic_w2(mu, nu, reg=None, n_iter=500, reg_schedule=True) -> EntropicResult:
    """Log-domain Sinkhorn with decreasing regularisation, rounded to a feasible plan.

    ``reg`` defaults to 1e-2 times the mean squared distance. The returned value is
    the cost of an exactly feasible coupling, hence never below the true W2; the
    dual lower bound gives the certified gap.
    """
    _check_dims(mu, nu)
    C = sq_dists(mu.points, nu.points)
    n, m = C.shape
    scale = float(C.mean()) or 1.0
    reg = 1e-2 * scale if reg is None else float(reg)
    if reg <= 0:
        raise PreconditionError("reg must be positive")
    loga = np.full(n, -np.log(n))
    logb = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    regs = [reg]
    if reg_schedule:
        r = scale
        regs = []
        while r > reg:
            regs.append(r)
            r /= 4.0
        regs.append(reg)
    per = max(1, n_iter // len(regs))
    for k, eps in enumerate(regs):
        iters = per if k < len(regs) - 1 else max(per, n_iter - per * (len(regs) - 1))
        for _ in range(iters):
            f = -eps * logsumexp((g[None, :] - C) / eps + logb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - C) / eps + loga[:, None], axis=0)
    eps = regs[-1]
    P = np.exp((f[:, None] + g[None, :] - C) / eps + loga[:, None] + logb[None, :])
    P = _round_to_feasible(P, np.exp(loga), np.exp(logb))
    primal = float(np.sum(P * C))
    # c-transform of the final row potential gives a feasible dual pair
    fd = f
    gd = np.min(C - fd[:, None], axis=0)
    fd = np.min(C - gd[None, :], axis=1)
    dual = float(fd.mean() + gd.mean())
    return EntropicResult(float(np.sqrt(max(primal, 0.0))), float(np.sqrt(max(dual, 0.0))), primal - dual, P)


def _round_to_feasible(P, a, b):
    # Altschuler, Weed and Rigollet style rounding onto the transport polytope
    x = np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)
    P = P * x[:, None]
    y = np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)
    P = P * y[None, :]
    ea = a - P.sum(axis=1)
    eb = b - P.sum(axis=0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "exact", reg=None,
                 exact_cap: int = EXACT_CAP) -> float:
    """W2 distance between uniform clouds.

    ``method="exact"`` solves the assignment problem (equal n up to ``exact_cap``);
    ``method="entropic"`` returns the rounded Sinkhorn upper bound.
    """
    _check_dims(mu, nu)
    if method == "exact":
        if mu.n != nu.n:
            raise PreconditionError(f"exact transport needs equal atom counts, got {mu.n} and {nu.n}")
        if mu.n > exact_cap:
            raise PreconditionError(f"exact transport capped at {exact_cap} atoms; use method='entropic'")
        _, cost = optimal_assignment(mu, nu, lexicographic=False)
        return float(np.sqrt(max(cost, 0.0)))
    if method == "entropic":
        return entropic_w2(mu, nu, reg=reg).value
    raise PreconditionError(f"unknown method {method!r}")


def _as_measure(mu):
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def pair(mu: EmpiricalMeasure, phi) -> np.ndarray | float:
    """mu(phi) = (1/n) sum phi(x_i); ``phi`` maps an (n, d) array to (n,) or (n, k)."""
    mu = _as_measure(mu)
    vals = np.asarray(phi(mu.points), dtype=float)
    if vals.shape[:1] != (mu.n,):
        vals = np.broadcast_to(vals, (mu.n,) + vals.shape[1:] if vals.ndim else (mu.n,))
    if not np.all(np.isfinite(vals)):
        raise ModelError("test function returned non-finite values")
    out = vals.mean(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def pair2(mu: EmpiricalMeasure, psi) -> float:
    """mu x mu (psi) over all ordered atom pairs, diagonal included.

    ``psi(x, y)`` receives broadcastable arrays of shape (n, 1, d) and (1, n, d).
    """
    mu = _as_measure(mu)
    x = mu.points
    vals = np.asarray(psi(x[:, None, :], x[None, :, :]), dtype=float)
    vals = np.broadcast_to(vals, (mu.n, mu.n) + vals.shape[2:])
    if not np.all(np.isfinite(vals)):
        raise ModelError("test function returned non-finite values")
    return float(vals.mean())


def tile_indices(n_atoms: int, n_out: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Atom indices for an output cloud: systematic tiling when n_out is a multiple of n_atoms."""
    if n_out % n_atoms == 0:
        return np.tile(np.arange(n_atoms), n_out // n_atoms)
    if rng is None:
        raise PreconditionError("non-multiple output size needs a generator for resampling")
    return rng.integers(0, n_atoms, size=n_out)


def convolve_gaussian(mu: EmpiricalMeasure, mean, var: float, n_out: int, seed: int) -> EmpiricalMeasure:
    """Sample of mu * N(mean, var I) with n_out atoms."""
    if var < 0:
        raise PreconditionError("var must be nonnegative")
    mu = _as_measure(mu)
    rng = stream_rng(seed, 0, 7)
    idx = tile_indices(mu.n, n_out, rng)
    out = mu.points[idx] + np.asarray(mean, dtype=float).reshape(1, -1)
    if var > 0:
        out = out + np.sqrt(var) * rng.standard_normal((n_out, mu.d))
    return EmpiricalMeasure(out)
