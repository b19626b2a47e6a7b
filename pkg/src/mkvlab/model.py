"""Coefficient sets, the model zoo, assumption probes and the mollified n-player coefficients.

Coefficient conventions (all vectorised over arbitrary leading batch axes):

* ``b(t, x, atoms, a, w0) -> (..., k, d)`` with ``x`` of shape (..., k, d) the query
  points, ``atoms`` of shape (..., n, d) the cloud standing in for the measure,
  ``a`` of shape (..., k, dim_a) and ``w0`` of shape (..., N, m) the common noise read
  at the anchor times;
* ``f(t, x, atoms, a, w0) -> (..., k)``;
* ``g(x, atoms, w0) -> (..., k)``;
* ``sigma(t)`` and ``sigma0(t)`` return constant (d, m) matrices, i.e. diffusions do
  not depend on state, measure or control.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, ModelError, PreconditionError, UnsupportedStructure
from .measures import EmpiricalMeasure, sq_dists, wasserstein2
from .noise_paths import TimeGrid, sample_worlds, stream_rng


# --- control sets ------------------------------------------------------------------

@dataclass(frozen=True)
class ControlSet:
    """Compact control set: a box ``[low, high]`` searched on a grid, or a finite set."""

    atoms: np.ndarray  # (n_atoms, dim_a) search grid, in search order
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.size == 0:
            raise ConfigurationError("control grid must be nonempty")
        object.__setattr__(self, "atoms", a)
        if self.low is not None:
            lo, hi = np.atleast_1d(np.asarray(self.low, float)), np.atleast_1d(np.asarray(self.high, float))
            if np.any(lo > hi) or np.any(a < lo - 1e-12) or np.any(a > hi + 1e-12):
                raise ConfigurationError("grid atoms must lie inside the control box")
            object.__setattr__(self, "low", lo)
            object.__setattr__(self, "high", hi)

    @classmethod
    def box(cls, low, high, n_points: int = 3) -> "ControlSet":
        lo, hi = np.atleast_1d(np.asarray(low, float)), np.atleast_1d(np.asarray(high, float))
        axes = [np.linspace(l, h, n_points) for l, h in zip(lo, hi)]
        atoms = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        return cls(atoms, lo, hi)

    @classmethod
    def finite(cls, atoms) -> "ControlSet":
        return cls(np.asarray(atoms, float))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def mesh(self) -> float:
        """Largest distance from a point of the box to the grid (0 for finite sets)."""
        if self.low is None:
            return 0.0
        n = round(self.size ** (1.0 / self.dim))
        if n < 2:
            return float(np.linalg.norm(self.high - self.low))
        return float(np.linalg.norm((self.high - self.low) / (n - 1)) / 2)

    def refine(self, n_points: int) -> "ControlSet":
        if self.low is None:
            return self
        return ControlSet.box(self.low, self.high, n_points)

    def contains(self, a) -> bool:
        a = np.atleast_2d(a)
        if self.low is None:
            return bool(np.all(np.min(sq_dists(a, self.atoms), axis=1) == 0))
        return bool(np.all((a >= self.low - 1e-12) & (a <= self.high + 1e-12)))


# --- model spec --------------------------------------------------------------------

def _const_matrix(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    return lambda t: mat


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    m: int
    control: ControlSet
    K: float
    b: object
    f: object
    g: object
    sigma: object
    sigma0: object
    anchor_times: tuple = ()
    horizon: float = 1.0
    # coefficients that ignore state and measure; mollification leaves them unchanged
    state_free: frozenset = frozenset()
    # path-dependent originals approximated by the anchor-time coefficients, if any
    g_full: object = None
    f_full: object = None
    b_full: object = None
    # "additive": sigma and sigma0 depend on time only; anything else is out of scope for the calculus checks
    diffusion_structure: str = "additive"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ConfigurationError("d and m must be positive")
        if self.K < 0:
            raise ConfigurationError("K must be nonnegative")
        if list(self.anchor_times) != sorted(self.anchor_times):
            raise ConfigurationError("anchor times must be increasing")

    def anchor_indices(self, grid: TimeGrid) -> np.ndarray:
        return np.array([grid.index_of(t) for t in self.anchor_times], dtype=int)

    def w0_features(self, W0: np.ndarray, anchor_idx: np.ndarray, k: int) -> np.ndarray:
        """W0 read at the anchors, frozen at the current step ``k`` for anchors not yet reached."""
        return W0[..., np.minimum(anchor_idx, k), :]

    def diffusions(self, t):
        return np.asarray(self.sigma(t), float), np.asarray(self.sigma0(t), float)

    def with_params(self, **kw) -> "ModelSpec":
        return ZOO[self.params.get("factory", self.name)](**{**self.params.get("kwargs", {}), **kw})


def _checked(name, vals):
    vals = np.asarray(vals, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ModelError(f"coefficient {name} returned non-finite values")
    return vals


def _mean_clip(atoms):
    return np.clip(atoms[..., 0].mean(axis=-1, keepdims=True), -1.0, 1.0)


def trivial_model(c: float = 0.0, running: float = 0.0, d: int = 1, sigma: float = 0.0, sigma0: float = 0.0,
                  drift: float = 0.0, horizon: float = 1.0) -> ModelSpec:
    """Uncontrolled model with constant drift, constant running cost and constant terminal cost."""
    eye = np.eye(d)
    return ModelSpec(
        name="trivial", d=d, m=d, control=ControlSet.finite([[0.0]]),
        K=max(abs(c), abs(running), abs(drift) * math.sqrt(d)),
        b=lambda t, x, atoms, a, w0: np.full(np.shape(x), float(drift)),
        f=lambda t, x, atoms, a, w0: np.full(np.shape(x)[:-1], float(running)),
        g=lambda x, atoms, w0: np.full(np.shape(x)[:-1], float(c)),
        sigma=_const_matrix(sigma * eye), sigma0=_const_matrix(sigma0 * eye),
        horizon=horizon, state_free=frozenset({"b", "f", "g"}),
        params={"factory": "trivial", "kwargs": dict(c=c, running=running, d=d, sigma=sigma, sigma0=sigma0,
                                                      drift=drift, horizon=horizon)},
    )


def bang_bang(sigma: float = 0.2, sigma0: float = 0.3, n_controls: int = 3, horizon: float = 1.0,
              singleton: bool = False) -> ModelSpec:
    """d = m = 1, b = a on [-1, 1], f = a^2/2, g = clip(x) clip(mean)."""
    control = ControlSet.finite([[0.0]]) if singleton else ControlSet.box(-1.0, 1.0, n_controls)
    return ModelSpec(
        name="bang_bang", d=1, m=1, control=control, K=1.0,
        b=lambda t, x, atoms, a, w0: np.broadcast_to(a, np.shape(x)).copy(),
        f=lambda t, x, atoms, a, w0: 0.5 * np.sum(np.broadcast_to(a, np.shape(x)[:-1] + a.shape[-1:]) ** 2, axis=-1),
        g=lambda x, atoms, w0: np.clip(x[..., 0], -1.0, 1.0) * _mean_clip(atoms),
        sigma=_const_matrix([[sigma]]), sigma0=_const_matrix([[sigma0]]),
        horizon=horizon, state_free=frozenset({"b", "f"}),
        params={"factory": "bang_bang", "kwargs": dict(sigma=sigma, sigma0=sigma0, n_controls=n_controls,
                                                        horizon=horizon, singleton=singleton)},
    )


def common_noise_anchored(sigma: float = 0.2, sigma0: float = 0.3, n_controls: int = 3, horizon: float = 1.0,
                          anchor: float | None = None) -> ModelSpec:
    """BangBang with the terminal cost multiplied by tanh of W0 at one anchor time."""
    base = bang_bang(sigma, sigma0, n_controls, horizon)
    t1 = horizon / 2 if anchor is None else anchor
    return ModelSpec(
        name="common_noise_anchored", d=1, m=1, control=base.control, K=1.0, b=base.b, f=base.f,
        g=lambda x, atoms, w0: base.g(x, atoms, w0) * np.tanh(w0[..., 0:1, 0]),
        sigma=base.sigma, sigma0=base.sigma0, anchor_times=(t1,), horizon=horizon,
        state_free=base.state_free,
        params={"factory": "common_noise_anchored", "kwargs": dict(sigma=sigma, sigma0=sigma0, n_controls=n_controls,
                                                                    horizon=horizon, anchor=t1)},
    )


def pure_diffusion(sigma: float = 1.0, sigma0: float = 0.0, d: int = 1, horizon: float = 1.0) -> ModelSpec:
    """Singleton control, zero drift and costs: X = xi + sigma W + sigma0 W0."""
    model = trivial_model(0.0, 0.0, d, sigma, sigma0, 0.0, horizon)
    return replace(model, name="pure_diffusion",
                   params={"factory": "pure_diffusion", "kwargs": dict(sigma=sigma, sigma0=sigma0, d=d, horizon=horizon)})


def integral_functional(n_anchors: int, horizon: float = 1.0) -> ModelSpec:
    """g = integral of W0 over [0, T], approximated by a right Riemann sum on ``n_anchors`` points.

    Unbounded in W0, so it serves only the path-dependence residual checks.
    """
    anchors = tuple(horizon * (k + 1) / n_anchors for k in range(n_anchors))

    def g(x, atoms, w0):
        return np.broadcast_to((horizon / n_anchors) * w0[..., :, 0].sum(axis=-1)[..., None], np.shape(x)[:-1])

    def g_full(x, atoms, w0_path, times):
        vals = integrate.trapezoid(w0_path[..., 0], times, axis=-1)
        return np.broadcast_to(vals[..., None], np.shape(x)[:-1])

    model = trivial_model(horizon=horizon)
    return replace(model, name="integral_functional", g=g, g_full=g_full, anchor_times=anchors,
                   params={"factory": "integral_functional", "kwargs": dict(n_anchors=n_anchors, horizon=horizon)})


def custom_drift(drift, K: float = 1.0, d: int = 1, name: str = "custom_drift") -> ModelSpec:
    """Uncontrolled model with drift ``drift(x)``; used to probe declared constants."""
    model = trivial_model(d=d)
    return replace(model, name=name, K=K, b=lambda t, x, atoms, a, w0: np.asarray(drift(x), float) + 0.0 * x,
                   state_free=frozenset({"f", "g"}), params={})


ZOO = {
    "trivial": trivial_model,
    "bang_bang": bang_bang,
    "common_noise_anchored": common_noise_anchored,
    "pure_diffusion": pure_diffusion,
    "integral_functional": integral_functional,
}


def zoo(name: str, **params) -> ModelSpec:
    try:
        factory = ZOO[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for model {name!r}: {exc}") from None


# --- assumption probes -------------------------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    K_hat_lip: float
    K_hat_bound: float
    per_coefficient: dict
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def probe_assumptions(model: ModelSpec, n_probe: int = 256, radius: float = 2.0, seed: int = 0,
                      n_atoms: int = 8, step: float = 0.25) -> ProbeReport:
    """Empirical bound and Lipschitz constants of b, f, g on random local pairs.

    Every random quantity comes from its own stream drawn with leading axis
    ``n_probe``, so a larger probe set contains the smaller one and the estimates
    can only grow. A third of the pairs move only the state, a third only the
    measure, the rest both.
    """
    if n_probe < 2:
        raise PreconditionError("n_probe must be >= 2")
    d, mdim = model.d, model.m
    N = len(model.anchor_times)
    draw = lambda k, shape: stream_rng(seed, 900 + k, 0).standard_normal((n_probe,) + shape)
    unif = lambda k, shape: stream_rng(seed, 900 + k, 0).random((n_probe,) + shape)
    t = model.horizon * unif(0, ())
    x = radius * np.tanh(draw(1, (1, d)))
    centre = radius * np.tanh(draw(2, (1, d)))
    atoms = centre + 0.5 * draw(3, (n_atoms, d))
    a_idx = (unif(4, ()) * model.control.size).astype(int)
    a = model.control.atoms[a_idx][:, None, :]
    w0 = np.sqrt(model.horizon) * draw(5, (N, mdim))
    kind = np.arange(n_probe) % 3
    dx = step * draw(6, (1, d)) * (kind != 1)[:, None, None]
    datoms = step * draw(7, (n_atoms, d)) * (kind != 0)[:, None, None]
    x2, atoms2 = x + dx, atoms + datoms
    w2 = np.array([wasserstein2(EmpiricalMeasure(p), EmpiricalMeasure(q)) for p, q in zip(atoms, atoms2)])
    denom = np.linalg.norm(dx[:, 0], axis=-1) + w2
    out = {}
    for name in ("b", "f", "g"):
        fn = getattr(model, name)
        if name == "g":
            h1, h2 = fn(x, atoms, w0), fn(x2, atoms2, w0)
        else:
            tt = t[:, None, None] if name == "b" else t[:, None]
            h1 = fn(tt, x, atoms, a, w0)
            h2 = fn(tt, x2, atoms2, a, w0)
        h1, h2 = _checked(name, h1), _checked(name, h2)
        diff = np.abs(h1 - h2).reshape(n_probe, -1)
        diff = np.linalg.norm(diff, axis=1) if name == "b" else diff.max(axis=1)
        size = np.abs(h1).reshape(n_probe, -1)
        size = np.linalg.norm(size, axis=1) if name == "b" else size.max(axis=1)
        q = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
        out[name] = {"lip": float(q.max()), "bound": float(size.max())}
    k_lip = max(v["lip"] for v in out.values())
    k_bound = max(v["bound"] for v in out.values())
    tol = 1e-12 * max(1.0, model.K)
    return ProbeReport(k_lip, k_bound, out, bool(k_lip <= model.K + tol and k_bound <= model.K + tol))


# --- mollifier ---------------------------------------------------------------------

def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def _bump(r):
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Normalised bump kernel exp(-1/(1-|y|^2)) on the unit ball of R^d, rescaled by ``m``.

    Quadrature nodes are fixed per ``(seed, m, n)``: radii at the midpoint quantiles of
    the radial law (shuffled per player), directions uniform, and every node paired
    with its reflection.
    """

    d: int = 1
    m: float | None = 8.0
    n_nodes: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.m is not None and self.m < 1:
            raise PreconditionError("mollifier scale m must be >= 1")
        if self.n_nodes < 2 or self.n_nodes % 2:
            raise ConfigurationError("n_nodes must be a positive even number")

    def _radial(self, power: float) -> float:
        val, _ = integrate.quad(lambda r: r ** (self.d - 1 + power) * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0,
                                epsabs=1e-15, epsrel=1e-13, limit=200)
        return _sphere_area(self.d) * val

    @cached_property
    def normaliser(self) -> float:
        return self._radial(0.0)

    def density(self, y) -> np.ndarray:
        y = np.asarray(y, float).reshape(-1, self.d)
        return _bump(np.linalg.norm(y, axis=1)) / self.normaliser

    @cached_property
    def first_abs_moment(self) -> float:
        """Integral of |y| Phi(y) dy for the unscaled kernel."""
        return self._radial(1.0) / self.normaliser

    @cached_property
    def second_moment(self) -> float:
        return self._radial(2.0) / self.normaliser

    @cached_property
    def _radial_inverse_cdf(self):
        r = np.linspace(0.0, 1.0, 20001)
        dens = r ** (self.d - 1) * _bump(r)
        cdf = integrate.cumulative_simpson(dens, x=r, initial=0.0)
        cdf = np.maximum.accumulate(cdf / cdf[-1])
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        return cdf[keep], r[keep]

    def unit_nodes(self, n: int) -> np.ndarray:
        """Nodes of shape (n_nodes, n, d) for the unscaled kernel, one column per player."""
        half = self.n_nodes // 2
        rng = stream_rng(self.seed, 7000 + int(0 if self.m is None else round(self.m * 1000)), n)
        cdf, r = self._radial_inverse_cdf
        # stratum midpoints, shuffled independently for each player
        u = np.broadcast_to((np.arange(half)[:, None] + 0.5) / half, (half, n))
        u = np.take_along_axis(u, np.argsort(rng.random((half, n)), axis=0), axis=0)
        radius = np.interp(u, cdf, r)
        if self.d == 1:
            direction = np.where(rng.random((half, n, 1)) < 0.5, -1.0, 1.0)
        else:
            z = rng.standard_normal((half, n, self.d))
            direction = z / np.linalg.norm(z, axis=-1, keepdims=True)
        base = radius[..., None] * direction
        return np.concatenate([base, -base], axis=0)

    def nodes(self, n: int) -> np.ndarray:
        if self.m is None:
            return np.zeros((1, n, self.d))
        return self.unit_nodes(n) / self.m


def mollification_error_bound(K: float, m: float, mollifier: Mollifier | None = None) -> float:
    """2K/m times the first absolute moment of the kernel."""
    if m < 1:
        raise PreconditionError("m must be >= 1")
    moll = mollifier or Mollifier(d=1, m=m)
    return 2.0 * K * moll.first_abs_moment / m


class MollifiedCoefficients:
    """n-player coefficients b_{n,m}, f_{n,m}, g_{n,m} for all players at once.

    ``x`` has shape (..., n, d): the joint state. Each call returns per-player
    values, averaged over the fixed quadrature nodes. Coefficients listed in
    ``model.state_free`` are passed through unchanged.
    """

    def __init__(self, model: ModelSpec, n: int, m: float | None, n_nodes: int = 4096, seed: int = 0,
                 chunk: int = 2 ** 22):
        self.model, self.n, self.m = model, n, m
        self.mollifier = Mollifier(model.d, m, n_nodes, seed)
        self.y = self.mollifier.nodes(n)  # (Q, n, d)
        self.chunk = chunk

    def _average(self, fn, x, *rest):
        x = np.asarray(x, float)
        lead = x.shape[:-2]
        nb = int(np.prod(lead, dtype=int))
        xs = x.reshape((nb,) + x.shape[-2:])
        rest = [np.broadcast_to(r, lead + r.shape[len(lead):]).reshape((nb,) + r.shape[len(lead):]) for r in rest]
        Q = self.y.shape[0]
        per = max(1, self.chunk // (Q * self.n * self.model.d))
        outs = []
        for s in range(0, xs.shape[0], per):
            shifted = xs[s:s + per, None] - self.y[None]
            args = [r[s:s + per, None] for r in rest]
            outs.append(np.mean(fn(shifted, *args), axis=1))
        out = np.concatenate(outs, axis=0)
        return out.reshape(lead + out.shape[1:])

    def g(self, x, w0):
        if "g" in self.model.state_free or self.m is None:
            return self.model.g(x, x, w0)
        return self._average(lambda s, w: self.model.g(s, s, w), x, w0)

    def b(self, t, x, a, w0):
        if "b" in self.model.state_free or self.m is None:
            return self.model.b(t, x, x, a, w0)
        return self._average(lambda s, aa, w: self.model.b(t, s, s, aa, w), x, a, w0)

    def f(self, t, x, a, w0):
        if "f" in self.model.state_free or self.m is None:
            return self.model.f(t, x, x, a, w0)
        return self._average(lambda s, aa, w: self.model.f(t, s, s, aa, w), x, a, w0)


def mollify_g(model: ModelSpec, n: int, m: float | None, i: int, n_nodes: int = 4096, seed: int = 0):
    """Mollified terminal cost of player ``i`` (1-based) as a function of (w0 features, joint state)."""
    if not 1 <= i <= n:
        raise PreconditionError(f"player index {i} outside 1..{n}")
    mc = MollifiedCoefficients(model, n, m, n_nodes, seed)
    return lambda w0, x: mc.g(x, w0)[..., i - 1]


def mollify_b(model, n, m, i, n_nodes=4096, seed=0):
    if not 1 <= i <= n:
        raise PreconditionError(f"player index {i} outside 1..{n}")
    mc = MollifiedCoefficients(model, n, m, n_nodes, seed)
    return lambda t, a, w0, x: mc.b(t, x, a, w0)[..., i - 1, :]


def mollify_f(model, n, m, i, n_nodes=4096, seed=0):
    if not 1 <= i <= n:
        raise PreconditionError(f"player index {i} outside 1..{n}")
    mc = MollifiedCoefficients(model, n, m, n_nodes, seed)
    return lambda t, a, w0, x: mc.f(t, x, a, w0)[..., i - 1]


# --- path-dependence residuals -----------------------------------------------------

@dataclass(frozen=True)
class MarkovianResiduals:
    g_eps: np.ndarray  # per sample
    f_eps_path: np.ndarray  # (samples, steps + 1)
    b_eps_path: np.ndarray

    def l2(self) -> dict:
        return {
            "g": float(np.sqrt(np.mean(self.g_eps ** 2))),
            "f": float(np.sqrt(np.mean(np.mean(self.f_eps_path ** 2, axis=1)))),
            "b": float(np.sqrt(np.mean(np.mean(self.b_eps_path ** 2, axis=1)))),
        }


def markovian_residuals(model: ModelSpec, n_samples: int = 256, seed: int = 0, n_steps: int = 1024,
                        n_probe_points: int = 8) -> MarkovianResiduals:
    """Sup over probe points of |full coefficient - anchor-time coefficient| per common-noise sample.

    Models without a declared full coefficient are exact by construction and give
    zero residuals. Only the terminal cost may carry a full version here.
    """
    grid = TimeGrid(0.0, model.horizon, n_steps)
    zeros = np.zeros((n_samples, n_steps + 1))
    if model.f_full is not None or model.b_full is not None:
        raise UnsupportedStructure("path-dependent running cost or drift residuals are not implemented")
    if model.g_full is None:
        return MarkovianResiduals(np.zeros(n_samples), zeros, zeros.copy())
    noise = sample_worlds(grid, n_samples, 1, model.m, seed)
    anchor_idx = model.anchor_indices(grid)
    feats = model.w0_features(noise.W0, anchor_idx, grid.n_steps)  # (S, N, m)
    rng = stream_rng(seed, 0, 11)
    x = rng.uniform(-2, 2, size=(n_samples, n_probe_points, model.d))
    atoms = rng.normal(size=(n_samples, 8, model.d))
    approx = model.g(x, atoms, feats)
    full = model.g_full(x, atoms, noise.W0, grid.times)
    g_eps = np.max(np.abs(full - approx), axis=-1)
    return MarkovianResiduals(g_eps, zeros, zeros.copy())
