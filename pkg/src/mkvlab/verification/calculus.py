"""Cylindrical test functions u(t, mu) = psi(t) F(mu(phi_1), ..., mu(phi_k)) and the calculus built on them.

Clouds are passed as arrays of shape (..., n, d); leading axes are worlds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import PreconditionError, UnsupportedStructure
from ..model import ModelSpec
from ..dynamics import run_particles
from ..noise_paths import TimeGrid, WorldNoise, sample_worlds


@dataclass(frozen=True)
class Basis:
    """Smooth phi: R^d -> R with gradient and Hessian, all vectorised over (..., d)."""

    fn: object
    grad: object
    hess: object
    label: str = ""


def linear_basis(direction) -> Basis:
    v = np.atleast_1d(np.asarray(direction, float))
    return Basis(lambda x: x @ v,
                 lambda x: np.broadcast_to(v, x.shape).copy(),
                 lambda x: np.zeros(x.shape + (x.shape[-1],)),
                 f"linear{v.tolist()}")


def quadratic_basis(d: int = 1) -> Basis:
    return Basis(lambda x: np.sum(x * x, axis=-1),
                 lambda x: 2.0 * x,
                 lambda x: np.broadcast_to(2.0 * np.eye(d), x.shape + (d,)).copy(),
                 "quadratic")


def sine_basis(freq, phase: float = 0.0) -> Basis:
    """sin(<freq, x> + phase)."""
    w = np.atleast_1d(np.asarray(freq, float))
    return Basis(lambda x: np.sin(x @ w + phase),
                 lambda x: np.cos(x @ w + phase)[..., None] * w,
                 lambda x: -np.sin(x @ w + phase)[..., None, None] * np.outer(w, w),
                 f"sin{w.tolist()}")


def gaussian_basis(centre, width: float = 1.0) -> Basis:
    c = np.atleast_1d(np.asarray(centre, float))
    s2 = width ** 2

    def fn(x):
        return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * s2))

    def grad(x):
        return -fn(x)[..., None] * (x - c) / s2

    def hess(x):
        r = (x - c) / s2
        eye = np.eye(c.size)
        return fn(x)[..., None, None] * (r[..., :, None] * r[..., None, :] - eye / s2)

    return Basis(fn, grad, hess, f"gauss{c.tolist()}")


@dataclass(frozen=True)
class Outer:
    """F: R^k -> R with gradient (..., k) and Hessian (..., k, k)."""

    fn: object
    grad: object
    hess: object


def identity_outer() -> Outer:
    return Outer(lambda y: y[..., 0], lambda y: np.ones_like(y), lambda y: np.zeros(y.shape + (1,)))


def square_outer() -> Outer:
    return Outer(lambda y: y[..., 0] ** 2, lambda y: 2.0 * y, lambda y: 2.0 * np.ones(y.shape + (1,)))


def product_outer() -> Outer:
    """F(y) = y_1 y_2 + 0.5 y_1^2."""
    def grad(y):
        return np.stack([y[..., 1] + y[..., 0], y[..., 0]], axis=-1)

    def hess(y):
        h = np.array([[1.0, 1.0], [1.0, 0.0]])
        return np.broadcast_to(h, y.shape[:-1] + (2, 2)).copy()

    return Outer(lambda y: y[..., 0] * y[..., 1] + 0.5 * y[..., 0] ** 2, grad, hess)


def exp_outer(weights) -> Outer:
    """F(y) = exp(<w, y>)."""
    w = np.asarray(weights, float)
    return Outer(lambda y: np.exp(y @ w), lambda y: np.exp(y @ w)[..., None] * w,
                 lambda y: np.exp(y @ w)[..., None, None] * np.outer(w, w))


@dataclass(frozen=True)
class CylindricalTestFunction:
    basis: tuple
    outer: Outer
    psi: object = None  # time factor
    dpsi: object = None

    @property
    def k(self) -> int:
        return len(self.basis)

    def _psi(self, t):
        return 1.0 if self.psi is None else float(self.psi(t))

    def features(self, atoms) -> np.ndarray:
        return np.stack([np.mean(b.fn(atoms), axis=-1) for b in self.basis], axis=-1)

    def value(self, t, atoms) -> np.ndarray:
        return self._psi(t) * self.outer.fn(self.features(atoms))

    def dt(self, t, atoms) -> np.ndarray:
        if self.dpsi is None:
            return np.zeros(np.shape(atoms)[:-2])
        return float(self.dpsi(t)) * self.outer.fn(self.features(atoms))

    def dmu(self, t, atoms, x) -> np.ndarray:
        """Lions derivative at points ``x`` (..., q, d): sum_i dF_i grad phi_i(x)."""
        dF = self.outer.grad(self.features(atoms))  # (..., k)
        grads = np.stack([b.grad(x) for b in self.basis], axis=-2)  # (..., q, k, d)
        return self._psi(t) * np.einsum("...k,...qkd->...qd", dF, grads)

    def dx_dmu(self, t, atoms, x) -> np.ndarray:
        dF = self.outer.grad(self.features(atoms))
        hess = np.stack([b.hess(x) for b in self.basis], axis=-3)  # (..., q, k, d, d)
        return self._psi(t) * np.einsum("...k,...qkde->...qde", dF, hess)

    def d2mu(self, t, atoms, x, y) -> np.ndarray:
        """Second Lions derivative at (x_p, y_q): (..., p, q, d, d)."""
        H = self.outer.hess(self.features(atoms))
        gx = np.stack([b.grad(x) for b in self.basis], axis=-2)
        gy = np.stack([b.grad(y) for b in self.basis], axis=-2)
        return self._psi(t) * np.einsum("...kl,...pkd,...qle->...pqde", H, gx, gy)

    def mean_grads(self, atoms) -> np.ndarray:
        """Atom averages of the basis gradients, (..., k, d)."""
        return np.stack([np.mean(b.grad(atoms), axis=-2) for b in self.basis], axis=-2)


# --- derivative checks ---------------------------------------------------------------

def lions_fd_check(u: CylindricalTestFunction, n_probes: int = 50, h: float = 1e-4, n_atoms: int = 8, d: int = 1,
                   seed: int = 0, t: float = 0.0) -> np.ndarray:
    """Relative errors of the lifted central difference against (1/n) <d_mu u(mu)(x_i), e>.

    Each probe draws a cloud, one atom i and a unit direction e. The error is
    scaled by (1/n)|d_mu u(mu)(x_i)|, the size of the directional derivative.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    errs = np.empty(n_probes)
    for p in range(n_probes):
        atoms = rng.normal(size=(n_atoms, d))
        i = int(rng.integers(n_atoms))
        e = rng.normal(size=d)
        e /= np.linalg.norm(e)
        up, dn = atoms.copy(), atoms.copy()
        up[i] += h * e
        dn[i] -= h * e
        fd = (u.value(t, up) - u.value(t, dn)) / (2 * h)
        grad = u.dmu(t, atoms, atoms[i:i + 1])[0]
        exact = grad @ e / n_atoms
        scale = np.linalg.norm(grad) / n_atoms
        errs[p] = abs(fd - exact) / scale if scale > 0 else abs(fd - exact)
    return errs


def basis_fd_check(basis: Basis, d: int = 1, n_probes: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of grad and Hessian against central differences."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(32,)))
    worst = 0.0
    for _ in range(n_probes):
        x = rng.normal(size=d)
        g, H = basis.grad(x), basis.hess(x)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fg = (basis.fn(x + e) - basis.fn(x - e)) / (2 * h)
            fh = (basis.grad(x + e) - basis.grad(x - e)) / (2 * h)
            worst = max(worst, abs(fg - g[j]) / max(1.0, abs(g[j])),
                        float(np.max(np.abs(fh - H[:, j]) / np.maximum(1.0, np.abs(H[:, j])))))
    return worst


# --- Hamiltonian ---------------------------------------------------------------------

def _require_additive(model: ModelSpec):
    if model.diffusion_structure != "additive":
        raise UnsupportedStructure("Hamiltonian and Ito-Wentzell checks need time-only diffusions")


def hamiltonian(model: ModelSpec, t: float, atoms, u: CylindricalTestFunction, S_term=None, controls=None,
                w0=None) -> float:
    """Per-atom minimum over the control grid of the generator bracket, averaged over atoms.

    With time-only diffusions the joint infimum over (a, a') separates by atom and
    the a' slot drops out.
    """
    _require_additive(model)
    x = np.asarray(atoms, float).reshape(-1, model.d)
    n = x.shape[0]
    controls = controls or model.control
    w0 = np.zeros((len(model.anchor_times), model.m)) if w0 is None else np.asarray(w0, float)
    sig, sig0 = model.diffusions(t)
    P = u.dmu(t, x, x)  # (n, d)
    Q = u.dx_dmu(t, x, x)  # (n, d, d)
    second = 0.5 * np.einsum("de,ned->n", sig @ sig.T + sig0 @ sig0.T, Q)
    G = u.mean_grads(x)  # (k, d)
    H = u.outer.hess(u.features(x))
    # (1/2) average over x' of tr(sigma0 sigma0^T R(x, x')) with R the second Lions derivative
    grads = np.stack([b.grad(x) for b in u.basis], axis=-2)  # (n, k, d)
    cross = 0.5 * u._psi(t) * np.einsum("kl,nkd,de,le->n", H, grads, sig0 @ sig0.T, G)
    s_term = 0.0 if S_term is None else np.einsum("dm,ndm->n", sig0, np.asarray(S_term, float).reshape(n, model.d,
                                                                                                         model.m))
    brackets = []
    for a in controls.atoms:
        aa = np.broadcast_to(a, (n, controls.dim))
        brackets.append(model.f(t, x, x, aa, w0) + np.sum(model.b(t, x, x, aa, w0) * P, axis=-1))
    inner = np.min(np.stack(brackets), axis=0)
    return float(np.mean(inner + second + cross + s_term))


# --- Ito-Wentzell residual ------------------------------------------------------------

@dataclass(frozen=True)
class ItoWentzellResult:
    residual: np.ndarray  # per world
    dt: float

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.residual)))


def ito_wentzell_residual(model: ModelSpec, u: CylindricalTestFunction, states: np.ndarray, actions: np.ndarray,
                          noise: WorldNoise, start: int = 0, realized_covariation: bool = False,
                          particle_terms: bool = False) -> ItoWentzellResult:
    """u(T, rho_T) - u(t0, rho_t0) minus the discretised drift and common-noise martingale.

    ``states`` (W, K+1, n, d) and ``actions`` (W, K, n, dim_a) come from a recorded
    run. With ``realized_covariation`` the dt in the sigma0 sigma0^T terms is replaced
    by the realised dW0 dW0^T of the step. With ``particle_terms`` the finite-cloud
    Ito terms are added: the idiosyncratic martingale (1/n) sum <d_mu u(x_i), sigma dW_i>
    and the self-interaction (1/2n) tr(d2_mu u(x_i, x_i) sigma sigma^T).
    """
    _require_additive(model)
    grid = noise.grid
    W, K1, n, d = states.shape
    anchor_idx = model.anchor_indices(grid)
    res = u.value(grid.times[start + K1 - 1], states[:, -1]) - u.value(grid.times[start], states[:, 0])
    for j in range(K1 - 1):
        k = start + j
        t = grid.times[k]
        x = states[:, j]
        a = actions[:, j]
        feats = model.w0_features(noise.W0, anchor_idx, k)
        sig, sig0 = model.diffusions(t)
        dW0 = noise.dW0[:, k]  # (W, m)
        c0 = sig0 @ sig0.T
        if realized_covariation:
            inc = dW0 @ sig0.T
            cov0 = np.einsum("wd,we->wde", inc, inc)
        else:
            cov0 = np.broadcast_to(c0 * grid.dt, (W, d, d))
        P = u.dmu(t, x, x)  # (W, n, d)
        Q = u.dx_dmu(t, x, x)  # (W, n, d, d)
        b = model.b(t, x, x, a, feats)
        drift = u.dt(t, x) + np.mean(np.sum(P * b, axis=-1), axis=-1)
        diff_idio = 0.5 * np.mean(np.einsum("de,wned->wn", sig @ sig.T, Q), axis=-1)
        diff_common = 0.5 * np.mean(np.einsum("wde,wned->wn", cov0, Q), axis=-1)
        G = u.mean_grads(x)  # (W, k, d)
        H = u.outer.hess(u.features(x))  # (W, k, k)
        cross = 0.5 * u._psi(t) * np.einsum("wkl,wkd,wde,wle->w", H, G, cov0, G)
        mart = np.einsum("wd,wd->w", np.mean(P, axis=1) @ sig0, dW0)
        res = res - (drift + diff_idio) * grid.dt - diff_common - cross - mart
        if particle_terms:
            dW = noise.dW[:, :n, k]  # (W, n, m)
            res = res - np.mean(np.einsum("wnd,wnd->wn", P, dW @ sig.T), axis=-1)
            grads = np.stack([bb.grad(x) for bb in u.basis], axis=-2)  # (W, n, k, d)
            self_int = np.einsum("wkl,wnkd,de,wnle->wn", H, grads, sig @ sig.T, grads)
            res = res - 0.5 * u._psi(t) * np.mean(self_int, axis=-1) / n * grid.dt
    return ItoWentzellResult(res, grid.dt)


@dataclass(frozen=True)
class ScalingReport:
    n_steps: tuple
    mean_abs: tuple
    ratios: tuple  # mean_abs at dt over mean_abs at dt / 2; nan where the finer residual is 0

    @property
    def exact(self) -> bool:
        """Every residual vanished: the scheme reproduces u exactly and no rate is defined."""
        return all(v == 0.0 for v in self.mean_abs)


def ito_wentzell_scaling(model: ModelSpec, u: CylindricalTestFunction, x0: np.ndarray, policy,
                         n_steps=(32, 64, 128), n_worlds: int = 32, seed: int = 0, realized_covariation: bool = True,
                         particle_terms: bool = True) -> ScalingReport:
    """Mean |residual| on nested grids; coarse noise is the fine noise with increments summed.

    ``x0`` is (W, n, d); every grid size must divide the finest one.
    """
    n_steps = tuple(sorted(n_steps))
    finest = n_steps[-1]
    if any(finest % k for k in n_steps):
        raise PreconditionError("grid sizes must divide the finest grid")
    fine = sample_worlds(TimeGrid(0.0, model.horizon, finest), n_worlds, x0.shape[1], model.m, seed)
    out = []
    for k in n_steps:
        noise = fine.coarsen(finest // k) if k != finest else fine
        tr = run_particles(model, noise, x0, policy, record_actions=True)
        acts = model.control.atoms[tr.actions]
        out.append(ito_wentzell_residual(model, u, tr.states, acts, noise, realized_covariation=realized_covariation,
                                         particle_terms=particle_terms).mean_abs)
    ratios = tuple(out[j] / out[j + 1] if out[j + 1] > 0 else math.nan for j in range(len(out) - 1))
    return ScalingReport(n_steps, tuple(out), ratios)
