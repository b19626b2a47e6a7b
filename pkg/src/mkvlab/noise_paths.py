"""Discretised Brownian paths for the common, idiosyncratic and regularisation noises.

Every path is addressed by ``(seed, world, kind)`` through ``numpy.random.SeedSequence``
spawn keys, so a world can be regenerated on its own without replaying the others.
Inside a stream the normals are drawn row-major as ``(path, step, dim)``; the path of
particle ``i`` is therefore the same whether 16 or 2048 particles are requested.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, PreconditionError

# stream kinds inside one world
COMMON, IDIO, REG_COMMON, REG_IDIO, INIT = 0, 1, 2, 3, 4

_HEADER = struct.Struct("<3q")


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream addressed by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)) or not self.t0 < self.T:
            raise ConfigurationError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        t = self.t0 + (self.T - self.t0) * np.arange(self.n_steps + 1) / self.n_steps
        t[-1] = self.T
        return t

    def index_of(self, r: float, tol: float = 1e-9) -> int:
        """Grid index of time ``r``; raises if ``r`` is not a grid point."""
        k = int(round((r - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.times[k] - r) > tol * max(1.0, abs(r)):
            raise PreconditionError(f"time {r} is not on the grid {self}")
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps * int(factor))


@dataclass(frozen=True)
class BrownianPath:
    grid: TimeGrid
    dim: int
    values: np.ndarray  # (n_steps + 1, dim)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_steps + 1, self.dim):
            raise ConfigurationError(f"path values have shape {v.shape}, expected {(self.grid.n_steps + 1, self.dim)}")
        object.__setattr__(self, "values", v)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def at(self, r: float) -> np.ndarray:
        return self.values[self.grid.index_of(r)]


def _path_from_increments(incr: np.ndarray) -> np.ndarray:
    out = np.zeros((incr.shape[0] + 1,) + incr.shape[1:])
    np.cumsum(incr, axis=0, out=out[1:])
    return out


def sample_brownian(grid: TimeGrid, dim: int, seed: int, stream: tuple = (0, COMMON)) -> BrownianPath:
    """Brownian path on ``grid`` with iid N(0, dt I) increments."""
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid")
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    z = stream_rng(seed, *stream).standard_normal((grid.n_steps, dim))
    return BrownianPath(grid, dim, _path_from_increments(z * np.sqrt(grid.dt)))


def concat_paths(w_hat: BrownianPath, w: BrownianPath, r: float) -> BrownianPath:
    """Path equal to ``w_hat`` before ``r`` and to ``w_hat(r) + w - w(r)`` from ``r`` on."""
    if w_hat.grid != w.grid or w_hat.dim != w.dim:
        raise PreconditionError("paths must share grid and dimension")
    k = w_hat.grid.index_of(r)
    out = w_hat.values.copy()
    out[k:] = w_hat.values[k] + (w.values[k:] - w.values[k])
    return BrownianPath(w_hat.grid, w_hat.dim, out)


def _block(grid, n_paths, dim, seed, world, kind):
    z = stream_rng(seed, world, kind).standard_normal((n_paths, grid.n_steps, dim))
    vals = np.zeros((n_paths, grid.n_steps + 1, dim))
    np.cumsum(z * np.sqrt(grid.dt), axis=1, out=vals[:, 1:])
    return vals


@dataclass(frozen=True)
class NoiseBundle:
    """All noises of one world.

    ``idio`` and ``reg_idio`` hold the per-particle paths as arrays of shape
    ``(n_paths, n_steps + 1, dim)``; use :meth:`idiosyncratic` for a single path.
    """

    grid: TimeGrid
    common: BrownianPath
    idio: np.ndarray
    seed: int
    world: int = 0
    reg_common: BrownianPath | None = None
    reg_idio: np.ndarray | None = None

    def __post_init__(self):
        for p in (self.common, self.reg_common):
            if p is not None and p.grid != self.grid:
                raise ConfigurationError("all paths of a bundle must share one TimeGrid")
        for arr in (self.idio, self.reg_idio):
            if arr is not None and arr.shape[1] != self.grid.n_steps + 1:
                raise ConfigurationError("all paths of a bundle must share one TimeGrid")

    @classmethod
    def sample(cls, grid, n_paths, dim, seed, world=0, regularization=False, reg_dim=None):
        common = BrownianPath(grid, dim, _block(grid, 1, dim, seed, world, COMMON)[0])
        idio = _block(grid, n_paths, dim, seed, world, IDIO)
        reg_common = reg_idio = None
        if regularization:
            rd = reg_dim or dim
            reg_common = BrownianPath(grid, rd, _block(grid, 1, rd, seed, world, REG_COMMON)[0])
            reg_idio = _block(grid, n_paths, rd, seed, world, REG_IDIO)
        return cls(grid, common, idio, seed, world, reg_common, reg_idio)

    @property
    def n_paths(self) -> int:
        return self.idio.shape[0]

    def idiosyncratic(self, i: int) -> BrownianPath:
        return BrownianPath(self.grid, self.idio.shape[2], self.idio[i])


@dataclass
class WorldNoise:
    """Increments of several worlds stacked for vectorised simulation.

    Shapes: ``dW0`` (W, K, m), ``dW`` (W, n, K, m), ``W0`` (W, K+1, m) and the
    optional regularisation increments ``dB0`` (W, K, d), ``dB`` (W, n, K, d).
    """

    grid: TimeGrid
    W0: np.ndarray
    dW0: np.ndarray
    dW: np.ndarray
    dB0: np.ndarray | None = None
    dB: np.ndarray | None = None
    seed: int = 0
    worlds: tuple = field(default=())

    @property
    def n_worlds(self) -> int:
        return self.dW0.shape[0]

    @property
    def n_paths(self) -> int:
        return self.dW.shape[1]

    @classmethod
    def from_bundles(cls, bundles):
        bundles = list(bundles)
        grid = bundles[0].grid
        if any(b.grid != grid for b in bundles):
            raise ConfigurationError("bundles must share one TimeGrid")
        W0 = np.stack([b.common.values for b in bundles])
        dW = np.stack([np.diff(b.idio, axis=1) for b in bundles])
        dB0 = dB = None
        if all(b.reg_common is not None for b in bundles):
            dB0 = np.stack([b.reg_common.increments for b in bundles])
            dB = np.stack([np.diff(b.reg_idio, axis=1) for b in bundles])
        return cls(grid, W0, np.diff(W0, axis=1), dW, dB0, dB, bundles[0].seed, tuple(b.world for b in bundles))

    def select(self, worlds) -> "WorldNoise":
        idx = np.asarray(worlds)
        pick = lambda a: None if a is None else a[idx]
        return WorldNoise(self.grid, self.W0[idx], self.dW0[idx], self.dW[idx], pick(self.dB0), pick(self.dB),
                          self.seed, tuple(np.asarray(self.worlds)[idx]) if self.worlds else ())

    def permute_particles(self, perm) -> "WorldNoise":
        perm = np.asarray(perm)
        return WorldNoise(self.grid, self.W0, self.dW0, self.dW[:, perm], self.dB0,
                          None if self.dB is None else self.dB[:, perm], self.seed, self.worlds)

    def coarsen(self, factor: int) -> "WorldNoise":
        """Same Brownian paths observed on a grid ``factor`` times coarser."""
        factor = int(factor)
        if self.grid.n_steps % factor:
            raise ConfigurationError("coarsening factor must divide n_steps")
        g = TimeGrid(self.grid.t0, self.grid.T, self.grid.n_steps // factor)

        def agg(a, axis):
            if a is None:
                return None
            shape = a.shape[:axis] + (g.n_steps, factor) + a.shape[axis + 1:]
            return a.reshape(shape).sum(axis=axis + 1)

        return WorldNoise(g, self.W0[:, ::factor], agg(self.dW0, 1), agg(self.dW, 2), agg(self.dB0, 1),
                          agg(self.dB, 2), self.seed, self.worlds)


def sample_worlds(grid, n_worlds, n_paths, dim, seed, first_world=0, regularization=False, reg_dim=None) -> WorldNoise:
    """Noise for worlds ``first_world, ..., first_world + n_worlds - 1``.

    Drawn directly in stacked form; equal to stacking :meth:`NoiseBundle.sample`
    for each world id.
    """
    if n_worlds < 1 or n_paths < 1:
        raise ConfigurationError("n_worlds and n_paths must be positive")
    sq = np.sqrt(grid.dt)
    ids = range(first_world, first_world + n_worlds)
    dW0 = np.stack([stream_rng(seed, w, COMMON).standard_normal((1, grid.n_steps, dim))[0] for w in ids]) * sq
    dW = np.stack([stream_rng(seed, w, IDIO).standard_normal((n_paths, grid.n_steps, dim)) for w in ids]) * sq
    W0 = np.zeros((n_worlds, grid.n_steps + 1, dim))
    np.cumsum(dW0, axis=1, out=W0[:, 1:])
    dB0 = dB = None
    if regularization:
        rd = reg_dim or dim
        dB0 = np.stack([stream_rng(seed, w, REG_COMMON).standard_normal((1, grid.n_steps, rd))[0] for w in ids]) * sq
        dB = np.stack([stream_rng(seed, w, REG_IDIO).standard_normal((n_paths, grid.n_steps, rd)) for w in ids]) * sq
    return WorldNoise(grid, W0, dW0, dW, dB0, dB, seed, tuple(ids))


# --- binary dump -----------------------------------------------------------------

def write_path(path: BrownianPath, file, seed: int = 0) -> None:
    """Little-endian dump: header ``(n_steps+1, dim, seed)`` as int64, then float64 rows."""
    write_array(path.values, file, seed)


def write_array(values: np.ndarray, file, seed: int = 0) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise PreconditionError("binary dumps hold 2-d (row, dim) arrays")
    with open(Path(file), "wb") as fh:
        fh.write(_HEADER.pack(values.shape[0], values.shape[1], int(seed)))
        fh.write(values.tobytes(order="C"))


def read_array(file) -> tuple[np.ndarray, int]:
    raw = Path(file).read_bytes()
    rows, dim, seed = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != rows * dim:
        raise ConfigurationError(f"corrupt dump: expected {rows * dim} floats, found {data.size}")
    return data.reshape(rows, dim).copy(), seed


def read_path(file, grid: TimeGrid) -> BrownianPath:
    values, _ = read_array(file)
    return BrownianPath(grid, values.shape[1], values)
