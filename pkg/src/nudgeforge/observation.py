"""Observation operators, measurement noise, and reproducible random streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class Rng:
    """Counter-based random stream (Philox) keyed by a 64-bit seed.

    Two instances built from the same ``(seed, counter)`` produce the same
    stream. Independent purposes get their own stream via :meth:`substream`.
    """

    def __init__(self, seed, counter=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)
        if counter:
            self._bitgen.advance(int(counter))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self):
        return self._bitgen.state["state"]["counter"]

    def substream(self, purpose):
        """Derive an independent stream for a named purpose."""
        words = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32,
                                        zlib.crc32(purpose.encode())]).generate_state(2, np.uint64)
        return Rng(int(words[0]))

    def uniform(self, n):
        """Uniform draws on the half-open interval (0, 1]."""
        return 1.0 - self._gen.random(n)


def gaussian_vector(rng, n):
    """``n`` standard normal draws by the Box-Muller transform."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.empty(0)
    m = (n + 1) // 2
    u1 = rng.uniform(m)
    u2 = rng.uniform(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * m)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:n]


def gaussian_array(rng, shape):
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    return gaussian_vector(rng, int(np.prod(shape))).reshape(shape)


@dataclass(frozen=True)
class ObservationOperator:
    """Uniform subsampling that keeps every ``factor``-th point per axis.

    The state is stored flat (row-major for 2D grids). Index 0 along each
    axis is always observed.
    """

    extents: tuple
    factor: int = 1
    index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        extents = tuple(int(e) for e in self.extents)
        object.__setattr__(self, "extents", extents)
        if len(extents) not in (1, 2):
            raise ValueError("only 1D and 2D layouts are supported")
        if self.factor < 1 or any(e % self.factor for e in extents):
            raise ValueError(f"factor {self.factor} does not divide extents {extents}")
        grid = np.arange(int(np.prod(extents))).reshape(extents)
        sl = (slice(None, None, self.factor),) * len(extents)
        object.__setattr__(self, "index", grid[sl].ravel())

    @classmethod
    def from_sparsity(cls, extents, percent):
        """Build from an observed percentage (100, 50, 25 in 1D; 100, 25, 6.25 in 2D)."""
        ndim = len(tuple(extents))
        ratio = (100.0 / percent) ** (1.0 / ndim)
        factor = int(round(ratio))
        if abs(factor - ratio) > 1e-9:
            raise ValueError(f"{percent}% is not a uniform subsampling of a {ndim}D grid")
        return cls(tuple(extents), factor)

    @property
    def layout(self):
        return f"{len(self.extents)}D"

    @property
    def state_dim(self):
        return int(np.prod(self.extents))

    @property
    def obs_dim(self):
        return int(self.index.size)

    @property
    def obs_extents(self):
        return tuple(e // self.factor for e in self.extents)

    def matrix(self):
        """Dense 0/1 selection matrix of shape (p, d)."""
        M = np.zeros((self.obs_dim, self.state_dim))
        M[np.arange(self.obs_dim), self.index] = 1.0
        return M

    def __call__(self, u):
        return subsample(u, self)


def subsample(u, H):
    shape = np.shape(ad._raw(u))
    if not shape or shape[-1] != H.state_dim:
        raise ValueError(f"state of shape {shape} does not match operator extents {H.extents}")
    return ad.take(u, H.index)


def observe(u, H, sigma, rng):
    """Noisy observation ``H(u) + sigma * eps`` with eps ~ N(0, I)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    y = subsample(u, H)
    if sigma == 0:
        return y
    return y + sigma * gaussian_array(rng, np.shape(y))
