"""Domain-randomization parameter spaces, running statistics and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class Dim:
    name: str
    lo: float
    hi: float
    integer: bool = False


@dataclass(frozen=True)
class DomainParamSpace:
    """Axis-aligned box of DR parameters."""

    dims: tuple[Dim, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names: {names}")
        for d in self.dims:
            if not d.lo < d.hi:
                raise ValueError(f"dimension {d.name!r} needs lo < hi, got [{d.lo}, {d.hi}]")

    @classmethod
    def from_bounds(cls, bounds: Sequence[tuple], names: Sequence[str] | None = None) -> "DomainParamSpace":
        names = names or [f"x{k}" for k in range(len(bounds))]
        dims = []
        for name, b in zip(names, bounds):
            integer = bool(b[2]) if len(b) > 2 else False
            dims.append(Dim(name, float(b[0]), float(b[1]), integer))
        return cls(tuple(dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    @property
    def lo(self) -> np.ndarray:
        return np.array([d.lo for d in self.dims])

    @property
    def hi(self) -> np.ndarray:
        return np.array([d.hi for d in self.dims])

    @property
    def integer_mask(self) -> np.ndarray:
        return np.array([d.integer for d in self.dims], dtype=bool)

    def center(self) -> np.ndarray:
        return clamp_to_space(0.5 * (self.lo + self.hi), self)

    def contains(self, phi, atol: float = 1e-12) -> bool:
        phi = np.asarray(phi, dtype=float)
        return phi.shape == (self.ndim,) and bool(
            np.all(phi >= self.lo - atol) and np.all(phi <= self.hi + atol)
        )

    def to_unit(self, phi) -> np.ndarray:
        return (np.asarray(phi, dtype=float) - self.lo) / (self.hi - self.lo)

    def from_unit(self, u) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=float) * (self.hi - self.lo)


def _check_dim(phi: np.ndarray, n: int) -> None:
    if phi.shape[-1] != n:
        raise ValueError(f"dimension mismatch: got {phi.shape[-1]}, expected {n}")


def clamp_to_space(phi, space: DomainParamSpace) -> np.ndarray:
    """Clamp ``phi`` (shape ``(d,)`` or ``(n, d)``) into the box; integer dims are rounded first."""
    phi = np.array(phi, dtype=float)
    _check_dim(phi, space.ndim)
    mask = space.integer_mask
    if mask.any():
        phi[..., mask] = np.floor(phi[..., mask] + 0.5)
    return np.clip(phi, space.lo, space.hi)


@dataclass(frozen=True)
class RunningStats:
    """Welford accumulator; ``update`` returns a new value."""

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls, ndim: int) -> "RunningStats":
        return cls(0, np.zeros(ndim), np.zeros(ndim))

    @classmethod
    def from_samples(cls, samples) -> "RunningStats":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        stats = cls.empty(samples.shape[1])
        for row in samples:
            stats = update_stats(stats, row)
        return stats

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / self.count, 0.0))


def update_stats(stats: RunningStats, phi) -> RunningStats:
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if stats.count == 0 and stats.mean.size == 0:
        stats = RunningStats.empty(phi.size)
    _check_dim(phi, stats.mean.size)
    count = stats.count + 1
    delta = phi - stats.mean
    mean = stats.mean + delta / count
    m2 = stats.m2 + delta * (phi - mean)
    return RunningStats(count, mean, m2)


def normalize(phi, stats: RunningStats, eps: float = SIGMA_FLOOR) -> np.ndarray:
    if stats.count < 1:
        raise ValueError("normalize needs at least one sample in the running stats")
    phi = np.asarray(phi, dtype=float)
    _check_dim(phi, stats.mean.size)
    return (phi - stats.mean) / np.maximum(stats.std, eps)


def normalized_distance(a, b, stats: RunningStats, eps: float = SIGMA_FLOOR) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(normalize(a, stats, eps) - normalize(b, stats, eps)))


def uniform_sample(space: DomainParamSpace, rng, n: int | None = None) -> np.ndarray:
    """Uniform draw from the box. ``rng`` is a seed or a ``numpy.random.Generator``."""
    rng = np.random.default_rng(rng)
    shape = (space.ndim,) if n is None else (n, space.ndim)
    u = rng.uniform(space.lo, space.hi, size=shape)
    mask = space.integer_mask
    if mask.any():
        # integer dims: uniform over the admissible integers, endpoints included
        lo, hi = np.ceil(space.lo[mask]), np.floor(space.hi[mask])
        u[..., mask] = lo + np.floor(rng.uniform(0.0, 1.0, size=u[..., mask].shape) * (hi - lo + 1))
    return u
