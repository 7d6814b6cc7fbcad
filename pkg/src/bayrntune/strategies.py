"""History of fine-tuned checkpoints and the rules that pick where to fine-tune from."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import RunningStats, normalize
from .policy import PolicyParams

STRATEGY_NAMES = ("normalized-closest", "infinite-chain", "best-only", "best-of-last-m")
FRESH_INIT = -1


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    phi: np.ndarray
    r: float
    parent: int
    params: PolicyParams | None = None
    checkpoint: Path | None = None


@dataclass
class History:
    """Append-only list of entries with contiguous iterations starting at 0 (the bootstrap policy)."""

    entries: list = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        expected = self.entries[-1].iteration + 1 if self.entries else entry.iteration
        if entry.iteration != expected:
            raise ValueError(f"iteration {entry.iteration} breaks contiguity (expected {expected})")
        if not np.isfinite(entry.r):
            raise ValueError(f"non-finite reward at iteration {entry.iteration}")
        if entry.parent >= entry.iteration:
            raise ValueError("parent iteration must precede the entry")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def by_iteration(self, i: int) -> HistoryEntry:
        k = i - self.entries[0].iteration
        if not 0 <= k < len(self.entries):
            raise KeyError(i)
        return self.entries[k]

    @property
    def iterations(self) -> np.ndarray:
        return np.array([e.iteration for e in self.entries], dtype=int)

    @property
    def phis(self) -> np.ndarray:
        return np.array([e.phi for e in self.entries], dtype=float)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.r for e in self.entries], dtype=float)


@dataclass(frozen=True)
class StrategyKind:
    name: str
    m: int = 0

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.name!r}")
        if self.name == "best-of-last-m" and self.m < 1:
            raise ValueError("best-of-last-m needs M >= 1")

    def __str__(self) -> str:
        return f"best-of-last-m:{self.m}" if self.name == "best-of-last-m" else self.name


def parse_strategy(text: str) -> StrategyKind:
    """Parse ``infinite-chain``, ``best-only``, ``normalized-closest`` or ``best-of-last-m:M``."""
    text = text.strip()
    if text == "normalized-closest-only":
        text = "normalized-closest"
    if text.startswith("best-of-last-m"):
        _, _, m = text.partition(":")
        try:
            return StrategyKind("best-of-last-m", int(m))
        except ValueError:
            raise ValueError(f"bad strategy {text!r}: expected best-of-last-m:M with integer M >= 1") from None
    return StrategyKind(text)


def _first_argmax(values: np.ndarray) -> int:
    return int(np.flatnonzero(values == values.max())[0])


def closest_rule(phi, iterations, phis, stats: RunningStats) -> int:
    """Entry whose normalized DR parameters are nearest to ``phi``; ties go to the earliest."""
    q = normalize(phi, stats)
    d = np.linalg.norm(normalize(np.asarray(phis, dtype=float), stats) - q, axis=1)
    return int(iterations[int(np.flatnonzero(d == d.min())[0])])


def chain_rule(iterations) -> int:
    return int(np.max(iterations))


def best_rule(iterations, rewards) -> int:
    return int(np.asarray(iterations)[_first_argmax(np.asarray(rewards, dtype=float))])


def best_of_last_m_rule(iterations, rewards, m: int) -> int:
    if m < 1:
        raise ValueError("M must be >= 1")
    iterations = np.asarray(iterations)
    rewards = np.asarray(rewards, dtype=float)
    return best_rule(iterations[-m:], rewards[-m:])


def select_checkpoint(kind: StrategyKind, phi, history: History, stats: RunningStats | None = None) -> int:
    """Iteration of the checkpoint to fine-tune from for the proposed ``phi``."""
    if len(history) == 0:
        raise ValueError("cannot select a checkpoint from an empty history")
    its = history.iterations
    if kind.name == "infinite-chain":
        return chain_rule(its)
    if kind.name == "best-only":
        return best_rule(its, history.rewards)
    if kind.name == "best-of-last-m":
        return best_of_last_m_rule(its, history.rewards, kind.m)
    if stats is None:
        stats = RunningStats.from_samples(np.vstack([history.phis, np.asarray(phi, dtype=float)]))
    return closest_rule(phi, its, history.phis, stats)
