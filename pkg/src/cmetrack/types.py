"""Shared value types for matching, memory, DFL and the tracking loop.

Layout convention: pixel index ``i = y * w + x``; a feature map is stored as a
``(h, w, c)`` float64 array and flattened row-major to ``(h*w, c)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KEY_NORM_TOL = 1e-9


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used everywhere in the package (PCG64)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ContractError(f"feature map must be (h, w, c) with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("feature map contains non-finite values")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.h * self.w, self.c)

    @classmethod
    def random(cls, seed: int, h: int, w: int, c: int) -> "FeatureMap":
        return cls(make_rng(seed).standard_normal((h, w, c)))


@dataclass
class Mask:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ContractError(f"mask must be (h, w) with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ContractError("mask values must lie in [0, 1]")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def complement(self) -> "Mask":
        return Mask(1.0 - self.data)


class Posterior(Mask):
    """Per-pixel foreground probability map."""


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    fg: float
    bg: float


@dataclass
class MemoryBank:
    """Flat key/value memory. Rows ``[0, n_initial)`` came from the first frame."""

    keys: np.ndarray
    fg: np.ndarray
    bg: np.ndarray
    n_initial: int = 0

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.fg = np.asarray(self.fg, dtype=np.float64).reshape(-1)
        self.bg = np.asarray(self.bg, dtype=np.float64).reshape(-1)
        if self.keys.ndim != 2:
            raise ContractError("bank keys must be a 2-D (N, c) array")
        n = self.keys.shape[0]
        if self.fg.shape[0] != n or self.bg.shape[0] != n:
            raise ContractError("bank keys and values disagree in length")

    @property
    def c(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def entries(self) -> list[MemoryEntry]:
        return [MemoryEntry(self.keys[j].copy(), float(self.fg[j]), float(self.bg[j])) for j in range(len(self))]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.keys.copy(), self.fg.copy(), self.bg.copy(), self.n_initial)

    def check_invariants(self, tol: float = KEY_NORM_TOL) -> None:
        if len(self) == 0:
            raise ContractError("memory bank is empty")
        norms = np.linalg.norm(self.keys, axis=1)
        if np.max(np.abs(norms - 1.0)) > tol:
            raise ContractError("memory keys are not unit norm")
        if np.max(np.abs(self.fg + self.bg - 1.0)) > tol:
            raise ContractError("memory values violate fg + bg = 1")


class Strategy(str, enum.Enum):
    INITIAL_ONLY = "initial-only"
    ALL_FRAMES = "all-frames"
    COMPACT = "compact"


@dataclass(frozen=True)
class CmeConfig:
    topk: int = 3
    zeta: float = 0.90
    beta: float = 0.001
    strategy: Strategy = Strategy.COMPACT
    all_frames_cap: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if int(self.topk) != self.topk or self.topk < 1:
            raise ContractError(f"topk must be a positive integer, got {self.topk}")
        if not 0.0 < self.zeta <= 1.0:
            raise ContractError(f"zeta must lie in (0, 1], got {self.zeta}")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")
        if self.all_frames_cap is not None and self.all_frames_cap < 1:
            raise ContractError("all_frames_cap must be positive when set")

    def as_dict(self) -> dict:
        return {
            "topk": self.topk,
            "zeta": self.zeta,
            "beta": self.beta,
            "strategy": self.strategy.value,
            "all_frames_cap": self.all_frames_cap,
        }


@dataclass
class UpdateReport:
    merged_count: int
    expanded_count: int
    discarded_count: int
    bank_size_before: int
    bank_size_after: int
    avg_threshold: Optional[float] = None
    evicted_count: int = 0

    def as_dict(self) -> dict:
        return {
            "merged": self.merged_count,
            "expanded": self.expanded_count,
            "discarded": self.discarded_count,
            "bank_size_before": self.bank_size_before,
            "bank_size_after": self.bank_size_after,
            "evicted": self.evicted_count,
            "avg_threshold": self.avg_threshold,
        }


@dataclass
class ScoreMaps:
    fg: np.ndarray
    bg: np.ndarray
    affinity: Optional[np.ndarray] = field(default=None, repr=False)
