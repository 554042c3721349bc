"""Decision boundary rectification driven by state predominance.

Classes whose members come overwhelmingly from one state get a small prior
``p_k``; assignment picks ``argmax_k ln p_k + logit_k``, which is the MAP class
under a Gaussian-on-the-sphere likelihood with prior ``p``.

Class and state labels are 1-based at the public API, matching the dataset
format; arrays are indexed from 0 internally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AllNullified, IndexOutOfRange, NullifiedClass
from .model import SurrogateBank, logits


@dataclass
class MpiStats:
    counts: np.ndarray  # (K, J) int

    @classmethod
    def empty(cls, K: int, J: int) -> MpiStats:
        return cls(np.zeros((K, J), dtype=np.int64))

    @property
    def member_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def R(self) -> np.ndarray:
        return mpi(self)

    def copy(self) -> MpiStats:
        return MpiStats(self.counts.copy())

    def reset(self) -> None:
        self.counts[:] = 0


def accumulate_counts(stats: MpiStats, assignments, states) -> MpiStats:
    """Add one count per (class, state) pair; labels are 1-based. Mutates and returns ``stats``."""
    y = np.asarray(assignments, dtype=np.int64).reshape(-1)
    s = np.asarray(states, dtype=np.int64).reshape(-1)
    if y.shape != s.shape:
        raise ValueError("assignments and states differ in length")
    if y.size == 0:
        return stats
    K, J = stats.counts.shape
    if y.min() < 1 or y.max() > K:
        raise IndexOutOfRange(f"assignment outside 1..{K}")
    if s.min() < 1 or s.max() > J:
        raise IndexOutOfRange(f"state outside 1..{J}")
    np.add.at(stats.counts, (y - 1, s - 1), 1)
    return stats


def mpi(stats: MpiStats) -> np.ndarray:
    """Maximum predominance index per class; empty classes get 0."""
    sizes = stats.member_sizes
    top = stats.counts.max(axis=1) if stats.counts.shape[1] else np.zeros(len(sizes))
    R = np.zeros(len(sizes), dtype=np.float64)
    nz = sizes > 0
    R[nz] = top[nz] / sizes[nz]
    return R


@dataclass(frozen=True)
class RectifierConfig:
    """Rectifier strength ``a`` (``math.inf`` for hard) and threshold ``b``."""

    a: float = math.inf
    b: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("threshold b must lie in [0, 1]")
        if not self.a >= 0.0:
            raise ValueError("strength a must be >= 0")

    @property
    def hard(self) -> bool:
        return math.isinf(self.a)

    def to_dict(self) -> dict:
        return {"a": "inf" if self.hard else self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d) -> RectifierConfig:
        a = d.get("a", math.inf)
        if isinstance(a, str):
            a = float(a)
        elif a is None:
            a = math.inf
        return cls(float(a), float(d.get("b", 0.95)))


def rectifier(R, cfg: RectifierConfig):
    """Soft ``1 / (1 + exp(a (R - b)))`` or hard ``[R <= b]``; vectorized over ``R``."""
    R = np.asarray(R, dtype=np.float64)
    if cfg.hard:
        out = (R <= cfg.b).astype(np.float64)
    else:
        # logistic(-z) via tanh stays finite for any a
        z = cfg.a * (R - cfg.b)
        out = 0.5 * (1.0 - np.tanh(0.5 * z))
    return float(out) if out.ndim == 0 else out


def multi_state_rectifier(R_per_kind: Sequence, cfgs: Sequence[RectifierConfig]):
    """Product of per-kind rectifier values (works elementwise on arrays)."""
    if len(R_per_kind) != len(cfgs):
        raise ValueError("need one rectifier config per state kind")
    out = 1.0
    for R, cfg in zip(R_per_kind, cfgs):
        out = out * rectifier(R, cfg)
    return out


def _log_prior(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def rectified_scores(bank: SurrogateBank, X) -> np.ndarray:
    """``logit_k + ln p_k`` with ``-inf`` for nullified classes."""
    return logits(bank, X) + _log_prior(bank.p)


def rectified_assign_batch(bank: SurrogateBank, X: np.ndarray) -> tuple[np.ndarray, int]:
    """Rectified assignment for rows of ``X``.

    Returns 1-based labels and the number of rows that fell back to the
    unrectified argmax because every class was nullified.
    """
    X = np.atleast_2d(X)
    if not np.any(bank.p > 0):
        return np.argmax(logits(bank, X), axis=1) + 1, X.shape[0]
    # np.argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(rectified_scores(bank, X), axis=1) + 1, 0


def rectified_assign(bank: SurrogateBank, x) -> int:
    return int(rectified_assign_batch(bank, np.asarray(x)[None, :])[0][0])


def plain_assign_batch(bank: SurrogateBank, X: np.ndarray) -> np.ndarray:
    return np.argmax(logits(bank, np.atleast_2d(X)), axis=1) + 1


def map_posterior(bank: SurrogateBank, x) -> np.ndarray:
    """Posterior ``p_k exp(logit_k) / sum_k' p_k' exp(logit_k')``."""
    p = np.asarray(bank.p, dtype=np.float64)
    if not np.any(p > 0):
        raise AllNullified("every class has zero prior")
    s = rectified_scores(bank, x)
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def boundary_residual(mu1, mu2, p1: float, p2: float, x, scale: float = 30.0) -> float:
    """Signed distance-like residual of ``x`` from the rectified two-class boundary.

    Zero exactly when ``scale * mu1.x + ln p1 == scale * mu2.x + ln p2``.
    """
    if p1 <= 0 or p2 <= 0:
        raise NullifiedClass("boundary undefined for a nullified class")
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    return float(scale * diff @ np.asarray(x, dtype=np.float64) + math.log(p1 / p2))


def diagnostic_record(iteration: int, bank: SurrogateBank, R: np.ndarray, bins: int = 10) -> dict:
    hist, _ = np.histogram(R, bins=bins, range=(0.0, 1.0))
    return {"iter": int(iteration), "active_K": bank.active_K, "R_histogram": hist.tolist()}


def diagnostic_line(iteration: int, bank: SurrogateBank, R: np.ndarray, bins: int = 10) -> str:
    return json.dumps(diagnostic_record(iteration, bank, R, bins), separators=(",", ":"))
