"""Feature drift regularization between per-state and global feature statistics.

The distance between a state sub-distribution and the global one is the
simplified 2-Wasserstein form ``||m_j - m||^2 + ||sigma_j - sigma||^2``. The
global ``(m, sigma)`` come from a momentum buffer and act as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class StateStats:
    m: np.ndarray
    sigma: np.ndarray
    n: int


@dataclass
class DriftBuffer:
    m: np.ndarray
    sigma: np.ndarray
    alpha: float

    @classmethod
    def from_features(cls, X: np.ndarray, alpha: float) -> DriftBuffer:
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0), float(alpha))

    def copy(self) -> DriftBuffer:
        return DriftBuffer(self.m.copy(), self.sigma.copy(), self.alpha)


def batch_state_stats(X: np.ndarray, states) -> dict[int, StateStats]:
    """Mean and population std per state; states with fewer than 2 rows are skipped."""
    X = np.asarray(X, dtype=np.float64)
    states = np.asarray(states)
    out = {}
    for s in np.unique(states):
        rows = X[states == s]
        if rows.shape[0] < 2:
            continue
        out[int(s)] = StateStats(rows.mean(axis=0), rows.std(axis=0), rows.shape[0])
    return out


def drift_loss_grads(stats: dict[int, StateStats], buffer: DriftBuffer, X: np.ndarray, states):
    """Drift loss summed over present states and its gradient w.r.t. each row of ``X``.

    Where ``sigma_j`` is zero the std is not differentiable; the subgradient 0
    is used for that coordinate.
    """
    X = np.asarray(X, dtype=np.float64)
    states = np.asarray(states)
    grad = np.zeros_like(X)
    loss = 0.0
    for s, st in stats.items():
        idx = states == s
        dm = st.m - buffer.m
        ds = st.sigma - buffer.sigma
        loss += float(dm @ dm + ds @ ds)
        centered = X[idx] - st.m
        with np.errstate(divide="ignore", invalid="ignore"):
            dsig = np.where(st.sigma > 0, ds / (st.n * st.sigma), 0.0)
        grad[idx] = 2.0 * dm / st.n + 2.0 * centered * dsig
    return loss, grad


def drift_distance(X: np.ndarray, states) -> float:
    """Sum over states of the drift distance to the pooled statistics of ``X`` itself.

    Used for evaluation, where no buffer exists; every state with at least two
    rows contributes.
    """
    X = np.asarray(X, dtype=np.float64)
    ref = DriftBuffer.from_features(X, 1.0)
    loss, _ = drift_loss_grads(batch_state_stats(X, states), ref, X, states)
    return loss


def update_buffer(buffer: DriftBuffer, batch_mean, batch_sigma) -> DriftBuffer:
    """Momentum update ``v <- (1 - alpha) v + alpha v_batch``; mutates and returns ``buffer``."""
    a = buffer.alpha
    buffer.m = (1.0 - a) * buffer.m + a * np.asarray(batch_mean, dtype=np.float64)
    buffer.sigma = (1.0 - a) * buffer.sigma + a * np.asarray(batch_sigma, dtype=np.float64)
    return buffer
