"""Numeric primitives: normalization, softmax, seeded streams, gradient checking.

All arithmetic is float64. Random streams use numpy's PCG64 bit generator seeded
through ``SeedSequence(seed, spawn_key=(stream_id,))``; PCG64's output sequence is
fixed by its published algorithm, so a given (seed, stream_id) pair reproduces the
same draws on every platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateNorm

EPS_NORM = 1e-12

# Named sub-streams so each purpose draws from an independent sequence.
STREAM_GENERATE = 0
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_KMEANS = 3
STREAM_NOISE = 4


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, stream_id)``."""
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream_id must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


def as_vec(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite values")
    return v


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Accepts a single vector or a 2-D array of row vectors. Raises
    ``DegenerateNorm`` if any row has norm at or below ``eps``.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateNorm(f"vector norm {float(norms.min()):.3g} <= {eps:g}")
    return v / norms


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def finite_diff_grad(f: Callable[[np.ndarray], float], v, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``v`` (any array shape)."""
    v = np.array(v, dtype=np.float64)
    grad = np.zeros_like(v)
    flat = v.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(v)
        flat[i] = orig - eps
        fm = f(v)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric) -> float:
    """Normwise relative error ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
