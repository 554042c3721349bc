"""Embedding head, surrogate classifier bank and the surrogate classification loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import l2_normalize, log_softmax
from .errors import AssignmentOutOfRange, FormatError

CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingHead:
    """``x = normalize(W h + b)`` with ``h = u`` or ``h = tanh(W1 u + b1)``."""

    W: np.ndarray
    b: np.ndarray
    W1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None

    @property
    def D(self) -> int:
        return (self.W1 if self.W1 is not None else self.W).shape[1]

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def has_hidden(self) -> bool:
        return self.W1 is not None

    @classmethod
    def identity(cls, D: int) -> EmbeddingHead:
        return cls(np.eye(D), np.zeros(D))

    @classmethod
    def random(cls, D: int, d: int, rng: np.random.Generator, hidden: int | None = None,
               scale: float = 1.0) -> EmbeddingHead:
        if hidden:
            W1 = rng.standard_normal((hidden, D)) * scale / np.sqrt(D)
            b1 = rng.standard_normal(hidden) * 0.1
            W = rng.standard_normal((d, hidden)) * scale / np.sqrt(hidden)
            return cls(W, rng.standard_normal(d) * 0.1, W1, b1)
        W = rng.standard_normal((d, D)) * scale / np.sqrt(D)
        return cls(W, rng.standard_normal(d) * 0.1)

    def params(self) -> dict[str, np.ndarray]:
        p = {"W": self.W, "b": self.b}
        if self.has_hidden:
            p["W1"] = self.W1
            p["b1"] = self.b1
        return p

    def copy(self) -> EmbeddingHead:
        return EmbeddingHead(self.W.copy(), self.b.copy(),
                             None if self.W1 is None else self.W1.copy(),
                             None if self.b1 is None else self.b1.copy())

    def forward(self, U: np.ndarray) -> tuple[np.ndarray, dict]:
        """Embed rows of ``U``; returns unit features and a cache for ``backward``."""
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        if self.has_hidden:
            H = np.tanh(U @ self.W1.T + self.b1)
        else:
            H = U
        Z = H @ self.W.T + self.b
        norms = np.linalg.norm(Z, axis=1, keepdims=True)
        X = l2_normalize(Z)
        return X, {"U": U, "H": H, "X": X, "norms": norms}

    def __call__(self, U: np.ndarray) -> np.ndarray:
        return self.forward(U)[0]

    def backward(self, cache: dict, dX: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/dX``, using the exact normalization Jacobian."""
        X, norms = cache["X"], cache["norms"]
        dZ = (dX - X * np.sum(dX * X, axis=1, keepdims=True)) / norms
        grads = {"W": dZ.T @ cache["H"], "b": dZ.sum(axis=0)}
        if self.has_hidden:
            dA = (dZ @ self.W) * (1.0 - cache["H"] ** 2)
            grads["W1"] = dA.T @ cache["U"]
            grads["b1"] = dA.sum(axis=0)
        return grads


def embed(head: EmbeddingHead, u) -> np.ndarray:
    """Embed one input vector (or a batch of rows)."""
    u = np.asarray(u, dtype=np.float64)
    X = head(u)
    return X[0] if u.ndim == 1 else X


@dataclass
class SurrogateBank:
    mu: np.ndarray
    scale: float = 30.0
    p: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.p is None:
            self.p = np.ones(self.K)
        self.p = np.asarray(self.p, dtype=np.float64)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> SurrogateBank:
        return SurrogateBank(self.mu.copy(), self.scale, self.p.copy())

    def renormalize(self) -> None:
        self.mu = l2_normalize(self.mu)

    @property
    def active_K(self) -> int:
        return int(np.count_nonzero(self.p > 0))


def logits(bank: SurrogateBank, x) -> np.ndarray:
    """Scaled cosine logits ``scale * x . mu_k`` for one feature or a batch."""
    return bank.scale * (np.asarray(x, dtype=np.float64) @ bank.mu.T)


def surrogate_loss_and_dX(bank: SurrogateBank, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch with gradients w.r.t. features and ``mu``.

    ``y`` holds 0-based class indices.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= bank.K):
        raise AssignmentOutOfRange(f"assignment outside 0..{bank.K - 1}")
    n = X.shape[0]
    Z = logits(bank, X)
    logp = log_softmax(Z)
    loss = -float(np.mean(logp[np.arange(n), y]))
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    G *= bank.scale / n
    dX = G @ bank.mu
    dmu = G.T @ X
    return loss, dX, dmu


def surrogate_loss_grads(head: EmbeddingHead, bank: SurrogateBank, U, assignments):
    """Surrogate loss for a batch of inputs with gradients for the head and ``mu``.

    ``assignments`` are 1-based class labels. Returns
    ``(loss, head_grads, grad_mu)``.
    """
    y = np.asarray(assignments, dtype=np.int64) - 1
    if y.size == 0:
        raise ValueError("empty batch")
    X, cache = head.forward(U)
    loss, dX, dmu = surrogate_loss_and_dX(bank, X, y)
    return loss, head.backward(cache, dX), dmu


# --- checkpoints -----------------------------------------------------------------


def _tolist(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def checkpoint_dict(head: EmbeddingHead, bank: SurrogateBank, buffer=None) -> dict:
    hidden = None
    if head.has_hidden:
        hidden = {"W": _tolist(head.W1), "b": _tolist(head.b1)}
    out = {
        "version": CHECKPOINT_VERSION,
        "D": head.D,
        "d": head.d,
        "K": bank.K,
        "scale": float(bank.scale),
        "W": _tolist(head.W),
        "b": _tolist(head.b),
        "hidden": hidden,
        "mu": _tolist(bank.mu),
        "p": _tolist(bank.p),
    }
    if buffer is not None:
        out["buffer"] = {"m": _tolist(buffer.m), "sigma": _tolist(buffer.sigma),
                         "alpha": float(buffer.alpha)}
    return out


def checkpoint_to_text(head, bank, buffer=None) -> str:
    return json.dumps(checkpoint_dict(head, bank, buffer), separators=(",", ":"), allow_nan=False) + "\n"


def load_checkpoint(path):
    """Return ``(head, bank, buffer_or_None)`` from a checkpoint file."""
    from .wfdr import DriftBuffer

    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad checkpoint JSON: {exc}") from exc
    missing = [k for k in ("version", "D", "d", "K", "scale", "W", "b", "hidden", "mu", "p") if k not in d]
    if missing:
        raise FormatError(f"checkpoint missing {missing}")
    if d["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {d['version']}")
    W1 = b1 = None
    if d["hidden"] is not None:
        W1, b1 = np.asarray(d["hidden"]["W"], float), np.asarray(d["hidden"]["b"], float)
    head = EmbeddingHead(np.asarray(d["W"], float).reshape(d["d"], -1), np.asarray(d["b"], float), W1, b1)
    if head.D != d["D"]:
        raise FormatError("checkpoint D does not match W")
    mu = np.asarray(d["mu"], float).reshape(d["K"], d["d"]) if d["K"] else np.zeros((0, d["d"]))
    bank = SurrogateBank(mu, float(d["scale"]), np.asarray(d["p"], float))
    buffer = None
    if d.get("buffer"):
        b = d["buffer"]
        buffer = DriftBuffer(np.asarray(b["m"], float), np.asarray(b["sigma"], float), float(b["alpha"]))
    return head, bank, buffer


CHECKPOINT_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": 1},
        "D": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 0},
        "scale": {"type": "number"},
        "W": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "b": {"type": "array", "items": {"type": "number"}},
        "hidden": {"oneOf": [{"type": "null"}, {
            "type": "object", "required": ["W", "b"],
            "properties": {"W": {"type": "array"}, "b": {"type": "array"}}}]},
        "mu": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "p": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "buffer": {"type": "object", "required": ["m", "sigma", "alpha"]},
    },
    "required": ["version", "D", "d", "K", "scale", "W", "b", "hidden", "mu", "p"],
}
