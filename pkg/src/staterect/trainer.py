"""End-to-end training: k-means initialization, rectified pseudo-labels, drift
regularization and SGD with momentum on the head and the surrogate bank."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .core import STREAM_BATCH, STREAM_INIT, STREAM_KMEANS, l2_normalize, rng_stream
from .errors import ConfigError, NonFiniteLoss, TooFewPoints
from .model import EmbeddingHead, SurrogateBank, surrogate_loss_and_dX
from .synthdata import Dataset
from .wdbr import (MpiStats, RectifierConfig, accumulate_counts, mpi, multi_state_rectifier,
                   plain_assign_batch, rectified_assign_batch)
from .wfdr import DriftBuffer, batch_state_stats, drift_loss_grads, update_buffer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 400
    lam: float = 10.0
    rectifier: RectifierConfig | list = field(default_factory=RectifierConfig)
    T: int = 40
    batch_size: int = 128
    iterations: int = 800
    lr: float = 0.003
    lr_milestones: list = field(default_factory=lambda: [500, 700])
    lr_decay: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.005
    scale: float = 30.0
    seed: int = 0
    enable_wdbr: bool = True
    enable_wfdr: bool = True
    hidden: Optional[int] = None
    d: Optional[int] = None
    init: str = "identity"
    stratified: bool = True
    mpi_window: str = "window"
    alpha: Optional[float] = None

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        ms = list(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        if self.lr_decay <= 0:
            raise ConfigError("lr_decay must be positive")
        if self.init not in ("identity", "random"):
            raise ConfigError("init must be 'identity' or 'random'")
        if self.mpi_window not in ("window", "full"):
            raise ConfigError("mpi_window must be 'window' or 'full'")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")

    def rectifiers(self, n_kinds: int) -> list[RectifierConfig]:
        if isinstance(self.rectifier, RectifierConfig):
            return [self.rectifier] * n_kinds
        if len(self.rectifier) != n_kinds:
            raise ConfigError(f"need {n_kinds} rectifier configs, got {len(self.rectifier)}")
        return list(self.rectifier)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("lam")
        if isinstance(self.rectifier, RectifierConfig):
            d["rectifier"] = self.rectifier.to_dict()
        else:
            d["rectifier"] = [r.to_dict() for r in self.rectifier]
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        rect = d.get("rectifier")
        if isinstance(rect, dict):
            d["rectifier"] = RectifierConfig.from_dict(rect)
        elif isinstance(rect, list):
            d["rectifier"] = [RectifierConfig.from_dict(r) for r in rect]
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


# --- k-means initialization --------------------------------------------------------


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding; returns ``(centroids, labels)``.

    An empty cluster is re-seeded at the point farthest from its assigned centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if np.unique(X, axis=0).shape[0] < K:
        raise TooFewPoints(f"need at least {K} distinct points, got {N}")
    C = np.empty((K, X.shape[1]))
    C[0] = X[rng.integers(N)]
    closest = _sq_dists(X, C[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than remaining centroids cannot happen past the check above
            i = int(rng.integers(N))
        else:
            i = int(rng.choice(N, p=closest / total))
        C[k] = X[i]
        closest = np.minimum(closest, _sq_dists(X, C[k:k + 1])[:, 0])

    labels = np.full(N, -1)
    for _ in range(max_iter):
        dist = _sq_dists(X, C)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist[np.arange(N), new]))
            new[far] = k
            dist[far] = 0.0
            counts = np.bincount(new, minlength=K)
        if np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        C = sums / counts[:, None]
    return C, labels


def kmeans_init(X: np.ndarray, K: int, rng: np.random.Generator, scale: float = 30.0) -> SurrogateBank:
    """Surrogate bank from normalized k-means centroids, all rectifiers set to 1."""
    C, _ = kmeans(X, K, rng)
    return SurrogateBank(l2_normalize(C), scale, np.ones(K))


# --- schedule and sampling ----------------------------------------------------------


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    passed = sum(1 for m in cfg.lr_milestones if iteration >= m)
    return cfg.lr / cfg.lr_decay ** passed


def epoch_order(states: np.ndarray, rng: np.random.Generator, stratified: bool) -> np.ndarray:
    """One epoch's sample order.

    The stratified order spreads every state evenly across the epoch, so a
    batch of size B holds roughly ``B * n_j / N`` examples of state ``j``.
    """
    N = states.shape[0]
    if not stratified:
        return rng.permutation(N)
    key = np.empty(N)
    for s in np.unique(states):
        idx = np.flatnonzero(states == s)
        perm = rng.permutation(idx)
        key[perm] = (np.arange(idx.size) + rng.uniform(size=idx.size)) / idx.size
    return np.argsort(key, kind="stable")


def batches(states: np.ndarray, batch_size: int, rng: np.random.Generator, stratified: bool = True):
    """Endless stream of index batches; a short epoch tail is dropped."""
    N = states.shape[0]
    B = min(batch_size, N)
    while True:
        order = epoch_order(states, rng, stratified)
        for start in range(0, N - B + 1, B):
            yield order[start:start + B]


# --- training ---------------------------------------------------------------------


@dataclass
class TrainHistory:
    L_surr: list = field(default_factory=list)
    L_drift: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    active_K: list = field(default_factory=list)
    fallbacks: list = field(default_factory=list)
    nullified_hits: list = field(default_factory=list)
    refresh_iters: list = field(default_factory=list)
    refresh_counts: list = field(default_factory=list)
    refresh_R: list = field(default_factory=list)
    refresh_active: list = field(default_factory=list)
    churn: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.L_surr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "L_surr", "L_drift", "lr", "active_K", "fallbacks"])
        for i in range(len(self)):
            w.writerow([i, repr(self.L_surr[i]), repr(self.L_drift[i]), repr(self.lr[i]),
                        self.active_K[i], self.fallbacks[i]])
        return buf.getvalue()

    def diagnostics_jsonl(self, bins: int = 10) -> str:
        lines = []
        for it, R, act in zip(self.refresh_iters, self.refresh_R, self.refresh_active):
            hist, _ = np.histogram(R, bins=bins, range=(0.0, 1.0))
            lines.append(json.dumps({"iter": it, "active_K": act, "R_histogram": hist.tolist()},
                                    separators=(",", ":")))
        return "".join(line + "\n" for line in lines)


@dataclass
class TrainResult:
    head: EmbeddingHead
    bank: SurrogateBank
    buffer: DriftBuffer
    history: TrainHistory

    def __iter__(self):
        return iter((self.head, self.bank, self.buffer, self.history))


def _initial_head(D: int, cfg: TrainConfig) -> EmbeddingHead:
    if cfg.init == "identity" and not cfg.hidden and (cfg.d is None or cfg.d == D):
        return EmbeddingHead.identity(D)
    return EmbeddingHead.random(D, cfg.d or D, rng_stream(cfg.seed, STREAM_INIT), hidden=cfg.hidden)


def _assign(bank, X, enable_wdbr):
    if enable_wdbr:
        return rectified_assign_batch(bank, X)
    return plain_assign_batch(bank, X), 0


def train(train_set: Dataset, cfg: TrainConfig, head: EmbeddingHead | None = None) -> TrainResult:
    """Run the training loop; fully determined by ``(train_set, cfg)``.

    Per batch: embed, assign (rectified or plain), take an SGD step on
    ``L_surr + lam * L_drift``, re-project the bank onto the sphere, update the
    drift buffer and the window counts. Every ``T`` batches the rectifiers are
    recomputed from the window and the window is cleared.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    U = train_set.features
    N = U.shape[0]
    kinds = train_set.kinds or (train_set.J,)
    kind_states = train_set.kind_states()
    rects = cfg.rectifiers(len(kinds))

    head = head.copy() if head is not None else _initial_head(train_set.D, cfg)
    X_all = head(U)
    bank = kmeans_init(X_all, cfg.K, rng_stream(cfg.seed, STREAM_KMEANS), cfg.scale)
    alpha = cfg.alpha if cfg.alpha is not None else min(1.0, cfg.batch_size / N)
    buffer = DriftBuffer.from_features(X_all, alpha)
    window = [MpiStats.empty(cfg.K, jk) for jk in kinds]
    history = TrainHistory()
    last_y = np.zeros(N, dtype=np.int64)
    seen_changed = seen_total = 0

    vel = {name: np.zeros_like(v) for name, v in head.params().items()}
    vel["mu"] = np.zeros_like(bank.mu)
    sampler = batches(kind_states[:, 0] if len(kinds) == 1 else train_set.states,
                      cfg.batch_size, rng_stream(cfg.seed, STREAM_BATCH), cfg.stratified)

    for it in range(cfg.iterations):
        lr = lr_at(it, cfg)
        idx = next(sampler)
        X, cache = head.forward(U[idx])
        y, fallbacks = _assign(bank, X, cfg.enable_wdbr)
        hits = int(np.count_nonzero(bank.p[y - 1] == 0)) if fallbacks == 0 else 0

        loss_s, dX, dmu = surrogate_loss_and_dX(bank, X, y - 1)
        loss_d = 0.0
        if cfg.enable_wfdr and cfg.lam > 0:
            for col in range(len(kinds)):
                s = kind_states[idx, col]
                ld, gX = drift_loss_grads(batch_state_stats(X, s), buffer, X, s)
                loss_d += ld
                dX = dX + cfg.lam * gX
        total = loss_s + cfg.lam * loss_d
        if not math.isfinite(total):
            raise NonFiniteLoss(it)

        grads = head.backward(cache, dX)
        grads["mu"] = dmu
        current = head.params()
        current["mu"] = bank.mu
        for name, g in grads.items():
            p = current[name]
            v = vel[name]
            v *= cfg.momentum
            v += g + cfg.weight_decay * p
            p -= lr * v
        bank.renormalize()

        update_buffer(buffer, X.mean(axis=0), X.std(axis=0))
        for col, stats in enumerate(window):
            accumulate_counts(stats, y, kind_states[idx, col])

        prev = last_y[idx]
        seen = prev > 0
        seen_changed += int(np.count_nonzero(prev[seen] != y[seen]))
        seen_total += int(np.count_nonzero(seen))
        last_y[idx] = y

        history.L_surr.append(loss_s)
        history.L_drift.append(loss_d)
        history.lr.append(lr)
        history.active_K.append(bank.active_K)
        history.fallbacks.append(fallbacks)
        history.nullified_hits.append(hits)

        if (it + 1) % cfg.T == 0:
            if cfg.mpi_window == "full":
                full_y, _ = _assign(bank, head(U), cfg.enable_wdbr)
                window = [accumulate_counts(MpiStats.empty(cfg.K, jk), full_y, kind_states[:, c])
                          for c, jk in enumerate(kinds)]
            Rs = [mpi(st) for st in window]
            if cfg.enable_wdbr:
                bank.p = np.asarray(multi_state_rectifier(Rs, rects), dtype=np.float64) * np.ones(cfg.K)
            history.refresh_iters.append(it + 1)
            history.refresh_counts.append([st.counts.copy() for st in window])
            # most state-dominated kind per class
            history.refresh_R.append(np.maximum.reduce(Rs))
            history.refresh_active.append(bank.active_K)
            history.churn.append(seen_changed / seen_total if seen_total else 0.0)
            seen_changed = seen_total = 0
            for st in window:
                st.reset()
            log.debug("iter %d: L_surr=%.4f L_drift=%.4f active_K=%d", it + 1, loss_s, loss_d,
                      bank.active_K)

    return TrainResult(head, bank, buffer, history)
