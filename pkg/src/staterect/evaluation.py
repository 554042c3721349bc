"""Cross-state retrieval metrics, clustering purity and feature export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NoValidGallery
from .synthdata import Dataset, atomic_write_text


@dataclass
class EvalReport:
    rank_k: dict
    mAP: float
    per_state: dict = field(default_factory=dict)
    n_queries: int = 0
    n_gallery: int = 0

    @property
    def rank1(self) -> float:
        return self.rank_k.get(1, float("nan"))

    def to_dict(self) -> dict:
        return {
            "rank": {str(k): v for k, v in sorted(self.rank_k.items())},
            "mAP": self.mAP,
            "per_state": {str(s): v for s, v in sorted(self.per_state.items())},
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def csv_header(self) -> list[str]:
        return [f"rank{k}" for k in sorted(self.rank_k)] + ["mAP", "n_queries", "n_gallery"]

    def csv_row(self) -> list:
        return [repr(self.rank_k[k]) for k in sorted(self.rank_k)] + [
            repr(self.mAP), self.n_queries, self.n_gallery]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "rank": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "per_state": {"type": "object", "additionalProperties": {"type": "number"}},
        "n_queries": {"type": "integer"},
        "n_gallery": {"type": "integer"},
    },
    "required": ["rank", "mAP", "per_state"],
}


def retrieval_eval(X: np.ndarray, identities, states, ks: Sequence[int] = (1, 5, 10),
                   chunk: int = 512) -> EvalReport:
    """Every item queries the rest; same-identity-same-state items (and the query
    itself) are excluded from its gallery. Ranking is by inner product,
    descending, ties broken by gallery index.
    """
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(identities)
    st = np.asarray(states)
    N = X.shape[0]
    ks = sorted(set(int(k) for k in ks))
    hits = {k: 0 for k in ks}
    ap_sum = 0.0
    state_hits: dict[int, list] = {}
    gallery_sizes = 0
    for start in range(0, N, chunk):
        q = np.arange(start, min(N, start + chunk))
        S = X[q] @ X.T
        same_id = ids[q, None] == ids[None, :]
        excluded = same_id & (st[q, None] == st[None, :])
        relevant = same_id & ~excluded
        n_rel = relevant.sum(axis=1)
        if np.any(n_rel == 0):
            bad = int(q[np.argmax(n_rel == 0)])
            raise NoValidGallery(f"query {bad} has no cross-state match")
        S = np.where(excluded, -np.inf, S)
        order = np.argsort(-S, axis=1, kind="stable")
        rel_sorted = np.take_along_axis(relevant, order, axis=1)
        positions = np.arange(1, N + 1)
        first = np.argmax(rel_sorted, axis=1) + 1
        for k in ks:
            hits[k] += int(np.count_nonzero(first <= k))
        cum = np.cumsum(rel_sorted, axis=1)
        prec = np.where(rel_sorted, cum / positions, 0.0)
        ap_sum += float(np.sum(prec.sum(axis=1) / n_rel))
        gallery_sizes += int((~excluded).sum())
        for i, qi in enumerate(q):
            state_hits.setdefault(int(st[qi]), []).append(first[i] == 1)
    return EvalReport(
        rank_k={k: hits[k] / N for k in ks} if N else {k: 0.0 for k in ks},
        mAP=ap_sum / N if N else 0.0,
        per_state={s: float(np.mean(v)) for s, v in sorted(state_hits.items())},
        n_queries=N,
        n_gallery=gallery_sizes // N if N else 0,
    )


def cluster_diagnostics(assignments, identities, states=None, bins: int = 10):
    """Identity purity of a clustering and the histogram of per-class MPI.

    Returns ``(purity, histogram)``; the histogram is empty when ``states`` is None.
    """
    y = np.asarray(assignments)
    ids = np.asarray(identities)
    N = y.shape[0]
    if N == 0:
        return 0.0, []
    _, y_inv = np.unique(y, return_inverse=True)
    _, id_inv = np.unique(ids, return_inverse=True)
    table = np.zeros((y_inv.max() + 1, id_inv.max() + 1), dtype=np.int64)
    np.add.at(table, (y_inv, id_inv), 1)
    purity = float(table.max(axis=1).sum() / N)
    hist: list = []
    if states is not None:
        _, s_inv = np.unique(np.asarray(states), return_inverse=True)
        st_table = np.zeros((table.shape[0], s_inv.max() + 1), dtype=np.int64)
        np.add.at(st_table, (y_inv, s_inv), 1)
        R = st_table.max(axis=1) / st_table.sum(axis=1)
        hist = np.histogram(R, bins=bins, range=(0.0, 1.0))[0].tolist()
    return purity, hist


def features_to_csv(X: np.ndarray, identities, states) -> str:
    X = np.asarray(X, dtype=np.float64).reshape(len(states), -1) if len(states) else np.zeros((0, 0))
    d = X.shape[1] if X.ndim == 2 else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["identity", "state"] + [f"f{i + 1}" for i in range(d)])
    for i in range(len(states)):
        ident = int(identities[i])
        w.writerow(["" if ident < 0 else ident, int(states[i])] + [repr(float(v)) for v in X[i]])
    return buf.getvalue()


def export_features(head, dataset: Dataset, path) -> None:
    """Write embedded features as CSV ``identity,state,f1..fd``."""
    X = head(dataset.features) if len(dataset) else np.zeros((0, head.d))
    text = features_to_csv(X, dataset.identities, dataset.states)
    if len(dataset) == 0:
        text = ",".join(["identity", "state"] + [f"f{i + 1}" for i in range(head.d)]) + "\n"
    atomic_write_text(path, text)


def read_features_csv(path):
    """Return ``(X, identities, states)`` from an exported feature CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    X = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), d)
    ids = np.array([int(r[0]) if r[0] else -1 for r in body], dtype=np.int64)
    states = np.array([int(r[1]) for r in body], dtype=np.int64)
    return X, ids, states
