"""Experiment specs, ablation presets and the seed/variant runner behind ``sweep``."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import l2_normalize
from .errors import ConfigError, StateRectError
from .evaluation import retrieval_eval
from .model import EmbeddingHead
from .synthdata import GenConfig, generate, half_restricted_imbalance, read_dataset
from .trainer import TrainConfig, train
from .wdbr import RectifierConfig
from .wfdr import drift_distance

log = logging.getLogger(__name__)

SOFT_A = 5.0

# name -> (enable_wdbr, enable_wfdr, rectifier kind); "raw" skips training entirely
ABLATIONS = {
    "raw": None,
    "basic": (False, False, None),
    "wdbr-hard": (True, False, "hard"),
    "wdbr-soft": (True, False, "soft"),
    "wfdr": (False, True, None),
    "full-hard": (True, True, "hard"),
    "full-soft": (True, True, "soft"),
}


def _retune(rect: RectifierConfig, kind: Optional[str]) -> RectifierConfig:
    if kind == "hard":
        return RectifierConfig(math.inf, rect.b)
    if kind == "soft":
        return RectifierConfig(SOFT_A, rect.b)
    return rect


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    """Return a copy of ``cfg`` with the switches of a named ablation.

    Soft variants use ``a = 5`` and hard ones ``a = inf``; the threshold ``b``
    is kept from ``cfg``.
    """
    if name not in ABLATIONS or ABLATIONS[name] is None:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    wdbr, wfdr, kind = ABLATIONS[name]
    if isinstance(cfg.rectifier, RectifierConfig):
        rect = _retune(cfg.rectifier, kind)
    else:
        rect = [_retune(r, kind) for r in cfg.rectifier]
    return replace(cfg, enable_wdbr=wdbr, enable_wfdr=wfdr, rectifier=rect)


@dataclass
class Variant:
    name: str
    ablation: str = "full-hard"
    train: dict = field(default_factory=dict)
    gen: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    """One sweep: a base generator (or fixed dataset files), a base training
    config, the retrieval ks, the variants and the seeds."""

    gen: Optional[dict] = None
    data: Optional[dict] = None
    train: dict = field(default_factory=dict)
    ks: list = field(default_factory=lambda: [1, 5, 10])
    variants: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if not self.variants:
            raise ConfigError("experiment has no variants")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")
        if not self.seeds:
            raise ConfigError("experiment has no seeds")
        if (self.gen is None) == (self.data is None):
            raise ConfigError("give exactly one of 'gen' or 'data'")
        if self.data is not None:
            for key in ("train", "test"):
                if key not in self.data:
                    raise ConfigError(f"data.{key} is missing")
                if not Path(self.data[key]).exists():
                    raise ConfigError(f"data file not found: {self.data[key]}")
        for v in self.variants:
            if v.ablation not in ABLATIONS:
                raise ConfigError(f"variant {v.name!r}: unknown ablation {v.ablation!r}")
            if v.gen and self.data is not None:
                raise ConfigError(f"variant {v.name!r} overrides gen but the spec uses fixed data")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        variants = []
        for v in d.pop("variants", []):
            if not isinstance(v, dict) or "name" not in v:
                raise ConfigError("each variant needs a name")
            unknown = set(v) - {"name", "ablation", "train", "gen"}
            if unknown:
                raise ConfigError(f"variant {v['name']!r}: unknown keys {sorted(unknown)}")
            variants.append(Variant(v["name"], v.get("ablation", "full-hard"),
                                    dict(v.get("train", {})), dict(v.get("gen", {}))))
        unknown = set(d) - {"gen", "data", "train", "ks", "variants", "seeds"}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        spec = cls(variants=variants, **d)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def build_gen_config(base: dict, overrides: dict, seed: int) -> GenConfig:
    """GenConfig from dicts; ``"imbalance": "half"`` expands to the half-restricted map."""
    d = {**base, **overrides}
    half = d.get("imbalance") == "half"
    if half:
        d.pop("imbalance")
    cfg = GenConfig.from_dict(d)
    if half:
        cfg.imbalance = half_restricted_imbalance(cfg, seed)
    return cfg


def evaluate(X, test, ks) -> dict:
    rep = retrieval_eval(X, test.identities, test.states, ks)
    return {"rank": rep.rank_k, "mAP": rep.mAP, "drift": drift_distance(X, test.states)}


def run_one(train_set, test_set, cfg: TrainConfig, ablation: str, ks) -> dict:
    """Train (unless ``raw``) and evaluate one configuration; returns a flat record."""
    start = time.perf_counter()
    if ablation == "raw":
        X = l2_normalize(test_set.features)
        out = evaluate(X, test_set, ks)
        out.update(active_K=float("nan"), fallbacks=0, nullified_hits=0)
    else:
        res = train(train_set, apply_ablation(cfg, ablation))
        out = evaluate(res.head(test_set.features), test_set, ks)
        h = res.history
        out.update(active_K=res.bank.active_K, fallbacks=int(sum(h.fallbacks)),
                   nullified_hits=int(sum(h.nullified_hits)))
    out["seconds"] = time.perf_counter() - start
    return out


def _task(args):
    spec_dict, variant_name, seed = args
    spec = ExperimentSpec.from_dict(spec_dict)
    v = next(v for v in spec.variants if v.name == variant_name)
    try:
        if spec.data is not None:
            tr, te = read_dataset(spec.data["train"]), read_dataset(spec.data["test"])
        else:
            tr, te = generate(build_gen_config(spec.gen, v.gen, seed), seed)
        cfg = TrainConfig.from_dict({**spec.train, **v.train, "seed": seed})
        rec = run_one(tr, te, cfg, v.ablation, spec.ks)
        rec["status"] = "ok"
    except (StateRectError, ValueError, OSError) as exc:
        log.warning("variant %s seed %s failed: %s", variant_name, seed, exc)
        rec = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    rec.update(variant=variant_name, seed=seed)
    return rec


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "gen": spec.gen, "data": spec.data, "train": spec.train, "ks": list(spec.ks),
        "seeds": list(spec.seeds),
        "variants": [{"name": v.name, "ablation": v.ablation, "train": v.train, "gen": v.gen}
                     for v in spec.variants],
    }


def worker_cap() -> int:
    raw = os.environ.get("STATERECT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> list[dict]:
    """Run every (variant, seed) pair. Failures are recorded, not raised.

    Results come back in (variant, seed) order whatever the worker count, and
    each run is deterministic, so the output does not depend on parallelism.
    """
    spec.validate()
    cap = worker_cap()
    n = min(workers or cap, cap)
    sd = spec_to_dict(spec)
    tasks = [(sd, v.name, s) for v in spec.variants for s in spec.seeds]
    if n <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_task, tasks))


RUN_COLUMNS = ["variant", "seed", "status", "rank1", "mAP", "active_K", "drift", "error"]
SUMMARY_COLUMNS = ["variant", "n_ok", "n_failed", "rank1_mean", "rank1_std", "mAP_mean", "mAP_std",
                   "active_K_mean", "active_K_std", "drift_mean", "drift_std"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def runs_to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for r in records:
        ok = r["status"] == "ok"
        w.writerow([r["variant"], r["seed"], r["status"],
                    _fmt(r["rank"][1]) if ok and 1 in r["rank"] else "",
                    _fmt(r["mAP"]) if ok else "",
                    _fmt(r["active_K"]) if ok else "",
                    _fmt(r["drift"]) if ok else "",
                    r.get("error", "")])
    return buf.getvalue()


def summarize(records: list[dict]) -> list[dict]:
    """Mean and population std per variant over successful runs, in first-seen order."""
    order: list[str] = []
    groups: dict[str, list[dict]] = {}
    for r in records:
        if r["variant"] not in groups:
            order.append(r["variant"])
            groups[r["variant"]] = []
        groups[r["variant"]].append(r)
    rows = []
    for name in order:
        ok = [r for r in groups[name] if r["status"] == "ok"]
        row = {"variant": name, "n_ok": len(ok), "n_failed": len(groups[name]) - len(ok)}
        for key, get in (("rank1", lambda r: r["rank"].get(1, float("nan"))),
                         ("mAP", lambda r: r["mAP"]),
                         ("active_K", lambda r: r["active_K"]),
                         ("drift", lambda r: r["drift"])):
            vals = np.array([get(r) for r in ok], dtype=np.float64)
            if vals.size == 0 or np.all(np.isnan(vals)):
                row[f"{key}_mean"] = row[f"{key}_std"] = float("nan")
            else:
                row[f"{key}_mean"] = float(np.nanmean(vals))
                row[f"{key}_std"] = float(np.nanstd(vals))
        rows.append(row)
    return rows


def summary_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def raw_head(D: int) -> EmbeddingHead:
    """The identity head, i.e. cosine retrieval on the raw inputs."""
    return EmbeddingHead.identity(D)
