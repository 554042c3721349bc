"""``staterect`` command line: gen, train, eval and sweep."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, StateRectError
from .evaluation import export_features, retrieval_eval
from .experiments import (ABLATIONS, ExperimentSpec, apply_ablation, raw_head, run_experiment,
                          runs_to_csv, summarize, summary_to_csv)
from .model import checkpoint_to_text, load_checkpoint
from .synthdata import GenConfig, atomic_write_text, generate, half_restricted_imbalance, \
    read_dataset, write_dataset
from .trainer import TrainConfig, train

log = logging.getLogger("staterect")


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _parse_states(text: str):
    """``"4"`` -> 4, ``"4x3"`` -> (4, 3)."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad state count {text!r}; use e.g. 4 or 4x3") from None
    if any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError("state counts must be positive")
    return parts[0] if len(parts) == 1 else tuple(parts)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ks list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("ks must be positive integers")
    return ks


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    base = _load_json(args.config) if args.config else {}
    flags = {"n_identities": args.ids, "n_test_identities": args.test_ids, "J": args.states,
             "images_per_pair": args.per_pair, "dim": args.dim, "noise_sigma": args.noise,
             "label_noise_frac": args.label_noise, "rotated_dims": args.rotated_dims}
    base.update({k: v for k, v in flags.items() if v is not None})
    if "rotated_dims" not in base and "dim" in base:
        # keep the default rotation inside a smaller input space
        base["rotated_dims"] = min(GenConfig.rotated_dims, base["dim"])
    half = base.get("imbalance") == "half" or args.imbalance
    if half:
        base.pop("imbalance", None)
    cfg = GenConfig.from_dict(base)
    if half:
        cfg.imbalance = half_restricted_imbalance(cfg, args.seed)
    train_set, test_set = generate(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(train_set, out / "train.jsonl")
    write_dataset(test_set, out / "test.jsonl")
    atomic_write_text(out / "gen_config.json",
                      json.dumps({"seed": args.seed, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(f"train: {len(train_set)} examples, {len(train_set.identity_set)} identities, "
          f"{train_set.J} states")
    print(f"test: {len(test_set)} examples, {len(test_set.identity_set)} identities")
    print(f"wrote {out / 'train.jsonl'} and {out / 'test.jsonl'}")
    return 0


def cmd_train(args) -> int:
    d = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.iterations is not None:
        d["iterations"] = args.iterations
    cfg = apply_ablation(TrainConfig.from_dict(d), args.ablation)
    data = read_dataset(args.data)
    res = train(data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    atomic_write_text(ckpt, checkpoint_to_text(res.head, res.bank, res.buffer))
    atomic_write_text(out / "history.csv", res.history.to_csv())
    atomic_write_text(out / "diagnostics.jsonl", res.history.diagnostics_jsonl())
    atomic_write_text(out / "train_config.json",
                      json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"active_K: {res.bank.active_K}/{res.bank.K}")
    print(f"checkpoint: {ckpt} sha256={sha256_file(ckpt)}")
    return 0


def cmd_eval(args) -> int:
    data = read_dataset(args.data)
    if args.raw_features:
        head = raw_head(data.D)
    else:
        if not args.checkpoint:
            raise ConfigError("give --checkpoint or --raw-features")
        head, _, _ = load_checkpoint(args.checkpoint)
    if head.D != data.D:
        raise ConfigError(f"checkpoint expects D={head.D}, data has D={data.D}")
    rep = retrieval_eval(head(data.features), data.identities, data.states, args.ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", rep.to_json())
    atomic_write_text(out / "report.csv", rep.to_csv())
    if args.export_features:
        export_features(head, data, args.export_features)
    summary = " ".join(f"rank{k}={rep.rank_k[k]:.4f}" for k in sorted(rep.rank_k))
    print(f"{summary} mAP={rep.mAP:.4f} ({rep.n_queries} queries)")
    return 0


def cmd_sweep(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    records = run_experiment(spec, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(records)
    atomic_write_text(out / "runs.csv", runs_to_csv(records))
    atomic_write_text(out / "sweep.csv", summary_to_csv(rows))
    for row in rows:
        print(f"{row['variant']}: rank1 {row['rank1_mean']:.4f} +/- {row['rank1_std']:.4f} "
              f"({row['n_ok']} ok, {row['n_failed']} failed)")
    failed = sum(r["n_failed"] for r in rows)
    if failed:
        print(f"{failed} run(s) failed; see {out / 'runs.csv'}", file=sys.stderr)
    return 0


# --- parser --------------------------------------------------------------------------


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="staterect",
                                description="State-aware weakly supervised feature learning on synthetic data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a train/test dataset pair")
    g.add_argument("--config", help="GenConfig JSON; flags below override it")
    g.add_argument("--ids", type=int, help="number of training identities")
    g.add_argument("--test-ids", type=int, help="number of test identities")
    g.add_argument("--states", type=_parse_states, help="states per kind, e.g. 4 or 4x3")
    g.add_argument("--per-pair", type=int, help="images per identity-state pair")
    g.add_argument("--dim", type=int, help="input dimension D")
    g.add_argument("--noise", type=float, help="isotropic noise sigma")
    g.add_argument("--rotated-dims", type=int, help="dimension of the state-rotated subspace")
    g.add_argument("--label-noise", type=_unit_interval, help="fraction of corrupted train state labels")
    g.add_argument("--imbalance", action="store_true",
                   help="restrict half of the identities to 2 random states")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a head and surrogate bank")
    t.add_argument("--config", help="TrainConfig JSON (defaults when omitted)")
    t.add_argument("--data", required=True, help="training dataset file")
    t.add_argument("--ablation", choices=[a for a in ABLATIONS if a != "raw"], default="full-hard")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cross-state retrieval evaluation")
    e.add_argument("--checkpoint")
    e.add_argument("--raw-features", action="store_true", help="evaluate the identity head")
    e.add_argument("--data", required=True, help="test dataset file")
    e.add_argument("--ks", type=_parse_ks, default=[1, 5, 10], help="comma-separated ranks")
    e.add_argument("--export-features", help="also write embedded features as CSV")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run an experiment grid over variants and seeds")
    s.add_argument("--spec", required=True, help="ExperimentSpec JSON")
    s.add_argument("--workers", type=int, help="worker processes (capped by STATERECT_THREADS)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.raw_features and args.checkpoint:
        parser.error("--raw-features and --checkpoint are mutually exclusive")
    try:
        return args.func(args)
    except ConfigError as exc:
        if args.command == "gen":
            parser.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StateRectError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
