"""Synthetic identity data with state-induced feature distortion.

Every identity has a latent prototype on the unit sphere. An example observed
under state ``j`` is ``gain_j * (A_j c + t_j) + noise``: ``A_j`` is an
orthogonal map that scrambles part of the input space, ``t_j`` a state-specific
offset and ``gain_j < 1`` suppresses the signal relative to the noise.

Several independent state kinds (e.g. camera and illumination) can be composed;
their transforms are applied in sequence and the per-kind labels are packed
into one mixed-radix state index so the file format stays a single integer.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import STREAM_GENERATE, STREAM_NOISE, l2_normalize, rng_stream
from .errors import ConfigError, FormatError, StateRectError

FORMAT_VERSION = 1


@dataclass
class Example:
    features: np.ndarray
    state: int
    identity: Optional[int] = None


@dataclass
class Dataset:
    """Examples stored column-wise.

    ``identities`` uses -1 for "unknown". ``kinds`` is ``None`` for a single
    state kind; otherwise it lists the number of states per kind and ``J`` is
    their product.
    """

    features: np.ndarray
    states: np.ndarray
    identities: np.ndarray
    D: int
    J: int
    split: str = "train"
    kinds: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, self.D)
        self.states = np.asarray(self.states, dtype=np.int64).reshape(-1)
        self.identities = np.asarray(self.identities, dtype=np.int64).reshape(-1)
        if self.kinds is not None:
            self.kinds = tuple(int(k) for k in self.kinds)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Example:
        ident = int(self.identities[i])
        return Example(self.features[i], int(self.states[i]), None if ident < 0 else ident)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.D == other.D
            and self.J == other.J
            and self.split == other.split
            and self.kinds == other.kinds
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.identities, other.identities)
        )

    @property
    def identity_set(self) -> set[int]:
        return set(int(i) for i in np.unique(self.identities) if i >= 0)

    def kind_states(self) -> np.ndarray:
        """Per-kind state labels, shape (N, n_kinds), each column in 1..J_k."""
        return decode_states(self.states, self.kinds or (self.J,))

    def subset(self, mask) -> Dataset:
        return Dataset(self.features[mask], self.states[mask], self.identities[mask],
                       self.D, self.J, self.split, self.kinds)

    def with_states(self, states, J: int, kinds=None) -> Dataset:
        return Dataset(self.features, states, self.identities, self.D, J, self.split, kinds)


def encode_states(per_kind: np.ndarray, kinds: Sequence[int]) -> np.ndarray:
    """Pack (N, n_kinds) 1-based labels into one 1-based index, first kind most significant."""
    per_kind = np.asarray(per_kind, dtype=np.int64).reshape(len(per_kind), -1)
    out = np.zeros(per_kind.shape[0], dtype=np.int64)
    for col, jk in enumerate(kinds):
        out = out * jk + (per_kind[:, col] - 1)
    return out + 1


def decode_states(states: np.ndarray, kinds: Sequence[int]) -> np.ndarray:
    rest = np.asarray(states, dtype=np.int64) - 1
    cols = []
    for jk in reversed(tuple(kinds)):
        cols.append(rest % jk + 1)
        rest = rest // jk
    return np.stack(cols[::-1], axis=1)


# --- generation ------------------------------------------------------------------


@dataclass
class StateTransform:
    A: np.ndarray
    offset: np.ndarray
    gain: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.gain * (x @ self.A.T + self.offset)


@dataclass
class GenConfig:
    """Generator settings.

    ``J`` may be an int or a sequence of per-kind state counts. When
    ``state_transforms`` is None they are drawn from the generation stream:
    ``A_j`` rotates a random ``rotated_dims``-dimensional subspace by a Haar
    orthogonal matrix (all of R^D when ``rotated_dims == dim``), ``||t_j||``
    is uniform in ``offset_range`` and gains are evenly spaced over
    ``gain_range``, then shuffled across states.

    ``nuisance_dims``/``nuisance_sigma`` add per-image Gaussian variation in a
    fixed random subspace on top of the isotropic noise; it carries no identity
    or state information (0 disables it).

    ``imbalance`` maps a global identity index (train identities first, then
    test) to its allowed states; identities not listed appear in every state.
    """

    n_identities: int = 200
    n_test_identities: int = 100
    J: int | Sequence[int] = 4
    images_per_pair: int = 5
    dim: int = 32
    noise_sigma: float = 0.05
    nuisance_dims: int = 0
    nuisance_sigma: float = 0.0
    rotated_dims: int = 8
    offset_range: tuple[float, float] = (0.0, 1.5)
    gain_range: tuple[float, float] = (0.2, 1.0)
    state_transforms: Optional[list] = None
    imbalance: Optional[dict] = None
    label_noise_frac: float = 0.0
    require_cross_state: bool = True

    @property
    def kinds(self) -> tuple[int, ...]:
        if isinstance(self.J, (int, np.integer)):
            return (int(self.J),)
        return tuple(int(j) for j in self.J)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.kinds))

    def validate(self) -> None:
        if self.n_identities < 1 or self.n_test_identities < 0:
            raise ConfigError("identity counts must be positive")
        if any(j < 1 for j in self.kinds):
            raise ConfigError("every state kind needs at least one state")
        if self.images_per_pair < 1 or self.dim < 1:
            raise ConfigError("images_per_pair and dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.label_noise_frac <= 1.0:
            raise ConfigError("label_noise_frac must be in [0, 1]")
        if self.label_noise_frac > 0 and min(self.kinds) < 2:
            raise ConfigError("label noise needs at least two states per kind")
        if not 0 <= self.nuisance_dims <= self.dim or self.nuisance_sigma < 0:
            raise ConfigError("nuisance_dims must lie in [0, dim] and nuisance_sigma >= 0")
        if not 0 <= self.rotated_dims <= self.dim:
            raise ConfigError("rotated_dims must lie in [0, dim]")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ConfigError("gain_range must satisfy 0 < lo <= hi")
        if self.state_transforms is not None:
            need = sum(self.kinds)
            if len(self.state_transforms) != need:
                raise ConfigError(f"expected {need} state transforms, got {len(self.state_transforms)}")
        if self.imbalance:
            total = self.n_identities + self.n_test_identities
            for ident, allowed in self.imbalance.items():
                if not 0 <= int(ident) < total:
                    raise ConfigError(f"imbalance names unknown identity {ident}")
                if any(not 1 <= int(s) <= self.n_states for s in allowed):
                    raise ConfigError(f"imbalance for identity {ident} names an unknown state")
                if self.require_cross_state and len(set(allowed)) < 2:
                    raise ConfigError(f"identity {ident} restricted to fewer than 2 states")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_identities", "n_test_identities", "images_per_pair", "dim", "noise_sigma",
            "nuisance_dims", "nuisance_sigma", "rotated_dims", "label_noise_frac", "require_cross_state")}
        d["J"] = list(self.kinds) if len(self.kinds) > 1 else self.kinds[0]
        d["offset_range"] = list(self.offset_range)
        d["gain_range"] = list(self.gain_range)
        d["imbalance"] = ({str(k): list(map(int, v)) for k, v in self.imbalance.items()}
                          if self.imbalance else None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        d = dict(d)
        if d.get("imbalance"):
            d["imbalance"] = {int(k): list(v) for k, v in d["imbalance"].items()}
        for key in ("offset_range", "gain_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def default_transforms(cfg: GenConfig, rng: np.random.Generator) -> list[list[StateTransform]]:
    """Draw per-kind state transforms; returns one list per kind."""
    D, r = cfg.dim, cfg.rotated_dims
    out = []
    for jk in cfg.kinds:
        basis = random_orthogonal(D, rng)
        gains = np.linspace(cfg.gain_range[0], cfg.gain_range[1], jk) if jk > 1 else np.array([cfg.gain_range[1]])
        gains = rng.permutation(gains)
        kind = []
        for j in range(jk):
            block = np.eye(D)
            if r > 0:
                block[D - r:, D - r:] = random_orthogonal(r, rng)
            A = basis @ block @ basis.T
            direction = l2_normalize(rng.standard_normal(D))
            norm = rng.uniform(*cfg.offset_range)
            kind.append(StateTransform(A, norm * direction, float(gains[j])))
        out.append(kind)
    return out


def _split_transforms(cfg: GenConfig) -> list[list[StateTransform]]:
    flat = list(cfg.state_transforms)
    out, pos = [], 0
    for jk in cfg.kinds:
        out.append([t if isinstance(t, StateTransform) else StateTransform(
            np.asarray(t["A"], float), np.asarray(t["offset"], float), float(t["gain"]))
            for t in flat[pos:pos + jk]])
        pos += jk
    return out


def half_restricted_imbalance(cfg: GenConfig, seed: int, fraction: float = 0.5,
                              n_allowed: int = 2) -> dict[int, list[int]]:
    """Restrict ``fraction`` of all identities to ``n_allowed`` random states."""
    rng = rng_stream(seed, STREAM_GENERATE + 100)
    total = cfg.n_identities + cfg.n_test_identities
    out = {}
    for split_ids in (np.arange(cfg.n_identities), cfg.n_identities + np.arange(cfg.n_test_identities)):
        chosen = rng.permutation(split_ids)[: int(round(fraction * len(split_ids)))]
        for ident in sorted(int(i) for i in chosen):
            states = rng.choice(cfg.n_states, size=n_allowed, replace=False) + 1
            out[ident] = sorted(int(s) for s in states)
    assert all(0 <= k < total for k in out)
    return out


def _corrupt_labels(per_kind: np.ndarray, kinds, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Reset ``frac`` of each state's labels (per kind) to a uniformly chosen wrong state."""
    out = per_kind.copy()
    for col, jk in enumerate(kinds):
        for s in range(1, jk + 1):
            idx = np.flatnonzero(per_kind[:, col] == s)
            n_bad = int(round(frac * idx.size))
            if n_bad == 0:
                continue
            bad = rng.choice(idx, size=n_bad, replace=False)
            shift = rng.integers(1, jk, size=n_bad)
            out[bad, col] = (s - 1 + shift) % jk + 1
    return out


@dataclass
class World:
    """Latent generator state: per-kind transforms, identity prototypes, nuisance basis."""

    transforms: list
    prototypes: np.ndarray
    nuisance_basis: np.ndarray


def _sample_world(cfg: GenConfig, rng: np.random.Generator) -> World:
    transforms = _split_transforms(cfg) if cfg.state_transforms is not None else default_transforms(cfg, rng)
    total = cfg.n_identities + cfg.n_test_identities
    protos = l2_normalize(rng.standard_normal((total, cfg.dim)))
    nuisance_basis = random_orthogonal(cfg.dim, rng)[:, :cfg.nuisance_dims]
    return World(transforms, protos, nuisance_basis)


def sample_world(cfg: GenConfig, seed: int) -> World:
    """The latent world ``generate(cfg, seed)`` draws its examples from."""
    cfg.validate()
    return _sample_world(cfg, rng_stream(seed, STREAM_GENERATE))


def generate(cfg: GenConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Generate a (train, test) pair with disjoint identities.

    Train identities are ``0..P-1`` and test identities follow them. Label
    corruption applies only to the train split.
    """
    cfg.validate()
    rng = rng_stream(seed, STREAM_GENERATE)
    noise_rng = rng_stream(seed, STREAM_NOISE)
    kinds = cfg.kinds
    world = _sample_world(cfg, rng)
    transforms, protos, nuisance_basis = world.transforms, world.prototypes, world.nuisance_basis
    total = cfg.n_identities + cfg.n_test_identities
    all_states = np.arange(1, cfg.n_states + 1)
    per_kind_all = decode_states(all_states, kinds)

    # Transformed prototype for every (identity, state) pair.
    signal = np.repeat(protos[:, None, :], cfg.n_states, axis=1)
    for col in range(len(kinds)):
        for s in range(cfg.n_states):
            signal[:, s] = transforms[col][per_kind_all[s, col] - 1].apply(signal[:, s])

    imbalance = cfg.imbalance or {}
    splits = []
    for split, ids in (("train", range(cfg.n_identities)),
                       ("test", range(cfg.n_identities, total))):
        feats, states, idents = [], [], []
        for ident in ids:
            allowed = imbalance.get(ident, all_states)
            for s in sorted(int(a) for a in allowed):
                base = signal[ident, s - 1]
                noise = noise_rng.standard_normal((cfg.images_per_pair, cfg.dim)) * cfg.noise_sigma
                if cfg.nuisance_dims:
                    z = noise_rng.standard_normal((cfg.images_per_pair, cfg.nuisance_dims))
                    noise = noise + cfg.nuisance_sigma * z @ nuisance_basis.T
                feats.append(base + noise)
                states.extend([s] * cfg.images_per_pair)
                idents.extend([ident] * cfg.images_per_pair)
        feats = np.concatenate(feats) if feats else np.zeros((0, cfg.dim))
        states = np.asarray(states, dtype=np.int64)
        if split == "train" and cfg.label_noise_frac > 0:
            per_kind = _corrupt_labels(decode_states(states, kinds), kinds, cfg.label_noise_frac, rng)
            states = encode_states(per_kind, kinds)
        splits.append(Dataset(feats, states, np.asarray(idents, dtype=np.int64), cfg.dim,
                              cfg.n_states, split, kinds if len(kinds) > 1 else None))
    return splits[0], splits[1]


def true_states(cfg: GenConfig, train: Dataset) -> np.ndarray:
    """State labels of ``train`` before label corruption (regenerated from cfg order)."""
    imbalance = cfg.imbalance or {}
    all_states = np.arange(1, cfg.n_states + 1)
    out = []
    for ident in range(cfg.n_identities):
        for s in sorted(int(a) for a in imbalance.get(ident, all_states)):
            out.extend([s] * cfg.images_per_pair)
    return np.asarray(out, dtype=np.int64)


# --- file format -----------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_to_text(ds: Dataset) -> str:
    header = {"version": FORMAT_VERSION, "D": ds.D, "J": ds.J, "split": ds.split}
    if ds.kinds is not None:
        header["kinds"] = list(ds.kinds)
    lines = [_dumps(header)]
    for i in range(len(ds)):
        ident = int(ds.identities[i])
        lines.append(_dumps({
            "features": [float(v) for v in ds.features[i]],
            "state": int(ds.states[i]),
            "identity": ident if ident >= 0 else None,
        }))
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_text(ds))


def read_dataset(path) -> Dataset:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise StateRectError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise FormatError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header JSON: {exc}", line=1) from exc
    for key in ("version", "D", "J", "split"):
        if key not in header:
            raise FormatError(f"header missing {key!r}", line=1)
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {header['version']}", line=1)
    if header["split"] not in ("train", "test"):
        raise FormatError(f"bad split {header['split']!r}", line=1)
    D, J = int(header["D"]), int(header["J"])
    kinds = header.get("kinds")
    if kinds is not None and int(np.prod(kinds)) != J:
        raise FormatError("kinds do not multiply to J", line=1)

    feats, states, idents = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad JSON: {exc}", line=lineno) from exc
        if not isinstance(rec, dict):
            raise FormatError("record is not an object", line=lineno)
        for key in ("features", "state", "identity"):
            if key not in rec:
                raise FormatError(f"record missing {key!r}", line=lineno)
        f = rec["features"]
        if not isinstance(f, list) or len(f) != D:
            raise FormatError(f"features must be a list of {D} numbers", line=lineno)
        s = rec["state"]
        if not isinstance(s, int) or isinstance(s, bool) or not 1 <= s <= J:
            raise FormatError(f"state must be an integer in 1..{J}", line=lineno)
        ident = rec["identity"]
        if ident is not None and (not isinstance(ident, int) or ident < 0):
            raise FormatError("identity must be a nonnegative integer or null", line=lineno)
        try:
            row = np.asarray(f, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise FormatError("features must be numbers", line=lineno) from exc
        if not np.all(np.isfinite(row)):
            raise FormatError("non-finite feature value", line=lineno)
        feats.append(row)
        states.append(s)
        idents.append(-1 if ident is None else ident)
    features = np.stack(feats) if feats else np.zeros((0, D))
    return Dataset(features, states, idents, D, J, header["split"],
                   tuple(kinds) if kinds is not None else None)


DATASET_HEADER_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": 1},
        "D": {"type": "integer", "minimum": 1},
        "J": {"type": "integer", "minimum": 1},
        "split": {"enum": ["train", "test"]},
        "kinds": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    },
    "required": ["version", "D", "J", "split"],
    "additionalProperties": False,
}

DATASET_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "features": {"type": "array", "items": {"type": "number"}},
        "state": {"type": "integer", "minimum": 1},
        "identity": {"type": ["integer", "null"], "minimum": 0},
    },
    "required": ["features", "state", "identity"],
    "additionalProperties": False,
}
