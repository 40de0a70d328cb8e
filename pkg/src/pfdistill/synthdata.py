"""Seeded synthetic CTR/CVR data with regular, behavior and privileged features.

Users and items carry standard-normal latent vectors. The label logit is a
scaled latent inner product plus a (negative) price effect. Regular features
are discretized noisy views of the latents and of price; privileged features
are either per-coordinate user-item interactions (CTR) or post-event signals
(CVR) whose dwell component is confounded with price.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import EVENT_FIELDS, BehaviorEvent, BehaviorSequence
from .tensor_core import sigmoid

FORMAT_TAG = "pfdistill-jsonl/1"
ROLES = ("regular_user", "regular_item", "behavior", "privileged")
# bucketed: stored as bucket ids (boundaries kept for provenance);
# numeric: stored raw, bucketed at model input.
KINDS = ("categorical", "bucketed", "numeric", "binary")
RESERVED_KEYS = ("index", "label", "true_propensity")


class SchemaError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


def discretize(value, boundaries) -> np.ndarray | int:
    """Bucket id = number of boundaries <= value (left-closed buckets)."""
    b = np.asarray(boundaries, dtype=np.float64)
    if b.size > 1 and not np.all(np.diff(b) > 0):
        raise SchemaError("discretization boundaries must be strictly increasing")
    out = np.searchsorted(b, value, side="right")
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def quantile_boundaries(values: np.ndarray, buckets: int) -> list[float]:
    qs = np.quantile(np.asarray(values, dtype=np.float64), np.arange(1, buckets) / buckets)
    return [float(x) for x in np.unique(qs)]


@dataclass(frozen=True)
class FeatureDecl:
    name: str
    vocab_size: int
    role: str
    group: str = ""
    kind: str = "categorical"
    boundaries: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "numeric" and self.boundaries is None:
            raise SchemaError(f"{self.name}: numeric features need boundaries")
        if self.role not in ROLES:
            raise SchemaError(f"{self.name}: unknown role {self.role!r}")
        if self.boundaries is not None:
            b = np.asarray(self.boundaries)
            if b.size > 1 and not np.all(np.diff(b) > 0):
                raise SchemaError(f"{self.name}: boundaries must be strictly increasing")
            if self.vocab_size != len(self.boundaries) + 1:
                raise SchemaError(f"{self.name}: vocab_size must be len(boundaries) + 1")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureDecl, ...]
    max_len: int

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")

    def __getitem__(self, name: str) -> FeatureDecl:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def by_role(self, role: str, group: str | None = None) -> list[FeatureDecl]:
        return [f for f in self.features if f.role == role and (group is None or f.group == group)]

    def privileged(self, task: str) -> list[FeatureDecl]:
        return self.by_role("privileged", PRIVILEGED_GROUP[task])

    def encode(self, name: str, values: np.ndarray) -> np.ndarray:
        """Model-ready ids for a column (numeric features get bucketed)."""
        decl = self[name]
        if decl.kind == "numeric":
            return discretize(values, decl.boundaries)
        return np.asarray(values, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"max_len": self.max_len, "features": [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(f).items()}
            for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = []
        for f in d["features"]:
            f = dict(f)
            if f.get("boundaries") is not None:
                f["boundaries"] = tuple(float(x) for x in f["boundaries"])
            feats.append(FeatureDecl(**f))
        return cls(tuple(feats), int(d["max_len"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


PRIVILEGED_GROUP = {"ctr": "interacted", "cvr": "post_event"}


@dataclass
class GeneratorConfig:
    num_users: int = 2000
    num_items: int = 500
    num_records: int = 220_000
    split: int = 200_000
    latent_dim: int = 8
    visible_dims: int = 4
    num_categories: int = 20
    noise_sigma: float = 0.5
    feature_noise: float = 1.0
    confound_alpha: float = 1.5
    price_beta: float = -0.8
    signal_scale: float = 1.5
    logit_bias: float = -0.5
    behavior_len_range: tuple[int, int] = (2, 10)
    max_len: int = 10
    top_items: int = 20
    buckets: int = 8
    dwell_buckets: int = 16
    task: str = "cvr"
    seed: int = 0

    def __post_init__(self):
        self.behavior_len_range = tuple(int(x) for x in self.behavior_len_range)
        for name in ("num_users", "num_items", "num_records", "latent_dim", "num_categories",
                     "max_len", "top_items", "buckets", "dwell_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.split < self.num_records:
            raise ValueError("split must leave records on both sides")
        if self.noise_sigma < 0 or self.feature_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        lo, hi = self.behavior_len_range
        if not 0 <= lo <= hi <= self.max_len:
            raise ValueError("behavior_len_range must satisfy 0 <= lo <= hi <= max_len")
        if not 1 <= self.visible_dims <= self.latent_dim:
            raise ValueError("visible_dims must be in [1, latent_dim]")
        if self.top_items > self.num_items:
            raise ValueError("top_items cannot exceed num_items")
        if self.task not in PRIVILEGED_GROUP:
            raise ValueError(f"task must be one of {sorted(PRIVILEGED_GROUP)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["behavior_len_range"] = list(self.behavior_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Record:
    index: int
    user_id: int
    item_id: int
    user_feats: list[int]
    item_feats: list[int]
    behavior: BehaviorSequence
    interacted_feats: list[int]
    post_event_feats: list[float]
    label: int
    true_propensity: float


@dataclass
class Dataset:
    """Columnar records. ``cols`` holds one array per non-behavior feature."""

    schema: FeatureSchema
    index: np.ndarray
    label: np.ndarray
    propensity: np.ndarray
    cols: dict[str, np.ndarray]
    behavior: dict[str, np.ndarray]
    behavior_len: np.ndarray
    config: dict = field(default_factory=dict)
    split_name: str = "all"

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.schema, self.index[idx], self.label[idx], self.propensity[idx],
                       {k: v[idx] for k, v in self.cols.items()},
                       {k: v[idx] for k, v in self.behavior.items()},
                       self.behavior_len[idx], self.config, self.split_name)

    def batch(self, idx) -> dict:
        """Model-ready arrays for the given rows (numeric features bucketed)."""
        idx = np.asarray(idx)
        feats = {name: self.schema.encode(name, col[idx]) for name, col in self.cols.items()}
        return {"feats": feats,
                "raw": {name: col[idx] for name, col in self.cols.items()},
                "events": {f: self.behavior["beh_" + f][idx] for f in EVENT_FIELDS},
                "lengths": self.behavior_len[idx],
                "label": self.label[idx].astype(np.float64),
                "index": self.index[idx]}

    def record(self, i: int) -> Record:
        s = self.schema
        n = int(self.behavior_len[i])
        events = [BehaviorEvent(*(int(self.behavior["beh_" + f][i, j]) for f in EVENT_FIELDS))
                  for j in range(n)]
        return Record(
            index=int(self.index[i]),
            user_id=int(self.cols["user_id"][i]),
            item_id=int(self.cols["item_id"][i]),
            user_feats=[int(self.cols[f.name][i]) for f in s.by_role("regular_user")],
            item_feats=[int(self.cols[f.name][i]) for f in s.by_role("regular_item")],
            behavior=BehaviorSequence(events),
            interacted_feats=[int(self.cols[f.name][i]) for f in s.by_role("privileged", "interacted")],
            post_event_feats=[float(self.cols[f.name][i]) for f in s.by_role("privileged", "post_event")],
            label=int(self.label[i]),
            true_propensity=float(self.propensity[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays_equal = (
            np.array_equal(self.index, other.index) and np.array_equal(self.label, other.label)
            and np.array_equal(self.propensity, other.propensity)
            and np.array_equal(self.behavior_len, other.behavior_len)
            and self.cols.keys() == other.cols.keys()
            and all(np.array_equal(v, other.cols[k]) for k, v in self.cols.items())
            and self.behavior.keys() == other.behavior.keys()
            and all(np.array_equal(v, other.behavior[k]) for k, v in self.behavior.items()))
        return arrays_equal and self.schema == other.schema and self.config == other.config


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class _World:
    user_latent: np.ndarray
    item_latent: np.ndarray
    price_z: np.ndarray
    price: np.ndarray
    category: np.ndarray
    user_view: np.ndarray
    item_view: np.ndarray
    top_items: np.ndarray
    top_dwell: np.ndarray


def _world(cfg: GeneratorConfig, rng: np.random.Generator) -> _World:
    d = cfg.latent_dim
    u = rng.standard_normal((cfg.num_users, d))
    v = rng.standard_normal((cfg.num_items, d))
    price_z = rng.standard_normal(cfg.num_items)
    price = np.round(np.exp(3.0 + 0.8 * price_z), 2)
    cat_proj = rng.standard_normal((d, cfg.num_categories))
    category = np.argmax(v @ cat_proj + 0.5 * rng.standard_normal((cfg.num_items, cfg.num_categories)),
                         axis=1)
    k = cfg.visible_dims
    user_view = u[:, :k] + cfg.feature_noise * rng.standard_normal((cfg.num_users, k))
    item_view = v[:, :k] + cfg.feature_noise * rng.standard_normal((cfg.num_items, k))
    affinity = cfg.signal_scale * (u @ v.T) / np.sqrt(d) + cfg.price_beta * price_z[None, :]
    top = np.argsort(-affinity, axis=1, kind="stable")[:, :cfg.top_items]
    # dwell bucket of a history event falls with the item's affinity rank
    top_dwell = np.minimum(4, np.arange(cfg.top_items) * 5 // cfg.top_items)[::-1].copy()
    return _World(u, v, price_z, price, category, user_view, item_view, top, top_dwell)


def _build_schema(cfg: GeneratorConfig, raw: dict[str, np.ndarray], train: slice) -> FeatureSchema:
    b = cfg.buckets
    feats = [FeatureDecl("user_id", cfg.num_users, "regular_user", "user")]
    for j in range(cfg.visible_dims):
        bounds = tuple(quantile_boundaries(raw[f"user_f{j}"][train], b))
        feats.append(FeatureDecl(f"user_f{j}", len(bounds) + 1, "regular_user", "user", "bucketed", bounds))
    feats.append(FeatureDecl("item_id", cfg.num_items, "regular_item", "item"))
    feats.append(FeatureDecl("category", cfg.num_categories, "regular_item", "item"))
    bounds = tuple(quantile_boundaries(raw["price_bucket"][train], b))
    feats.append(FeatureDecl("price_bucket", len(bounds) + 1, "regular_item", "item", "bucketed", bounds))
    for j in range(cfg.visible_dims):
        bounds = tuple(quantile_boundaries(raw[f"item_f{j}"][train], b))
        feats.append(FeatureDecl(f"item_f{j}", len(bounds) + 1, "regular_item", "item", "bucketed", bounds))
    feats += [
        FeatureDecl("beh_item_id", cfg.num_items, "behavior", "behavior"),
        FeatureDecl("beh_category_id", cfg.num_categories, "behavior", "behavior"),
        FeatureDecl("beh_recency_bucket", 5, "behavior", "behavior"),
        FeatureDecl("beh_dwell_bucket", 5, "behavior", "behavior"),
    ]
    for j in range(cfg.latent_dim):
        bounds = tuple(quantile_boundaries(raw[f"inter_{j}"][train], b))
        feats.append(FeatureDecl(f"inter_{j}", len(bounds) + 1, "privileged", "interacted", "bucketed", bounds))
    bounds = tuple(quantile_boundaries(raw["dwell"][train], cfg.dwell_buckets))
    feats.append(FeatureDecl("dwell", len(bounds) + 1, "privileged", "post_event", "numeric", bounds))
    feats.append(FeatureDecl("viewed_comments", 2, "privileged", "post_event", "binary"))
    return FeatureSchema(tuple(feats), cfg.max_len)


def generate(cfg: GeneratorConfig) -> tuple[Dataset, Dataset]:
    """Generate ``(train, test)`` splits; deterministic in ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    w = _world(cfg, rng)
    n, d = cfg.num_records, cfg.latent_dim
    users = rng.integers(0, cfg.num_users, n)
    items = rng.integers(0, cfg.num_items, n)
    uu, vv = w.user_latent[users], w.item_latent[items]
    pz = w.price_z[items]
    logit = cfg.signal_scale * (uu * vv).sum(axis=1) / np.sqrt(d) + cfg.price_beta * pz + cfg.logit_bias
    propensity = sigmoid(logit)
    label = (rng.random(n) < propensity).astype(np.int64)

    raw: dict[str, np.ndarray] = {}
    for j in range(cfg.visible_dims):
        raw[f"user_f{j}"] = w.user_view[users, j]
        raw[f"item_f{j}"] = w.item_view[items, j]
    raw["price_bucket"] = pz
    inter = cfg.signal_scale * uu * vv / np.sqrt(d) + cfg.noise_sigma * rng.standard_normal((n, d))
    for j in range(d):
        raw[f"inter_{j}"] = inter[:, j]
    raw["dwell"] = logit + cfg.confound_alpha * pz + cfg.noise_sigma * rng.standard_normal(n)
    viewed = (rng.random(n) < propensity).astype(np.int64)

    lo, hi = cfg.behavior_len_range
    lengths = rng.integers(lo, hi + 1, n)
    slot = rng.integers(0, cfg.top_items, (n, cfg.max_len))
    valid = np.arange(cfg.max_len)[None, :] < lengths[:, None]
    beh_items = np.where(valid, w.top_items[users][np.arange(n)[:, None], slot], 0)
    behavior = {
        "beh_item_id": beh_items,
        "beh_category_id": np.where(valid, w.category[beh_items], 0),
        "beh_recency_bucket": np.where(valid, np.minimum(4, np.arange(cfg.max_len) // 2)[None, :], 0),
        "beh_dwell_bucket": np.where(valid, w.top_dwell[slot], 0),
    }
    behavior = {k: v.astype(np.int64) for k, v in behavior.items()}

    train = slice(0, cfg.split)
    schema = _build_schema(cfg, raw, train)
    cols: dict[str, np.ndarray] = {"user_id": users.astype(np.int64)}
    for decl in schema.features:
        if decl.role == "behavior" or decl.name in cols:
            continue
        if decl.name == "item_id":
            cols["item_id"] = items.astype(np.int64)
        elif decl.name == "category":
            cols["category"] = w.category[items].astype(np.int64)
        elif decl.name == "viewed_comments":
            cols["viewed_comments"] = viewed
        elif decl.kind == "numeric":
            cols[decl.name] = raw[decl.name]
        else:
            cols[decl.name] = discretize(raw[decl.name], decl.boundaries)
    cols = {name: cols[name] for name in schema.names if name in cols}

    full = Dataset(schema, np.arange(n, dtype=np.int64), label, propensity, cols, behavior,
                   lengths.astype(np.int64), cfg.to_dict())
    tr = full.take(np.arange(cfg.split))
    te = full.take(np.arange(cfg.split, n))
    tr.split_name, te.split_name = "train", "test"
    return tr, te


def item_catalog(cfg: GeneratorConfig, schema: FeatureSchema) -> dict[str, np.ndarray]:
    """Per-item regular features (bucketed), in item-id order, for index building."""
    w = _world(cfg, np.random.default_rng(cfg.seed))
    out = {"item_id": np.arange(cfg.num_items, dtype=np.int64),
           "category": w.category.astype(np.int64),
           "price_bucket": discretize(w.price_z, schema["price_bucket"].boundaries),
           "price": w.price}
    for j in range(cfg.visible_dims):
        out[f"item_f{j}"] = discretize(w.item_view[:, j], schema[f"item_f{j}"].boundaries)
    return out


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------

def _header(ds: Dataset) -> dict:
    return {"format": FORMAT_TAG, "schema": ds.schema.to_dict(), "schema_hash": ds.schema.hash(),
            "config": ds.config, "seed": ds.config.get("seed"), "split": ds.split_name,
            "rows": len(ds), "num_records": ds.config.get("num_records")}


def write_jsonl(ds: Dataset, path) -> None:
    path = Path(path)
    names = list(ds.cols)
    beh = [f"beh_{f}" for f in EVENT_FIELDS]
    cols = {k: v.tolist() for k, v in ds.cols.items()}
    behavior = {k: ds.behavior[k].tolist() for k in beh}
    index, label, prop = ds.index.tolist(), ds.label.tolist(), ds.propensity.tolist()
    lens = ds.behavior_len.tolist()
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(ds), sort_keys=True) + "\n")
        for i in range(len(ds)):
            rec = {"index": index[i], "label": label[i], "true_propensity": prop[i]}
            for k in names:
                rec[k] = cols[k][i]
            for k in beh:
                rec[k] = behavior[k][i][:lens[i]]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path, schema: FeatureSchema | None = None) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_TAG:
        raise DataFormatError(f"{path}: unsupported format {header.get('format')!r}")
    file_schema = FeatureSchema.from_dict(header["schema"])
    if file_schema.hash() != header.get("schema_hash"):
        raise SchemaError(f"{path}: header schema hash does not match embedded schema")
    if schema is not None and schema.hash() != header["schema_hash"]:
        raise SchemaError(f"{path}: schema hash {header['schema_hash'][:12]} does not match "
                          f"declared schema {schema.hash()[:12]}")
    schema = file_schema
    beh_names = [f"beh_{f}" for f in EVENT_FIELDS]
    col_names = [f.name for f in schema.features if f.role != "behavior"]
    expected = set(RESERVED_KEYS) | set(col_names) | set(beh_names)
    n = len(lines) - 1
    K = schema.max_len
    index = np.zeros(n, dtype=np.int64)
    label = np.zeros(n, dtype=np.int64)
    prop = np.zeros(n, dtype=np.float64)
    cols = {c: [None] * n for c in col_names}
    behavior = {b: np.zeros((n, K), dtype=np.int64) for b in beh_names}
    lengths = np.zeros(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DataFormatError(f"{path}: line {lineno}: record is not an object")
        unknown = set(rec) - expected
        if unknown:
            raise DataFormatError(f"{path}: line {lineno}: unknown field {sorted(unknown)[0]!r}")
        missing = expected - set(rec)
        if missing:
            raise DataFormatError(f"{path}: line {lineno}: missing field {sorted(missing)[0]!r}")
        index[i], label[i], prop[i] = rec["index"], rec["label"], rec["true_propensity"]
        for c in col_names:
            cols[c][i] = rec[c]
        ln = len(rec[beh_names[0]])
        if ln > K or any(len(rec[b]) != ln for b in beh_names):
            raise DataFormatError(f"{path}: line {lineno}: inconsistent behavior lengths")
        lengths[i] = ln
        for b in beh_names:
            behavior[b][i, :ln] = rec[b]
    arrays = {}
    for c in col_names:
        kind = schema[c].kind
        arrays[c] = np.asarray(cols[c], dtype=np.float64 if kind == "numeric" else np.int64)
    if header.get("rows") is not None and header["rows"] != n:
        raise DataFormatError(f"{path}: header declares {header['rows']} rows, found {n}")
    return Dataset(schema, index, label, prop, arrays, behavior, lengths, header["config"],
                   header.get("split", "all"))


def write_propensity_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "true_propensity", "label"])
        for i, p, y in zip(ds.index.tolist(), ds.propensity.tolist(), ds.label.tolist()):
            w.writerow([i, repr(p), y])
