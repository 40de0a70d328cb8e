"""Coarse-ranking serving: offline item index, one-forward request scoring,
flops accounting and a mapping-vs-inner-product latency benchmark."""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import BehaviorSequence
from .models import (ModelGraph, Mlp, StepContext, TwoTowerModel, _check_no_privileged, _request_batch)
from .tensor_core import component_rng

INDEX_MAGIC = b"PFDIDX01"
UNIT_NORM_TOL = 1e-10


class IndexFileError(ValueError):
    """Raised for corrupt index files or an index/checkpoint mismatch."""


@dataclass(frozen=True)
class ItemIndex:
    item_ids: np.ndarray        # (num_items,) int64
    vectors: np.ndarray         # (num_items, out_dim) unit rows
    checkpoint_hash: str
    scale: float

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.item_ids) != self.vectors.shape[0]:
            raise ValueError("item ids and vectors disagree in length")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > UNIT_NORM_TOL:
            raise ValueError("index rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def out_dim(self) -> int:
        return self.vectors.shape[1]

    def to_bytes(self) -> bytes:
        head = INDEX_MAGIC + struct.pack("<QQd", self.out_dim, len(self), self.scale)
        head += self.checkpoint_hash.encode("ascii").ljust(64, b"\0")
        return (head + np.ascontiguousarray(self.item_ids, dtype="<i8").tobytes()
                + np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ItemIndex":
        if data[:8] != INDEX_MAGIC:
            raise IndexFileError("not an item index file")
        out_dim, n, scale = struct.unpack_from("<QQd", data, 8)
        off = 8 + 24
        ckpt = data[off:off + 64].rstrip(b"\0").decode("ascii")
        off += 64
        expected = off + 8 * n + 8 * n * out_dim
        if len(data) != expected:
            raise IndexFileError(f"index file has {len(data)} bytes, expected {expected}")
        ids = np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(np.int64)
        vecs = np.frombuffer(data, dtype="<f8", count=n * out_dim, offset=off + 8 * n)
        return cls(ids, vecs.reshape(n, out_dim).astype(np.float64), ckpt, scale)


def _two_tower(graph: ModelGraph) -> TwoTowerModel:
    if not isinstance(graph.student, TwoTowerModel):
        raise TypeError("serving needs a two-tower student (task ctr)")
    return graph.student


def build_index(graph: ModelGraph, items: dict[str, np.ndarray], checkpoint_hash: str) -> ItemIndex:
    """Run the eval-mode item tower over every item once."""
    model = _two_tower(graph)
    graph.set_mode("eval", "student")
    names = model.item_inputs.feature_names
    feats = {n: graph.schema.encode(n, np.asarray(items[n])) for n in names}
    vectors = model.item_vectors(StepContext({"feats": feats}, train=False))
    return ItemIndex(np.asarray(items["item_id"], dtype=np.int64), np.array(vectors, dtype=np.float64),
                     checkpoint_hash, model.scale)


def save_index(index: ItemIndex, path) -> str:
    data = index.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_index(path, checkpoint_hash: str | None = None) -> ItemIndex:
    """Read an index; refuse it when it was built from a different checkpoint."""
    index = ItemIndex.from_bytes(Path(path).read_bytes())
    if checkpoint_hash is not None and index.checkpoint_hash != checkpoint_hash:
        raise IndexFileError(f"index was built from checkpoint {index.checkpoint_hash[:12]}, "
                             f"live model is {checkpoint_hash[:12]}")
    return index


def user_vector(user_feats: dict, behavior: BehaviorSequence | None, graph: ModelGraph) -> np.ndarray:
    model = _two_tower(graph)
    _check_no_privileged(graph, user_feats)
    graph.set_mode("eval", "student")
    ctx = StepContext(_request_batch(graph, user_feats, behavior), train=False)
    return model.user_vectors(ctx)[0]


def score_request(user_feats: dict, behavior: BehaviorSequence | None, index: ItemIndex, k: int,
                  graph: ModelGraph) -> list[tuple[int, float]]:
    """Top-k (item_id, score) from one user-tower forward and a matrix-vector product."""
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside 1..{len(index)}")
    u = user_vector(user_feats, behavior, graph)
    scores = index.scale * (index.vectors @ u)
    order = np.lexsort((index.item_ids, -scores))[:k]
    return [(int(index.item_ids[i]), float(scores[i])) for i in order]


@dataclass(frozen=True)
class FlopsReport:
    mapping_flops: int
    inner_product_flops: int
    ratio: Fraction

    def to_dict(self) -> dict:
        r = self.ratio
        return {"mapping_flops": self.mapping_flops, "inner_product_flops": self.inner_product_flops,
                "ratio": r.numerator if r.denominator == 1 else f"{r.numerator}/{r.denominator}"}

    @classmethod
    def from_dict(cls, d: dict) -> "FlopsReport":
        return cls(int(d["mapping_flops"]), int(d["inner_product_flops"]), Fraction(d["ratio"]))


def flops_count(input_dim: int, hidden_dims, out_dim: int) -> FlopsReport:
    """Fused multiply-adds of the weight matrices in one tower forward vs one inner product."""
    dims = [input_dim, *hidden_dims, out_dim]
    if any(int(d) != d or d < 1 for d in dims):
        raise ValueError("dims must be positive integers")
    mapping = sum(int(a) * int(b) for a, b in zip(dims, dims[1:]))
    return FlopsReport(mapping, int(out_dim), Fraction(mapping, int(out_dim)))


@dataclass(frozen=True)
class LatencyReport:
    mapping_time_s: float
    inner_product_time_s: float
    ratio: float
    num_candidates: int
    repeats: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def latency_bench(num_candidates: int, repeats: int, input_dim: int = 1024, hidden=(512, 256),
                  out_dim: int = 128, seed: int = 0) -> LatencyReport:
    """Time ``num_candidates`` item-tower forwards against as many inner products.

    Each measurement is the best of ``repeats`` runs after one warm-up call.
    """
    if num_candidates < 1 or repeats < 1:
        raise ValueError("num_candidates and repeats must be positive")
    rng = component_rng(seed, "latency_bench")
    tower = Mlp(input_dim, tuple(hidden), out_dim, rng, "bench", normalize=True)
    for bn in tower.batch_norms():
        bn.state.mode = "eval"
    x = rng.standard_normal((num_candidates, input_dim))
    items = tower.forward(x)
    user = items[0].copy()

    def best(fn):
        fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    t_map = best(lambda: tower.forward(x))
    t_dot = best(lambda: items @ user)
    return LatencyReport(t_map, t_dot, t_map / max(t_dot, 1e-12), num_candidates, repeats)
