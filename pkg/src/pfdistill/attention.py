"""Masked multi-head self-attention over user behavior sequences.

One attention layer (no positional encodings) followed by a position-wise
feed-forward block, each wrapped with a residual connection and layer
normalization. Padding positions are masked out of the keys and out of the
final mean pooling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (CacheError, DenseLayer, LayerNorm, LeakyReLU, Param, EmbeddingTable,
                          component_rng)

MASK_VALUE = -1e30
EVENT_FIELDS = ("item_id", "category_id", "recency_bucket", "dwell_bucket")


@dataclass(frozen=True)
class BehaviorEvent:
    item_id: int
    category_id: int
    recency_bucket: int
    dwell_bucket: int


@dataclass
class BehaviorSequence:
    events: list[BehaviorEvent] = field(default_factory=list)

    @property
    def valid_len(self) -> int:
        return len(self.events)

    def to_arrays(self, max_len: int) -> tuple[dict[str, np.ndarray], int]:
        """Padded ``(1, max_len)`` id arrays per event field, plus valid length."""
        if len(self.events) > max_len:
            raise ValueError(f"sequence of {len(self.events)} events exceeds max length {max_len}")
        out = {}
        for name in EVENT_FIELDS:
            row = np.zeros((1, max_len), dtype=np.int64)
            row[0, :len(self.events)] = [getattr(e, name) for e in self.events]
            out[name] = row
        return out, len(self.events)


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 2
    head_dim: int = 8
    model_dim: int = 32
    layers: int = 1
    max_len: int = 10

    def __post_init__(self):
        if self.layers != 1:
            raise ValueError("exactly one attention layer is supported")
        if min(self.num_heads, self.head_dim, self.model_dim, self.max_len) < 1:
            raise ValueError("attention dimensions must be positive")

    @property
    def proj_dim(self) -> int:
        return self.num_heads * self.head_dim


FULL_SCALE_ATTENTION = dict(num_heads=4, head_dim=32, max_len=50)


def masked_softmax(scores: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with invalid keys pushed to -1e30."""
    s = scores + np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, key_mask: np.ndarray):
    """Scaled dot-product attention on ``(B, H, L, D)`` heads.

    Returns ``(output, weights)`` with weights of shape ``(B, H, L, L)``.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = masked_softmax(q @ k.swapaxes(-1, -2) * scale, key_mask)
    return weights @ v, weights


class SelfAttentionBlock:
    """Attention sublayer + feed-forward sublayer, both residual + layer-norm."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, name: str = "attn"):
        n, p = cfg.model_dim, cfg.proj_dim
        self.cfg = cfg
        self.query = DenseLayer(n, p, rng, f"{name}.query")
        self.key = DenseLayer(n, p, rng, f"{name}.key")
        self.value = DenseLayer(n, p, rng, f"{name}.value")
        self.out = DenseLayer(p, n, rng, f"{name}.out")
        self.ln1 = LayerNorm(n, f"{name}.ln1")
        self.ffn_in = DenseLayer(n, 2 * n, rng, f"{name}.ffn_in")
        self.ffn_act = LeakyReLU()
        self.ffn_out = DenseLayer(2 * n, n, rng, f"{name}.ffn_out")
        self.ln2 = LayerNorm(n, f"{name}.ln2")
        self.last_weights = None
        self._cache = None

    def params(self) -> list[Param]:
        out = []
        for layer in (self.query, self.key, self.value, self.out, self.ln1,
                      self.ffn_in, self.ffn_out, self.ln2):
            out.extend(layer.params())
        return out

    def _heads(self, flat, b, length):
        h, d = self.cfg.num_heads, self.cfg.head_dim
        return flat.reshape(b, length, h, d).transpose(0, 2, 1, 3)

    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """``x``: ``(B, L, n)``; ``mask``: ``(B, L)`` valid positions.

        Position-wise layers run on valid positions only; padded output rows
        are zero.
        """
        b, length, n = x.shape
        if n != self.cfg.model_dim:
            raise ValueError(f"attention expects model_dim {self.cfg.model_dim}, got {n}")
        mask = np.asarray(mask, dtype=bool)
        flat = x[mask]
        p = self.cfg.proj_dim

        def heads(proj):
            full = np.zeros((b, length, p))
            full[mask] = proj
            return self._heads(full, b, length)

        q = heads(self.query.forward(flat))
        k = heads(self.key.forward(flat))
        v = heads(self.value.forward(flat))
        out, weights = attend(q, k, v, mask)
        self.last_weights = weights
        concat = out.transpose(0, 2, 1, 3)[mask].reshape(-1, p)
        y = self.ln1.forward(flat + self.out.forward(concat))
        z = self.ln2.forward(y + self.ffn_out.forward(self.ffn_act.forward(self.ffn_in.forward(y))))
        self._cache = (q, k, v, weights, mask)
        result = np.zeros((b, length, n))
        result[mask] = z
        return result

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise CacheError("SelfAttentionBlock: backward without forward")
        q, k, v, weights, mask = self._cache
        self._cache = None
        b, length, n = grad_out.shape
        p = self.cfg.proj_dim
        g2 = self.ln2.backward(grad_out[mask])
        gy = g2 + self.ffn_in.backward(self.ffn_act.backward(self.ffn_out.backward(g2)))
        g1 = self.ln1.backward(gy)
        gfull = np.zeros((b, length, p))
        gfull[mask] = self.out.backward(g1)
        gheads = self._heads(gfull, b, length)
        gweights = gheads @ v.swapaxes(-1, -2)
        gv = weights.swapaxes(-1, -2) @ gheads
        gscores = weights * (gweights - (gweights * weights).sum(axis=-1, keepdims=True))
        gscores *= 1.0 / np.sqrt(self.cfg.head_dim)
        gq = gscores @ k
        gk = gscores.swapaxes(-1, -2) @ q

        def valid(g):
            return g.transpose(0, 2, 1, 3)[mask].reshape(-1, p)

        gx = g1 + self.query.backward(valid(gq)) + self.key.backward(valid(gk)) + self.value.backward(valid(gv))
        result = np.zeros((b, length, n))
        result[mask] = gx
        return result


def self_attention(seq_embeddings: np.ndarray, mask, block: SelfAttentionBlock) -> np.ndarray:
    """Single-sequence convenience wrapper: ``(len, n)`` in, ``(len, n)`` out."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("self_attention: sequence has no valid events")
    return block.forward(seq_embeddings[None], mask[None])[0]


class BehaviorEncoder:
    """Event embeddings -> self-attention -> masked mean pooling.

    Users without history get a learned ``empty`` vector instead.
    """

    def __init__(self, vocab_sizes: dict[str, int], emb_dim: int, cfg: AttentionConfig,
                 seed: int, name: str = "behavior"):
        if cfg.model_dim != emb_dim * len(EVENT_FIELDS):
            raise ValueError("model_dim must equal the concatenated event embedding width")
        self.cfg = cfg
        self.name = name
        self.tables = {f: EmbeddingTable(vocab_sizes[f], emb_dim, component_rng(seed, f"{name}.{f}"),
                                         f"{name}.{f}") for f in EVENT_FIELDS}
        self.block = SelfAttentionBlock(cfg, component_rng(seed, f"{name}.attn"), f"{name}.attn")
        self.empty = Param(f"{name}.empty", component_rng(seed, f"{name}.empty").uniform(
            -0.01, 0.01, size=cfg.model_dim))
        self.forward_calls = 0
        self._cache = None

    @property
    def out_dim(self) -> int:
        return self.cfg.model_dim

    def params(self) -> list[Param]:
        out = [t.rows for t in self.tables.values()]
        return out + self.block.params() + [self.empty]

    def forward(self, events: dict[str, np.ndarray], lengths: np.ndarray) -> np.ndarray:
        self.forward_calls += 1
        lengths = np.asarray(lengths, dtype=np.int64)
        length = events[EVENT_FIELDS[0]].shape[1]
        mask = np.arange(length)[None, :] < lengths[:, None]
        x = np.concatenate([self.tables[f].forward(events[f]) for f in EVENT_FIELDS], axis=-1)
        z = self.block.forward(x, mask)
        m = mask[:, :, None].astype(z.dtype)
        denom = np.maximum(lengths, 1).astype(z.dtype)[:, None]
        pooled = (z * m).sum(axis=1) / denom
        empty = lengths == 0
        if empty.any():
            pooled[empty] = self.empty.value
        self._cache = (m, denom, empty)
        return pooled

    def backward(self, grad_out: np.ndarray) -> None:
        if self._cache is None:
            raise CacheError(f"{self.name}: backward without forward")
        m, denom, empty = self._cache
        self._cache = None
        if empty.any():
            self.empty.grad += grad_out[empty].sum(axis=0)
            grad_out = np.where(empty[:, None], 0.0, grad_out)
        gz = (grad_out / denom)[:, None, :] * m
        gx = self.block.backward(gz)
        e = self.tables[EVENT_FIELDS[0]].dim
        for i, f in enumerate(EVENT_FIELDS):
            self.tables[f].backward(gx[:, :, i * e:(i + 1) * e])


def encode_behavior(seq: BehaviorSequence, encoder: BehaviorEncoder) -> np.ndarray:
    """Pooled encoding of one sequence (vector of length ``model_dim``)."""
    events, n = seq.to_arrays(encoder.cfg.max_len)
    return encoder.forward(events, np.array([n]))[0]
