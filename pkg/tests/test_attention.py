import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfdistill.attention import (EVENT_FIELDS, AttentionConfig, BehaviorEncoder, BehaviorEvent,
                                 BehaviorSequence, SelfAttentionBlock, attend, encode_behavior,
                                 masked_softmax, self_attention)

VOCAB = {"item_id": 30, "category_id": 6, "recency_bucket": 5, "dwell_bucket": 5}
CFG = AttentionConfig(num_heads=2, head_dim=4, model_dim=12, max_len=6)


@pytest.fixture
def encoder():
    enc = BehaviorEncoder(VOCAB, 3, CFG, seed=2)
    rng = np.random.default_rng(0)
    for table in enc.tables.values():
        table.rows.value[:] = rng.standard_normal(table.rows.value.shape)
    return enc


def _events(rng, n):
    return [BehaviorEvent(int(rng.integers(30)), int(rng.integers(6)), int(rng.integers(5)),
                          int(rng.integers(5))) for _ in range(n)]


def test_masked_softmax_ignores_padding(rng):
    scores = rng.standard_normal((2, 1, 3, 4))
    mask = np.array([[True, True, False, False], [True, True, True, True]])
    w = masked_softmax(scores, mask)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0)
    assert not w[0, ..., 2:].any()


def test_attend_matches_loop_oracle(rng):
    q, k, v = (rng.standard_normal((2, 3, 5, 4)) for _ in range(3))
    mask = np.arange(5)[None, :] < np.array([[5], [2]])
    out, _ = attend(q, k, v, mask)
    for b in range(2):
        for h in range(3):
            for i in range(5):
                valid = mask[b]
                s = q[b, h, i] @ k[b, h, valid].T / 2.0
                p = np.exp(s - s.max())
                p /= p.sum()
                np.testing.assert_allclose(out[b, h, i], p @ v[b, h, valid], atol=1e-12)


def test_single_event_attends_to_itself(rng):
    block = SelfAttentionBlock(CFG, rng)
    x = rng.standard_normal((1, 6, 12))
    block.forward(x, np.array([[True] + [False] * 5]))
    assert block.last_weights[0, :, 0, 0] == pytest.approx([1.0, 1.0])


def test_padded_rows_are_zero(rng):
    block = SelfAttentionBlock(CFG, rng)
    mask = np.arange(6)[None, :] < np.array([[3], [6]])
    out = block.forward(rng.standard_normal((2, 6, 12)), mask)
    assert not out[0, 3:].any()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_padding_content_is_invisible(n, seed):
    rng = np.random.default_rng(seed)
    enc = BehaviorEncoder(VOCAB, 3, CFG, seed=1)
    events, length = BehaviorSequence(_events(rng, n)).to_arrays(6)
    a = enc.forward(events, np.array([length]))
    junk = {f: arr.copy() for f, arr in events.items()}
    for f in EVENT_FIELDS:
        junk[f][0, n:] = rng.integers(0, VOCAB[f], 6 - n)
    b = enc.forward(junk, np.array([length]))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_pooled_output_is_order_free(encoder, seed):
    rng = np.random.default_rng(seed)
    evs = _events(rng, 5)
    a = encode_behavior(BehaviorSequence(evs), encoder)
    b = encode_behavior(BehaviorSequence([evs[i] for i in rng.permutation(5)]), encoder)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_history_uses_learned_vector(encoder):
    out = encode_behavior(BehaviorSequence(), encoder)
    np.testing.assert_array_equal(out, encoder.empty.value)


def test_batch_rows_independent(encoder, rng):
    seqs = [BehaviorSequence(_events(rng, n)) for n in (1, 4, 0, 6)]
    arrays = [s.to_arrays(6)[0] for s in seqs]
    batch = {f: np.vstack([a[f] for a in arrays]) for f in EVENT_FIELDS}
    out = encoder.forward(batch, np.array([1, 4, 0, 6]))
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(out[i], encode_behavior(s, encoder), atol=1e-12)


def test_all_masked_sequence_is_an_error(rng):
    with pytest.raises(ValueError, match="no valid events"):
        self_attention(rng.standard_normal((4, 12)), np.zeros(4, bool), SelfAttentionBlock(CFG, rng))


def test_sequence_too_long():
    with pytest.raises(ValueError):
        BehaviorSequence([BehaviorEvent(0, 0, 0, 0)] * 7).to_arrays(6)


def test_config_validation():
    assert AttentionConfig().proj_dim == 16
    with pytest.raises(ValueError):
        AttentionConfig(layers=2)
    with pytest.raises(ValueError):
        BehaviorEncoder(VOCAB, 4, CFG, seed=0)
