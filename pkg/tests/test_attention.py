from __future__ import annotations

import math

import numpy as np
import pytest

from attnpot import diffcore as dc
from attnpot.attention import (
    AttentionConfig,
    NodeSegment,
    feed_forward,
    init_neighbor_attention,
    init_node_attention,
    neighbor_attention,
    node_attention,
    rms_norm,
    stencil_log_mask,
)
from attnpot.encodings import FrequencyBank, build_lae_code, self_token_code, sinc_kernel
from attnpot.training import random_rotation

T = dc.Tensor


def params(cfg, init, seed=0):
    store = dc.ParameterStore()
    init(store, "att", cfg, np.random.default_rng(seed))
    return store


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def test_rms_norm_examples(rng):
    np.testing.assert_allclose(rms_norm(T(np.ones(4)), np.ones(4)).data, 1.0, atol=1e-6)
    np.testing.assert_allclose(rms_norm(T(np.array([2.0, 2.0])), np.ones(2)).data, 1.0, atol=1e-6)
    x = rng.normal(size=(5, 16))
    out = rms_norm(T(x), np.ones(16)).data
    np.testing.assert_allclose(np.sqrt((out**2).mean(-1)), 1.0, atol=1e-6)


def test_feed_forward_scalar_oracle(rng):
    x = rng.normal(size=2)
    w1, b1 = rng.normal(size=(2, 4)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(4, 2)), rng.normal(size=2)
    gelu = lambda z: 0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z**3)))
    hidden = [gelu(sum(x[i] * w1[i, j] for i in range(2)) + b1[j]) for j in range(4)]
    ref = [sum(hidden[j] * w2[j, o] for j in range(4)) + b2[o] for o in range(2)]
    np.testing.assert_allclose(feed_forward(T(x[None]), w1, b1, w2, b2).data[0], ref, atol=1e-12)
    zero = feed_forward(T(x[None]), np.zeros((2, 4)), b1, np.zeros((4, 2)), b2).data[0]
    np.testing.assert_allclose(zero, b2)


def naive_stencil_pass(tokens, kv, log_mask, wq, wk, wv, heads):
    n, s, d = tokens.shape
    dh = d // heads
    out = np.zeros((n, s, d))
    for i in range(n):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for a in range(s):
                q = tokens[i, a] @ wq[:, sl]
                logits = np.array([q @ (kv[i, b] @ wk[:, sl]) / math.sqrt(dh) + log_mask[i, b] for b in range(s)])
                w = softmax(logits)
                out[i, a, sl] = sum(w[b] * (kv[i, b] @ wv[:, sl]) for b in range(s))
    return out


def stencil_inputs(rng, n=6, k=3, d=8):
    tokens = rng.normal(size=(n, k + 1, d))
    nbr = rng.integers(0, n, size=(n, k))
    mask = rng.uniform(size=(n, k)) < 0.7
    w = rng.uniform(0.2, 1.0, size=(n, k)) * mask
    u = rng.uniform(0.2, 1.0, size=(n, k)) * mask
    return tokens, nbr, mask, w, u


def test_neighbor_attention_matches_naive_loop(rng):
    cfg = AttentionConfig(d_model=8, num_heads=2, lae=False, erope=False)
    p = params(cfg, init_neighbor_attention).arrays
    tokens, nbr, mask, w, u = stencil_inputs(rng)
    lm = stencil_log_mask(T(w), T(u), mask).data
    got = neighbor_attention({k: T(v) for k, v in p.items()}, "att", T(tokens), cfg, T(lm), nbr).data
    kv_in = np.concatenate([tokens[:, :1], tokens[nbr, 0]], axis=1)
    a = naive_stencil_pass(tokens, tokens, lm, p["att.out.q.w"], p["att.out.k.w"], p["att.out.v.w"], 2)
    b = naive_stencil_pass(tokens, kv_in, lm, p["att.in.q.w"], p["att.in.k.w"], p["att.in.v.w"], 2)
    ref = np.concatenate([a, b], -1) @ p["att.proj.w"] + p["att.proj.b"]
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_log_mask_layout():
    mask = np.array([[True, False]])
    lm = stencil_log_mask(T(np.array([[0.5, 0.0]])), T(np.array([[1.0, 0.0]])), mask).data
    assert lm[0, 0] == 0.0
    assert lm[0, 1] == pytest.approx(math.log(0.5 + math.exp(-30)))
    assert lm[0, 2] < -1e8


def test_self_only_stencil_returns_value_projection(rng):
    cfg = AttentionConfig(d_model=8, num_heads=2, lae=False, erope=False)
    p = params(cfg, init_neighbor_attention).arrays
    tokens, nbr, _, _, _ = stencil_inputs(rng)
    mask = np.zeros_like(nbr, dtype=bool)
    lm = stencil_log_mask(T(np.zeros(nbr.shape)), T(np.zeros(nbr.shape)), mask)
    got = neighbor_attention({k: T(v) for k, v in p.items()}, "att", T(tokens), cfg, lm, nbr).data
    selfv = np.concatenate([tokens[:, 0] @ p["att.out.v.w"], tokens[:, 0] @ p["att.in.v.w"]], -1)
    ref = selfv @ p["att.proj.w"] + p["att.proj.b"]
    for slot in range(nbr.shape[1] + 1):
        np.testing.assert_allclose(got[:, slot], ref, atol=1e-12)


def test_masking_a_neighbor_interpolates_continuously(rng):
    cfg = AttentionConfig(d_model=8, num_heads=2, lae=False, erope=False)
    p = {k: T(v) for k, v in params(cfg, init_neighbor_attention).arrays.items()}
    tokens = 0.3 * rng.normal(size=(2, 2, 8))
    nbr = np.array([[1], [0]])
    mask = np.array([[True], [True]])
    def scan(num):
        outs = []
        for wt in np.linspace(0, 1, num):
            lm = stencil_log_mask(T(np.array([[wt], [1.0]])), T(np.ones((2, 1))), mask)
            outs.append(neighbor_attention(p, "att", T(tokens), cfg, lm, nbr).data[0, 0])
        return np.array(outs)

    # Lipschitz in the weight: doubling the resolution halves the largest step
    coarse, fine = scan(201), scan(401)
    big = lambda o: np.linalg.norm(np.diff(o, axis=0), axis=1).max()
    assert big(fine) < 0.6 * big(coarse)
    outs = fine
    self_only = stencil_log_mask(T(np.zeros((2, 1))), T(np.ones((2, 1))), mask)
    np.testing.assert_allclose(outs[0], neighbor_attention(p, "att", T(tokens), cfg, self_only, nbr).data[0, 0])


def test_lae_attention_invariant_under_rotation(rng):
    cfg = AttentionConfig(d_model=16, num_heads=2, lae=True, erope=False)
    p = {k: T(v) for k, v in params(cfg, init_neighbor_attention).arrays.items()}
    tokens, nbr, mask, w, u = stencil_inputs(rng, d=16)
    lm = stencil_log_mask(T(w), T(u), mask)
    dirs = rng.normal(size=nbr.shape + (3,))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    def run(d):
        codes = build_lae_code(d, cfg.alloc)
        selfc = np.broadcast_to(self_token_code(cfg.alloc), (len(nbr), 1, cfg.alloc.expanded_dim))
        gamma = T(np.concatenate([selfc, codes], axis=1))
        export = {}
        out = neighbor_attention(p, "att", T(tokens), cfg, lm, nbr, gamma, export).data
        return out, export

    a, ea = run(dirs)
    b, eb = run(dirs @ random_rotation(rng).T)
    for key in ea:
        np.testing.assert_allclose(ea[key], eb[key], atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-9)


def naive_node_attention(x, pos, p, heads, bank):
    n, d = x.shape
    dh = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            logits = []
            for j in range(n):
                r = np.linalg.norm(pos[i] - pos[j])
                bias = sum(p["att.erope"][h, m] * sinc_kernel(np.array(r), bank)[m] for m in range(bank.num))
                logits.append((x[i] @ p["att.q.w"][:, sl]) @ (x[j] @ p["att.k.w"][:, sl]) / math.sqrt(dh) + bias)
            w = softmax(np.array(logits))
            out[i, sl] = sum(w[j] * (x[j] @ p["att.v.w"][:, sl]) for j in range(n))
    return out @ p["att.proj.w"] + p["att.proj.b"]


def node_setup(rng, n=6, erope_weights=True, chunk=1 << 22):
    cfg = AttentionConfig(d_model=8, num_heads=2, lae=False, erope=True, bank=FrequencyBank(4), chunk_elements=chunk)
    store = params(cfg, init_node_attention)
    if erope_weights:
        store.arrays["att.erope"][...] = rng.normal(size=(2, 4))
    return cfg, store.arrays, rng.normal(size=(n, 8)), rng.uniform(-3, 3, size=(n, 3))


def test_node_attention_matches_naive_loop(rng):
    cfg, p, x, pos = node_setup(rng)
    got = node_attention({k: T(v) for k, v in p.items()}, "att", T(x), cfg, [NodeSegment(0, 6)], T(pos)).data
    np.testing.assert_allclose(got, naive_node_attention(x, pos, p, 2, cfg.bank), atol=1e-10)


def test_node_attention_chunking_is_exact(rng):
    cfg, p, x, pos = node_setup(rng, n=9)
    small = AttentionConfig(**{**cfg.__dict__, "chunk_elements": 20})
    pt = {k: T(v) for k, v in p.items()}
    a = node_attention(pt, "att", T(x), cfg, [NodeSegment(0, 9)], T(pos)).data
    b = node_attention(pt, "att", T(x), small, [NodeSegment(0, 9)], T(pos)).data
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_single_node_is_value_projection(rng):
    cfg, p, x, pos = node_setup(rng, n=1)
    got = node_attention({k: T(v) for k, v in p.items()}, "att", T(x), cfg, [NodeSegment(0, 1)], T(pos)).data
    np.testing.assert_allclose(got, x @ p["att.v.w"] @ p["att.proj.w"] + p["att.proj.b"], atol=1e-12)


def test_zero_distance_bias_equals_bias_off(rng):
    cfg, p, x, pos = node_setup(rng, erope_weights=False)
    off = AttentionConfig(**{**cfg.__dict__, "erope": False})
    pt = {k: T(v) for k, v in p.items()}
    a = node_attention(pt, "att", T(x), cfg, [NodeSegment(0, 6)], T(pos)).data
    b = node_attention(pt, "att", T(x), off, [NodeSegment(0, 6)]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batched_graphs_do_not_interact(rng):
    cfg, p, x, pos = node_setup(rng, n=10)
    pt = {k: T(v) for k, v in p.items()}
    both = node_attention(pt, "att", T(x), cfg, [NodeSegment(0, 4), NodeSegment(4, 10)], T(pos)).data
    first = node_attention(pt, "att", T(x[:4]), cfg, [NodeSegment(0, 4)], T(pos[:4])).data
    second = node_attention(pt, "att", T(x[4:]), cfg, [NodeSegment(0, 6)], T(pos[4:])).data
    np.testing.assert_allclose(both, np.concatenate([first, second]), atol=1e-12)


def test_node_attention_permutation_equivariant(rng):
    cfg, p, x, pos = node_setup(rng, n=7)
    pt = {k: T(v) for k, v in p.items()}
    perm = rng.permutation(7)
    a = node_attention(pt, "att", T(x), cfg, [NodeSegment(0, 7)], T(pos)).data
    b = node_attention(pt, "att", T(x[perm]), cfg, [NodeSegment(0, 7)], T(pos[perm])).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_node_attention_rows_sum_to_one(rng):
    cfg, p, x, pos = node_setup(rng)
    export = {}
    node_attention({k: T(v) for k, v in p.items()}, "att", T(x), cfg, [NodeSegment(0, 6)], T(pos), export)
    np.testing.assert_allclose(export["att"][0].sum(-1), 1.0, atol=1e-12)


def test_shape_errors(rng):
    cfg, p, x, pos = node_setup(rng)
    pt = {k: T(v) for k, v in p.items()}
    with pytest.raises(dc.ShapeError):
        node_attention(pt, "att", T(x), cfg, [NodeSegment(0, 6)], T(pos[:3]))
    with pytest.raises(ValueError):
        AttentionConfig(d_model=10, num_heads=3)
