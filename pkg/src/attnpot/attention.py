"""Neighborhood (stencil) attention, all-to-all node attention, RMSNorm and FFN sublayers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encodings import DegreeAllocation, FrequencyBank, erope_bias, lae_expand_head
from .geometry import pairwise_vectors

MASK_VALUE = -1e9
LOG_FLOOR = math.exp(-30.0)


@dataclass
class AttentionConfig:
    d_model: int = 512
    num_heads: int = 8
    lae: bool = True
    alloc: DegreeAllocation | None = None
    erope: bool = True
    bank: FrequencyBank = field(default_factory=FrequencyBank)
    # soft cap on elements of one node-attention chunk (rows x columns x channels)
    chunk_elements: int = 1 << 22
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.alloc is None:
            self.alloc = DegreeAllocation.balanced(self.head_dim)
        if self.alloc.head_dim != self.head_dim:
            raise ValueError("degree allocation does not match the head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


def rms_norm(x, gain, eps: float = 1e-6):
    ms = dc.mean(dc.mul(x, x), axis=-1, keepdims=True)
    return dc.mul(dc.mul(x, dc.rsqrt(dc.add(ms, eps))), gain)


def feed_forward(x, w1, b1, w2, b2):
    """linear -> GELU (tanh form) -> linear."""
    return dc.linear(dc.gelu(dc.linear(x, w1, b1)), w2, b2)


def init_linear(store: dc.ParameterStore, name: str, fan_in: int, fan_out: int, rng, scale: float = 1.0,
                bias: bool = True, dtype=np.float64) -> None:
    w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)
    store.add(f"{name}.w", w)
    if bias:
        store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))


def init_ffn(store, name, d_model, multiplier, rng, dtype=np.float64):
    init_linear(store, f"{name}.fc1", d_model, multiplier * d_model, rng, dtype=dtype)
    init_linear(store, f"{name}.fc2", multiplier * d_model, d_model, rng, dtype=dtype)


def apply_ffn(p: dict, name: str, x):
    return feed_forward(x, p[f"{name}.fc1.w"], p[f"{name}.fc1.b"], p[f"{name}.fc2.w"], p[f"{name}.fc2.b"])


def init_neighbor_attention(store, name: str, cfg: AttentionConfig, rng, dtype=np.float64) -> None:
    d = cfg.d_model
    for pass_name in ("out", "in"):
        for proj in ("q", "k", "v"):
            init_linear(store, f"{name}.{pass_name}.{proj}", d, d, rng, bias=False, dtype=dtype)
    init_linear(store, f"{name}.proj", 2 * d, d, rng, dtype=dtype)


def init_node_attention(store, name: str, cfg: AttentionConfig, rng, dtype=np.float64) -> None:
    d = cfg.d_model
    for proj in ("q", "k", "v"):
        init_linear(store, f"{name}.{proj}", d, d, rng, bias=False, dtype=dtype)
    init_linear(store, f"{name}.proj", d, d, rng, dtype=dtype)
    store.add(f"{name}.erope", np.zeros((cfg.num_heads, cfg.bank.num), dtype=dtype))


def _split_heads(x, num_heads: int):
    # (..., S, D) -> (..., H, S, dh)
    *lead, s, d = x.shape
    y = dc.reshape(x, tuple(lead) + (s, num_heads, d // num_heads))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return dc.transpose(y, axes)


def _merge_heads(x):
    # (..., H, S, dh) -> (..., S, H*dh)
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = dc.transpose(x, axes)
    *lead, s, h, dh = y.shape
    return dc.reshape(y, tuple(lead) + (s, h * dh))


def stencil_log_mask(weights, envelope, mask: np.ndarray, dtype=np.float64):
    """Additive logits for a (N, k+1) token block: log(w u + e^-30) on real slots,
    0 on the self slot and a hard mask on padded slots."""
    n, k = mask.shape
    real = mask.astype(dtype)
    logw = dc.log(dc.add(dc.mul(weights, envelope), LOG_FLOOR))
    logw = dc.add(dc.mul(logw, real), (1.0 - real) * MASK_VALUE)
    return dc.concat([Tensor(np.zeros((n, 1), dtype=dtype)), logw], axis=1)


def _stencil_pass(p, name, x_q, x_kv, cfg: AttentionConfig, log_mask, gamma, export):
    h = cfg.num_heads
    q = _split_heads(dc.matmul(x_q, p[f"{name}.q.w"]), h)
    k = _split_heads(dc.matmul(x_kv, p[f"{name}.k.w"]), h)
    v = _split_heads(dc.matmul(x_kv, p[f"{name}.v.w"]), h)
    if cfg.lae and gamma is not None:
        g = dc.reshape(gamma, (gamma.shape[0], 1) + gamma.shape[1:])
        q = dc.mul(lae_expand_head(q, cfg.alloc), g)
        k = dc.mul(lae_expand_head(k, cfg.alloc), g)
    logits = dc.mul(dc.matmul(q, dc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))
    n, s = log_mask.shape
    logits = dc.add(logits, dc.reshape(log_mask, (n, 1, 1, s)))
    attn = dc.softmax(logits, axis=-1)
    if export is not None:
        export[name] = attn.data.copy()
    return _merge_heads(dc.matmul(attn, v))


def neighbor_attention(p: dict, name: str, tokens, cfg: AttentionConfig, log_mask, neighbor_index: np.ndarray,
                       gamma=None, export: dict | None = None):
    """Two passes of MHSA inside every (k+1)-token stencil.

    ``tokens`` is (N, k+1, D) with the self token in slot 0.  The "out" pass is
    self-attention among the stencil's edge tokens (center to neighbors).  The
    "in" pass lets the same queries read keys/values taken from each
    neighbor's own self token (neighbors to center).  Results are
    concatenated and projected back to D.
    """
    n, s, d = tokens.shape
    if d != cfg.d_model:
        raise dc.ShapeError("neighbor_attention", (tokens.shape,), f"expected d_model={cfg.d_model}")
    if log_mask.shape != (n, s) or neighbor_index.shape != (n, s - 1):
        raise dc.ShapeError("neighbor_attention", (tokens.shape, log_mask.shape, neighbor_index.shape),
                            "mask / index do not match the token block")
    out = _stencil_pass(p, f"{name}.out", tokens, tokens, cfg, log_mask, gamma, export)
    selves = tokens[:, 0, :]
    kv_in = dc.concat([dc.reshape(selves, (n, 1, d)), dc.gather(selves, neighbor_index, axis=0)], axis=1)
    inn = _stencil_pass(p, f"{name}.in", tokens, kv_in, cfg, log_mask, gamma, export)
    return dc.linear(dc.concat([out, inn], axis=-1), p[f"{name}.proj.w"], p[f"{name}.proj.b"])


@dataclass
class NodeSegment:
    """One graph of a batch: node rows [start, stop) plus its periodic cell."""

    start: int
    stop: int
    cell: object = None          # Tensor/array (3, 3) or None
    pbc: tuple = (False, False, False)


def pair_distances(positions, cell=None, pbc=(False, False, False), rows: slice | None = None):
    """Differentiable distances for a block of rows against all columns; zero (and flat) on the diagonal."""
    n = positions.shape[0]
    rows = rows or slice(0, n)
    d = pairwise_vectors(positions, cell, pbc, rows)
    r2 = dc.sum_(dc.mul(d, d), axis=-1)
    ridx = np.arange(n)[rows]
    diag = np.zeros(r2.shape, dtype=positions.dtype)
    diag[np.arange(len(ridx)), ridx] = 1.0
    r2 = dc.add(r2, diag)
    return dc.mul(dc.mul(r2, dc.rsqrt(r2)), 1.0 - diag)


def node_attention(p: dict, name: str, x, cfg: AttentionConfig, segments: list[NodeSegment], positions=None,
                   export: dict | None = None, timer=None):
    """All-to-all MHSA inside each graph of the batch (cross-graph pairs never interact).

    ``x`` is (N, D); when the distance bias is on, ``positions`` (N, 3) supply
    pairwise (minimum-image) distances.
    """
    n, d = x.shape
    if d != cfg.d_model:
        raise dc.ShapeError("node_attention", (x.shape,), f"expected d_model={cfg.d_model}")
    if cfg.erope and (positions is None or positions.shape[0] != n):
        raise dc.ShapeError("node_attention", (x.shape, None if positions is None else positions.shape),
                            "positions must match the node count when the distance bias is on")
    h, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    q_all = _split_heads(dc.matmul(x, p[f"{name}.q.w"]), h)   # (H, N, dh)
    k_all = _split_heads(dc.matmul(x, p[f"{name}.k.w"]), h)
    v_all = _split_heads(dc.matmul(x, p[f"{name}.v.w"]), h)
    outs = []
    for seg in segments:
        sl = slice(seg.start, seg.stop)
        m = seg.stop - seg.start
        q, k, v = q_all[:, sl], k_all[:, sl], v_all[:, sl]
        kt = dc.swapaxes(k, -1, -2)
        pos = positions[sl] if cfg.erope else None
        per_row = m * (cfg.bank.num + h) if cfg.erope else m * h
        chunk = max(1, min(m, cfg.chunk_elements // max(per_row, 1)))
        pieces = []
        for r0 in range(0, m, chunk):
            rows = slice(r0, min(m, r0 + chunk))
            logits = dc.mul(dc.matmul(q[:, rows], kt), scale)
            if cfg.erope:
                r = pair_distances(pos, seg.cell, seg.pbc, rows)
                logits = dc.add(logits, erope_bias(r, p[f"{name}.erope"], cfg.bank))
            attn = dc.softmax(logits, axis=-1)
            if export is not None:
                export.setdefault(name, []).append(attn.data.copy())
            pieces.append(dc.matmul(attn, v))
        outs.append(pieces[0] if len(pieces) == 1 else dc.concat(pieces, axis=1))
    o = outs[0] if len(outs) == 1 else dc.concat(outs, axis=1)
    return dc.linear(_merge_heads(o), p[f"{name}.proj.w"], p[f"{name}.proj.b"])
