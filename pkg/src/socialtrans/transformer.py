"""Causal multi-layer Transformer producing the personal preference embedding."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .data import PAD, BehaviorSequence

# Finite stand-in for -inf on masked logits; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9
LN_EPS = 1e-6


def glorot_(t: torch.Tensor, generator: torch.Generator, fan_in: int | None = None,
            fan_out: int | None = None) -> torch.Tensor:
    fan_in = t.shape[0] if fan_in is None else fan_in
    fan_out = t.shape[-1] if fan_out is None else fan_out
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
    return t


def gelu(x: torch.Tensor) -> torch.Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    return F.gelu(x, approximate="none")


def dropout(x: torch.Tensor, p: float, training: bool,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout drawing its mask from ``generator``."""
    if not training or p <= 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=torch.float64) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def causal_mask(m: int, device=None) -> torch.Tensor:
    """True where the key position lies after the query position."""
    return torch.triu(torch.ones(m, m, dtype=torch.bool, device=device), diagonal=1)


def embed_input(items: torch.Tensor, item_emb: torch.Tensor, pos_emb: torch.Tensor) -> torch.Tensor:
    """Row tau = item_emb[items[tau]] + pos_emb[tau]; works on (..., m) item tensors."""
    return item_emb[items] + pos_emb


def scaled_dot_attention(q, k, v, causal: bool = True, p_drop: float = 0.0,
                         training: bool = False, return_weights: bool = False, generator=None):
    """softmax(Q K^T / sqrt(d_s)) V over the last two dims, optionally causal."""
    d_s = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_s)
    if causal:
        logits = logits.masked_fill(causal_mask(q.shape[-2], q.device), MASK_VALUE)
    weights = torch.softmax(logits, dim=-1)
    attn = dropout(weights, p_drop, training, generator)
    out = attn @ v
    return (out, weights) if return_weights else out


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    """(..., m, d) -> (..., r, m, d_s)."""
    *lead, m, d = x.shape
    return x.reshape(*lead, m, n_heads, d // n_heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """(..., r, m, d_s) -> (..., m, r * d_s), head 1 first."""
    *lead, r, m, d_s = x.shape
    return x.transpose(-3, -2).reshape(*lead, m, r * d_s)


def multi_head_layer(h: torch.Tensor, w_q, w_k, w_v, w_o, n_heads: int, p_drop: float = 0.0,
                     training: bool = False, return_weights: bool = False, generator=None):
    """Causal multi-head self-attention.

    ``w_q``/``w_k``/``w_v`` are d x d with head ``i`` owning columns
    ``i*d_s:(i+1)*d_s``; the concatenated heads are right-multiplied by ``w_o``.
    """
    q = split_heads(h @ w_q, n_heads)
    k = split_heads(h @ w_k, n_heads)
    v = split_heads(h @ w_v, n_heads)
    heads, weights = scaled_dot_attention(q, k, v, causal=True, p_drop=p_drop, training=training,
                                          return_weights=True, generator=generator)
    out = merge_heads(heads) @ w_o
    return (out, weights) if return_weights else out


def ffn(a: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    return gelu(a @ w1 + b1) @ w2 + b2


def add_norm(x: torch.Tensor, y: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor,
             eps: float = LN_EPS) -> torch.Tensor:
    """LayerNorm(x + y) over the last dim, population variance."""
    z = x + y
    mu = z.mean(dim=-1, keepdim=True)
    var = ((z - mu) ** 2).mean(dim=-1, keepdim=True)
    return alpha * (z - mu) / torch.sqrt(var + eps) + beta


class TransformerLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, generator: torch.Generator, dtype=torch.float64):
        super().__init__()
        self.n_heads = n_heads
        new = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=torch.float64))
        self.w_q, self.w_k, self.w_v, self.w_o = new(d, d), new(d, d), new(d, d), new(d, d)
        self.w_ffn1, self.w_ffn2 = new(d, d), new(d, d)
        self.b_ffn1, self.b_ffn2 = new(d), new(d)
        self.ln1_alpha, self.ln1_beta = nn.Parameter(torch.ones(d, dtype=torch.float64)), new(d)
        self.ln2_alpha, self.ln2_beta = nn.Parameter(torch.ones(d, dtype=torch.float64)), new(d)
        # per-head projections are d x d_s
        for w in (self.w_q, self.w_k, self.w_v):
            glorot_(w, generator, fan_in=d, fan_out=d // n_heads)
        for w in (self.w_o, self.w_ffn1, self.w_ffn2):
            glorot_(w, generator)
        self.to(dtype)

    def forward(self, h: torch.Tensor, p_drop: float = 0.0, return_weights: bool = False,
                generator: torch.Generator | None = None):
        a, weights = multi_head_layer(h, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads,
                                      p_drop=p_drop, training=self.training, return_weights=True,
                                      generator=generator)
        b = add_norm(h, a, self.ln1_alpha, self.ln1_beta)
        f = ffn(b, self.w_ffn1, self.b_ffn1, self.w_ffn2, self.b_ffn2)
        f = dropout(f, p_drop, self.training, generator)
        out = add_norm(b, f, self.ln2_alpha, self.ln2_beta)
        return (out, weights) if return_weights else out


class Transformer(nn.Module):
    """Item table, positional table and ``n_layers`` post-norm causal layers.

    Row 0 of ``item_emb`` is the pad item; it starts at zero and the
    optimizer never touches it.
    """

    def __init__(self, n_items: int, d: int, n_heads: int, m: int, n_layers: int,
                 dropout: float = 0.0, seed: int = 0, dtype=torch.float64):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by r={n_heads}")
        g = torch.Generator().manual_seed(seed)
        self.d, self.n_heads, self.m, self.dropout = d, n_heads, m, dropout
        self.item_emb = nn.Parameter(glorot_(torch.zeros(n_items + 1, d, dtype=torch.float64), g))
        with torch.no_grad():
            self.item_emb[PAD].zero_()
        self.pos_emb = nn.Parameter(glorot_(torch.zeros(m, d, dtype=torch.float64), g))
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads, g) for _ in range(n_layers))
        self.to(dtype)

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0] - 1

    def forward(self, items: torch.Tensor, return_states: bool = False,
                generator: torch.Generator | None = None):
        """Encode (B, m) item ids; returns the last row of the top layer, (B, d).

        With ``return_states`` also returns ``[H0, H1, ..., H_lT]`` and the
        per-layer attention weights.
        """
        h = embed_input(items, self.item_emb, self.pos_emb)
        states, weights = [h], []
        for layer in self.layers:
            h, w = layer(h, p_drop=self.dropout, return_weights=True, generator=generator)
            states.append(h)
            weights.append(w)
        out = h[..., -1, :]
        return (out, states, weights) if return_states else out


def encode_personal(seq: BehaviorSequence, model: Transformer, with_meta: bool = False):
    """Personal preference embedding for one sequence (dropout off)."""
    was_training = model.training
    model.eval()
    try:
        items = torch.as_tensor(seq.items, dtype=torch.long).unsqueeze(0)
        vec = model(items)[0]
    finally:
        model.train(was_training)
    if with_meta:
        return vec, {"all_pad": bool((seq.items == PAD).all())}
    return vec
