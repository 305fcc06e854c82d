"""Edge-attributed multi-head graph attention over sampled friend subgraphs."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import EDGE_ATTR_DIM, SampledSubgraph
from .transformer import MASK_VALUE, dropout, gelu, glorot_

MAX_GAT_LAYERS = 2


class ContractError(RuntimeError):
    """A frame lacks an embedding the subgraph says is needed."""


class ConfigError(ValueError):
    pass


def gat_similarity(h_u: torch.Tensor, h_v: torch.Tensor, e: torch.Tensor, w_q: torch.Tensor,
                   w_k: torch.Tensor, w_e: torch.Tensor) -> torch.Tensor:
    """delta = (W_Q h_u) . (W_K h_v) + w_E . e for one head (W_Q, W_K are d_s x d)."""
    return (w_q @ h_u) @ (w_k @ h_v) + w_e @ e


def gat_attention_weights(deltas: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last dim; slot 0 is the node itself and is never masked."""
    if mask is not None:
        deltas = deltas.masked_fill(~mask, MASK_VALUE)
    return torch.softmax(deltas, dim=-1)


class GATLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_e: int, generator: torch.Generator, dtype=torch.float64,
                 p_drop: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.p_drop = p_drop
        d_s = d // n_heads
        new = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=torch.float64))
        # head i owns rows i*d_s:(i+1)*d_s of w_q / w_k / w_v
        self.w_q, self.w_k, self.w_v = new(d, d), new(d, d), new(d, d)
        self.w_e = new(n_heads, d_e)
        self.w_o = new(d, d)
        for w in (self.w_q, self.w_k, self.w_v):
            glorot_(w, generator, fan_in=d, fan_out=d_s)
        glorot_(self.w_e, generator)
        glorot_(self.w_o, generator)
        self.to(dtype)

    def forward(self, emb: torch.Tensor, attrs: torch.Tensor, mask: torch.Tensor,
                return_weights: bool = False, generator: torch.Generator | None = None):
        """One GAT layer for T target nodes.

        emb: (T, 1+F, d) with slot 0 the target itself and slots 1.. its
        neighbors in ascending id order; attrs: (T, 1+F, d_e) with zeros in
        slot 0; mask: (T, 1+F) bool, False on padding.
        """
        t, f1, d = emb.shape
        r = self.n_heads
        q = (emb[:, 0] @ self.w_q.T).reshape(t, r, d // r)
        k = (emb @ self.w_k.T).reshape(t, f1, r, d // r)
        v = (emb @ self.w_v.T).reshape(t, f1, r, d // r)
        deltas = torch.einsum("trs,tfrs->trf", q, k) + torch.einsum("tfe,re->trf", attrs, self.w_e)
        kappa = gat_attention_weights(deltas, mask.unsqueeze(1))
        attn = dropout(kappa, self.p_drop, self.training, generator)
        heads = gelu(torch.einsum("trf,tfrs->trs", attn, v))
        out = heads.reshape(t, d) @ self.w_o.T
        return (out, kappa) if return_weights else out


class SocialGAT(nn.Module):
    def __init__(self, d: int, n_heads: int, n_layers: int, d_e: int = EDGE_ATTR_DIM, seed: int = 0,
                 dtype=torch.float64, dropout: float = 0.0):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by r={n_heads}")
        if not 1 <= n_layers <= MAX_GAT_LAYERS:
            raise ConfigError(f"l_G must be in [1, {MAX_GAT_LAYERS}], got {n_layers}")
        g = torch.Generator().manual_seed(seed)
        self.d, self.d_e = d, d_e
        self.layers = nn.ModuleList(GATLayer(d, n_heads, d_e, g, p_drop=dropout) for _ in range(n_layers))
        self.to(dtype)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def _gather(subgraph: SampledSubgraph, node: int, nbr_lists) -> list:
    if node not in nbr_lists:
        raise ContractError(f"node {node} has no neighbor list in subgraph rooted at {subgraph.root}")
    return sorted(nbr_lists[node], key=lambda p: p[0])


def encode_social_batch(gat: SocialGAT, subgraphs: Sequence[SampledSubgraph], layer0: torch.Tensor,
                        index: Sequence[Mapping[int, int]], n_layers: int | None = None,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Social embeddings of every subgraph root, shape (B, d).

    ``index[b][node]`` is the row of ``layer0`` holding ``node``'s personal
    embedding for subgraph ``b``. Layer ``l`` is evaluated for the nodes within
    ``n_layers - l`` hops of each root.
    """
    n_layers = gat.n_layers if n_layers is None else n_layers
    for sg in subgraphs:
        if len(sg.layers) < n_layers:
            raise ConfigError(f"GAT depth {n_layers} exceeds sampled hop depth {len(sg.layers)}")
    nbr_lists = [sg.neighbor_lists() for sg in subgraphs]
    prev, prev_index = layer0, [dict(ix) for ix in index]
    d_e = gat.d_e
    for l in range(1, n_layers + 1):
        rows, attrs, new_index = [], [], []
        for b, sg in enumerate(subgraphs):
            ix = {}
            for node in sg.nodes_within(n_layers - l):
                nbrs = _gather(sg, node, nbr_lists[b])
                try:
                    rows.append([prev_index[b][node]] + [prev_index[b][v] for v, _ in nbrs])
                except KeyError as exc:
                    raise ContractError(f"missing embedding for node {exc.args[0]} "
                                        f"(subgraph root {sg.root}, layer {l})") from None
                attrs.append([e for _, e in nbrs])
                ix[node] = len(rows) - 1
            new_index.append(ix)
        width = max(len(r) for r in rows)
        idx = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        attr_np = np.zeros((len(rows), width, d_e))
        for i, (r, a) in enumerate(zip(rows, attrs)):
            idx[i, :len(r)] = r
            mask[i, :len(r)] = True
            if a:
                attr_np[i, 1:len(r)] = a
        idx, mask = torch.from_numpy(idx), torch.from_numpy(mask)
        attr_t = torch.from_numpy(attr_np)
        emb = prev[idx]
        prev = gat.layers[l - 1](emb, attr_t.to(emb.dtype), mask, generator=generator)
        prev_index = new_index
    return prev[[prev_index[b][sg.root] for b, sg in enumerate(subgraphs)]]


def gat_layer(frame: Mapping[int, torch.Tensor], subgraph: SampledSubgraph, layer: GATLayer,
              targets: Sequence[int] | None = None) -> dict[int, torch.Tensor]:
    """Apply one layer to ``targets`` (default: every node with a neighbor list).

    ``frame`` maps node id -> embedding of the previous layer.
    """
    nbr_lists = subgraph.neighbor_lists()
    targets = sorted(nbr_lists) if targets is None else list(targets)
    out = {}
    for node in targets:
        nbrs = _gather(subgraph, node, nbr_lists)
        missing = [v for v in [node] + [v for v, _ in nbrs] if v not in frame]
        if missing:
            raise ContractError(f"frame lacks embeddings for nodes {missing}")
        emb = torch.stack([frame[node]] + [frame[v] for v, _ in nbrs]).unsqueeze(0)
        attrs = torch.zeros(1, 1 + len(nbrs), layer.w_e.shape[1], dtype=emb.dtype)
        if nbrs:
            attrs[0, 1:] = torch.from_numpy(np.stack([e for _, e in nbrs])).to(emb.dtype)
        mask = torch.ones(1, 1 + len(nbrs), dtype=torch.bool)
        out[node] = layer(emb, attrs, mask)[0]
    return out


def encode_social(user: int, personal: Mapping[int, torch.Tensor], subgraph: SampledSubgraph,
                  gat: SocialGAT, n_layers: int | None = None) -> torch.Tensor:
    """Socially influenced embedding of ``user`` from a frame of personal embeddings."""
    if subgraph.root != user:
        raise ContractError(f"subgraph rooted at {subgraph.root}, not {user}")
    nodes = sorted(personal)
    layer0 = torch.stack([personal[n] for n in nodes])
    index = {n: i for i, n in enumerate(nodes)}
    return encode_social_batch(gat, [subgraph], layer0, [index], n_layers)[0]
