"""The assembled model and the batching shared by training, evaluation and serving."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .data import PAD, BehaviorSequence, EventLog, SampledSubgraph, SocialGraph, sample_subgraph
from .social_gat import SocialGAT, encode_social_batch
from .transformer import Transformer, glorot_

VARIANTS = ("full", "transformer_only", "gat_only")


def torch_dtype(precision: int) -> torch.dtype:
    return torch.float64 if precision == 64 else torch.float32


def fuse(h_personal: torch.Tensor, h_social: torch.Tensor, w_f: torch.Tensor) -> torch.Tensor:
    """W_F [h_personal; h_social]; accepts single vectors or (B, d) rows."""
    return torch.cat([h_personal, h_social], dim=-1) @ w_f.T


def subgraph_seed(seed: int, tag: int, user: int, cut_time: int) -> list[int]:
    return [int(seed), int(tag), int(user), int(cut_time) % (1 << 63)]


@dataclass
class PreparedBatch:
    """Everything a forward pass needs, built on the host side.

    ``seq_items`` holds one row per distinct behavior window; ``root_rows[b]``
    is instance ``b``'s own window and ``index[b]`` maps every node of its
    subgraph to a window row.
    """

    seq_items: torch.Tensor
    root_rows: list[int]
    subgraphs: list[SampledSubgraph]
    index: list[dict[int, int]]

    def item_ids(self) -> np.ndarray:
        return np.unique(self.seq_items.numpy())


def prepare_batch(seqs: Sequence[BehaviorSequence], log: EventLog, graph: SocialGraph | None,
                  cfg: RunConfig, seed: int, tag: int = 0, variant: str | None = None,
                  subgraphs: Sequence[SampledSubgraph] | None = None) -> PreparedBatch:
    """Sample friend subgraphs and gather every needed window.

    Friend windows contain only events strictly before the instance's
    ``cut_time``; the root's own window is taken as given.
    """
    variant = variant or cfg.variant
    rows: dict[tuple[int, bytes], int] = {}
    windows: list[np.ndarray] = []

    def row_of(user: int, items: np.ndarray) -> int:
        key = (user, items.tobytes())
        if key not in rows:
            rows[key] = len(windows)
            windows.append(items)
        return rows[key]

    root_rows, sgs, index = [], [], []
    for b, seq in enumerate(seqs):
        root_rows.append(row_of(seq.user_id, seq.items))
        if variant == "transformer_only":
            continue
        if subgraphs is not None:
            sg = subgraphs[b]
        else:
            sg = sample_subgraph(graph, seq.user_id, cfg.fanouts[:cfg.l_G], cfg.sampling,
                                 subgraph_seed(seed, tag, seq.user_id, seq.cut_time))
        ix = {seq.user_id: root_rows[-1]}
        for node in sg.nodes():
            if node not in ix:
                ix[node] = row_of(node, log.window_before(node, seq.cut_time, cfg.m).items)
        sgs.append(sg)
        index.append(ix)
    items = torch.from_numpy(np.stack(windows)) if windows else torch.zeros(0, cfg.m, dtype=torch.long)
    return PreparedBatch(items, root_rows, sgs, index)


class SocialTrans(nn.Module):
    """Personal Transformer, social GAT and the fusion matrix.

    ``variant`` selects what the user representation is:
    ``full`` (fused), ``transformer_only`` (personal embedding only) or
    ``gat_only`` (GAT over mean clicked-item embeddings, then fused).
    """

    def __init__(self, n_items: int, cfg: RunConfig):
        super().__init__()
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        self.variant = cfg.variant
        dtype = torch_dtype(cfg.precision)
        self.transformer = Transformer(n_items, cfg.d, cfg.r, cfg.m, cfg.l_T, dropout=cfg.dropout,
                                       seed=cfg.seed, dtype=dtype)
        self.gat = SocialGAT(cfg.d, cfg.r, cfg.l_G, seed=cfg.seed + 1, dtype=dtype,
                             dropout=cfg.gat_dropout)
        g = torch.Generator().manual_seed(cfg.seed + 2)
        self.w_f = nn.Parameter(glorot_(torch.zeros(cfg.d, 2 * cfg.d, dtype=torch.float64), g).to(dtype))

    @property
    def item_emb(self) -> nn.Parameter:
        return self.transformer.item_emb

    @property
    def dtype(self) -> torch.dtype:
        return self.w_f.dtype

    def personal(self, seq_items: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.variant == "gat_only":
            emb = self.item_emb[seq_items]
            count = (seq_items != PAD).sum(dim=-1, keepdim=True).clamp(min=1).to(emb.dtype)
            return emb.sum(dim=-2) / count
        return self.transformer(seq_items, generator=generator)

    def forward(self, batch: PreparedBatch, generator: torch.Generator | None = None,
                return_parts: bool = False):
        """User representations (B, d) for the batch roots."""
        personal = self.personal(batch.seq_items, generator)
        h_p = personal[batch.root_rows]
        if self.variant == "transformer_only":
            return (h_p, h_p, None) if return_parts else h_p
        h_s = encode_social_batch(self.gat, batch.subgraphs, personal, batch.index, generator=generator)
        h = fuse(h_p, h_s, self.w_f)
        return (h, h_p, h_s) if return_parts else h

    def used_parameters(self) -> set[str]:
        """Names of parameters the variant's forward pass reads."""
        names = {n for n, _ in self.named_parameters()}
        if self.variant == "transformer_only":
            return {n for n in names if n.startswith("transformer.")}
        if self.variant == "gat_only":
            return {n for n in names if not n.startswith("transformer.")} | {"transformer.item_emb"}
        return names

    def scores(self, h: torch.Tensor) -> torch.Tensor:
        """Dot-product scores against every real item, (B, n_items); column j is item j+1."""
        return h @ self.item_emb[1:].T
