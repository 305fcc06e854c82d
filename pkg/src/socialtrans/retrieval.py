"""Staged embedding generation, a SimHash user index and user-based CF.

Embedding files hold one record per line, ``user_id \\t base64(vector)``,
where the vector is little-endian float32 (``<f4``) or, for 64-bit models,
float64 (``<f8``); ``manifest.json`` records which. ``user_id`` is the dense
id assigned at ingest.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import file_sha256
from .config import RunConfig
from .data import EventLog, SampledSubgraph, SocialGraph, sample_subgraph
from .model import SocialTrans, fuse, subgraph_seed
from .social_gat import encode_social_batch

log = logging.getLogger(__name__)

NAMESPACES = ("personal", "social", "fused")
SERVE_TAG = 7


class StageError(RuntimeError):
    pass


def encode_vector(v: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.asarray(v, dtype=np.dtype(dtype)).tobytes()).decode("ascii")


def decode_vector(s: str, dtype: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=np.dtype(dtype)).copy()


def write_vectors(path: Path, vectors: Mapping[int, np.ndarray], dtype: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for key in sorted(vectors):
            fh.write(f"{key}\t{encode_vector(vectors[key], dtype)}\n")
    os.replace(tmp, path)


def read_vectors(path: Path, dtype: str) -> dict[int, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            key, payload = line.rstrip("\n").split("\t")
            out[int(key)] = decode_vector(payload, dtype)
    return out


@dataclass
class EmbeddingStore:
    """user -> vector per namespace (personal, social, fused) plus a manifest."""

    namespaces: dict[str, dict[int, np.ndarray]]
    manifest: dict = field(default_factory=dict)

    def vectors(self, namespace: str = "fused") -> tuple[np.ndarray, np.ndarray]:
        ns = self.namespaces[namespace]
        ids = np.array(sorted(ns), dtype=np.int64)
        mat = np.stack([ns[i] for i in ids]) if len(ids) else np.zeros((0, self.manifest.get("d", 0)))
        return ids, mat

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "EmbeddingStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        dtype = manifest["dtype"]
        namespaces = {ns: read_vectors(directory / f"{ns}.tsv", dtype)
                      for ns in NAMESPACES if (directory / f"{ns}.tsv").exists()}
        return cls(namespaces, manifest)


def _model_dtype(model: SocialTrans) -> str:
    return "<f8" if model.dtype == torch.float64 else "<f4"


@torch.no_grad()
def personal_embeddings(model: SocialTrans, log: EventLog, users: Sequence[int], cut_time: int,
                        cfg: RunConfig, chunk: int = 256) -> dict[int, np.ndarray]:
    """Stage 1 computation: personal embeddings of ``users`` from events before ``cut_time``."""
    model.eval()
    out = {}
    for start in range(0, len(users), chunk):
        part = users[start:start + chunk]
        items = np.stack([log.window_before(u, cut_time, cfg.m).items for u in part])
        vecs = model.personal(torch.from_numpy(items)).numpy()
        out.update({int(u): vecs[i] for i, u in enumerate(part)})
    return out


@torch.no_grad()
def social_and_fused(model: SocialTrans, subgraphs: Sequence[SampledSubgraph],
                     frames: Sequence[Mapping[int, np.ndarray]], chunk: int = 256
                     ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Stage 3 computation: GAT over each root's frame, then fusion."""
    model.eval()
    social, fused = {}, {}
    for start in range(0, len(subgraphs), chunk):
        sgs = subgraphs[start:start + chunk]
        rows, index = [], []
        for sg, frame in zip(sgs, frames[start:start + chunk]):
            ix = {}
            for node in sorted(frame):
                ix[node] = len(rows)
                rows.append(frame[node])
            index.append(ix)
        layer0 = torch.from_numpy(np.stack(rows)).to(model.dtype)
        h_p = layer0[[ix[sg.root] for sg, ix in zip(sgs, index)]]
        if model.variant == "transformer_only":
            h_s, h = h_p, h_p
        else:
            h_s = encode_social_batch(model.gat, sgs, layer0, index)
            h = fuse(h_p, h_s, model.w_f)
        for i, sg in enumerate(sgs):
            social[sg.root] = h_s[i].numpy()
            fused[sg.root] = h[i].numpy()
    return social, fused


def _subgraph_for(graph: SocialGraph, user: int, cfg: RunConfig, cut_time: int) -> SampledSubgraph:
    return sample_subgraph(graph, user, cfg.fanouts[:cfg.l_G], cfg.sampling,
                           subgraph_seed(cfg.seed, SERVE_TAG, user, cut_time))


def _serve_time(log: EventLog, cut_time: int | None) -> int:
    if cut_time is not None:
        return int(cut_time)
    return int(log.times.max()) + 1 if len(log) else 0


def run_stage1(model: SocialTrans, cfg: RunConfig, log: EventLog, graph: SocialGraph, out_dir: Path,
               cut_time: int) -> None:
    dtype = _model_dtype(model)
    users = list(range(graph.n_users))
    write_vectors(out_dir / "stage1_personal.tsv", personal_embeddings(model, log, users, cut_time, cfg), dtype)
    items = model.item_emb.detach().numpy()
    write_vectors(out_dir / "items.tsv", {i: items[i] for i in range(1, len(items))}, dtype)


def run_stage2(cfg: RunConfig, graph: SocialGraph, out_dir: Path, cut_time: int, dtype: str) -> None:
    personal = read_vectors(out_dir / "stage1_personal.tsv", dtype)
    tmp = out_dir / "stage2_joined.jsonl.tmp"
    with open(tmp, "w") as fh:
        for user in range(graph.n_users):
            if user not in personal:
                raise StageError(f"stage 1 output has no personal embedding for user {user}")
            sg = _subgraph_for(graph, user, cfg, cut_time)
            frame = {}
            for node in sg.nodes():
                if node not in personal:
                    raise StageError(f"user {user}: friend {node} missing from stage 1 output")
                frame[str(node)] = encode_vector(personal[node], dtype)
            layers = [{str(n): [[v, [float(x) for x in e]] for v, e in nbrs] for n, nbrs in layer.items()}
                      for layer in sg.layers]
            fh.write(json.dumps({"user": user, "layers": layers, "frame": frame}, separators=(",", ":")) + "\n")
    os.replace(tmp, out_dir / "stage2_joined.jsonl")


def run_stage3(model: SocialTrans, out_dir: Path, dtype: str) -> None:
    subgraphs, frames = [], []
    with open(out_dir / "stage2_joined.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            layers = [{int(n): [(int(v), np.asarray(e, dtype=np.float64)) for v, e in nbrs]
                       for n, nbrs in layer.items()} for layer in rec["layers"]]
            subgraphs.append(SampledSubgraph(rec["user"], layers))
            frames.append({int(n): decode_vector(b, dtype) for n, b in rec["frame"].items()})
    social, fused = social_and_fused(model, subgraphs, frames)
    personal = {sg.root: frame[sg.root] for sg, frame in zip(subgraphs, frames)}
    write_vectors(out_dir / "personal.tsv", personal, dtype)
    write_vectors(out_dir / "social.tsv", social, dtype)
    write_vectors(out_dir / "fused.tsv", fused, dtype)


def generate_embeddings(checkpoint: str | os.PathLike, log: EventLog, graph: SocialGraph,
                        out_dir: str | os.PathLike, cut_time: int | None = None,
                        stages: Sequence[int] = (1, 2, 3), model: SocialTrans | None = None,
                        cfg: RunConfig | None = None) -> EmbeddingStore:
    """Run the three file-connected stages.

    1. personal embeddings for every user, plus the item table;
    2. join each user's sampled subgraph with its members' personal embeddings;
    3. GAT and fusion, writing ``personal``/``social``/``fused`` namespaces.

    Each stage reads only the previous stage's files, so any suffix of the
    stages can be rerun on its own.
    """
    from .training import load_checkpoint

    if model is None or cfg is None:
        model, cfg, _, _ = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cut = _serve_time(log, cut_time)
    dtype = _model_dtype(model)
    if 1 in stages:
        run_stage1(model, cfg, log, graph, out_dir, cut)
    if 2 in stages:
        run_stage2(cfg, graph, out_dir, cut, dtype)
    if 3 in stages:
        run_stage3(model, out_dir, dtype)
        manifest = {"checkpoint_sha256": file_sha256(checkpoint), "d": cfg.d, "dtype": dtype,
                    "cut_time": cut, "n_users": graph.n_users, "variant": model.variant,
                    "config": cfg.to_dict()}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    if not (out_dir / "manifest.json").exists():
        return EmbeddingStore({}, {})
    return EmbeddingStore.load(out_dir)


def encode_users_direct(model: SocialTrans, cfg: RunConfig, log: EventLog, graph: SocialGraph,
                        cut_time: int | None = None) -> dict[str, dict[int, np.ndarray]]:
    """Single-pass in-memory equivalent of :func:`generate_embeddings`."""
    cut = _serve_time(log, cut_time)
    users = list(range(graph.n_users))
    personal = personal_embeddings(model, log, users, cut, cfg)
    subgraphs = [_subgraph_for(graph, u, cfg, cut) for u in users]
    frames = [{n: personal[n] for n in sg.nodes()} for sg in subgraphs]
    social, fused = social_and_fused(model, subgraphs, frames)
    return {"personal": personal, "social": social, "fused": fused}


def simhash_signature(v: np.ndarray, hyperplanes: np.ndarray) -> np.ndarray:
    """Bit j is set iff ``v . hyperplane_j >= 0``; returns a bool array."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        warnings.warn("SimHash of a zero vector: every bit set by the >= tie rule")
    return hyperplanes @ v >= 0


def _pack(bits: np.ndarray) -> np.ndarray:
    """(..., n_bits) bools -> integer signatures, bit j at position j."""
    weights = (1 << np.arange(bits.shape[-1], dtype=np.uint64)).astype(np.uint64)
    return (bits.astype(np.uint64) * weights).sum(axis=-1)


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    count = np.zeros(x.shape, dtype=np.int64)
    while np.any(x):
        count += (x & np.uint64(1)).astype(np.int64)
        x = x >> np.uint64(1)
    return count


class SimHashIndex:
    """Multi-table random-hyperplane LSH over a fixed set of vectors.

    Queries gather candidates bucket by bucket in order of Hamming distance
    from the query signature (radius 0 in every table, then radius 1, ...)
    until at least ``k`` candidates are found, and rank them by exact cosine.
    """

    def __init__(self, dim: int, n_bits: int = 16, n_tables: int = 8, seed: int = 0):
        if n_bits > 63:
            raise ValueError("n_bits must be <= 63")
        self.dim, self.n_bits, self.n_tables, self.seed = dim, n_bits, n_tables, seed
        self.hyperplanes = np.random.default_rng(seed).standard_normal((n_tables, n_bits, dim))
        self.ids = np.zeros(0, dtype=np.int64)
        self.vectors = np.zeros((0, dim))
        self.signatures = np.zeros((n_tables, 0), dtype=np.uint64)
        self.buckets: list[dict[int, list[int]]] = [{} for _ in range(n_tables)]

    def signature_bits(self, v: np.ndarray) -> np.ndarray:
        """(n_tables, n_bits) bools for one vector."""
        return np.stack([simhash_signature(v, planes) for planes in self.hyperplanes])

    def add(self, ids: Sequence[int], vectors: np.ndarray) -> "SimHashIndex":
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        ids = np.asarray(ids, dtype=np.int64)
        bits = np.einsum("tbd,nd->tnb", self.hyperplanes, vectors) >= 0
        sigs = _pack(bits)
        base = len(self.ids)
        self.ids = np.concatenate([self.ids, ids])
        self.vectors = np.concatenate([self.vectors, vectors])
        self.signatures = np.concatenate([self.signatures, sigs], axis=1)
        for t in range(self.n_tables):
            for j, s in enumerate(sigs[t]):
                self.buckets[t].setdefault(int(s), []).append(base + j)
        return self

    def position(self, user: int) -> int:
        hits = np.flatnonzero(self.ids == user)
        if not len(hits):
            raise KeyError(f"user {user} is not indexed")
        return int(hits[0])

    def candidates(self, query: np.ndarray, k: int, exclude: int | None = None) -> np.ndarray:
        """Row positions gathered by increasing Hamming radius until ``k`` are found."""
        sigs = _pack(np.einsum("tbd,d->tb", self.hyperplanes, np.asarray(query, dtype=np.float64)) >= 0)
        by_radius: dict[int, list[int]] = {}
        for t in range(self.n_tables):
            keys = np.fromiter(self.buckets[t].keys(), dtype=np.uint64, count=len(self.buckets[t]))
            dist = _popcount(keys ^ sigs[t])
            for key, r in zip(keys, dist):
                by_radius.setdefault(int(r), []).extend(self.buckets[t][int(key)])
        found: set[int] = set()
        for r in sorted(by_radius):
            found.update(p for p in by_radius[r] if p != exclude)
            if len(found) >= k:
                break
        return np.array(sorted(found), dtype=np.int64)

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, hyperplanes=self.hyperplanes, ids=self.ids, vectors=self.vectors,
                 meta=np.array([self.dim, self.n_bits, self.n_tables, self.seed]))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SimHashIndex":
        with np.load(path) as z:
            dim, n_bits, n_tables, seed = (int(x) for x in z["meta"])
            index = cls(dim, n_bits, n_tables, seed)
            index.hyperplanes = z["hyperplanes"]
            index.add(z["ids"], z["vectors"])
        return index


def cosine_rank(query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1) * (np.linalg.norm(q) or 1.0)
    return (vectors @ q) / np.where(norms > 0, norms, 1.0)


def top_similar_users(index: SimHashIndex, user: int, k_u: int = 300) -> list[tuple[int, float]]:
    """Up to ``k_u`` other users by exact cosine among the LSH candidates."""
    pos = index.position(user)
    query = index.vectors[pos]
    cand = index.candidates(query, k_u, exclude=pos)
    if not len(cand):
        return []
    sims = cosine_rank(query, index.vectors[cand])
    ids = index.ids[cand]
    order = np.lexsort((ids, -sims))[:k_u]
    return [(int(ids[i]), float(sims[i])) for i in order]


def user_cf_recommend(user: int, index: SimHashIndex, log: EventLog, k_u: int = 300, k_a: int = 10,
                      recent_window: int = 0, now: int | None = None) -> list[tuple[int, float]]:
    """Items clicked recently by similar users, scored by summed cosine.

    "Recently" means timestamp in ``[now - recent_window, now)`` (``now``
    defaults to one past the last event; window 0 means no limit). Items the
    user already clicked are removed.
    """
    now = _serve_time(log, now)
    lo = now - recent_window if recent_window > 0 else None
    seen = set(log.history(user)[0].tolist())
    scores: dict[int, float] = {}
    for other, sim in top_similar_users(index, user, k_u):
        items, times = log.history(other)
        keep = times < now
        if lo is not None:
            keep &= times >= lo
        for item in set(items[keep].tolist()):
            if item not in seen:
                scores[item] = scores.get(item, 0.0) + sim
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k_a]


def replay_hit_rate(index: SimHashIndex, train: EventLog, test: EventLog, k_u: int = 300, k_a: int = 10,
                    recent_window: int = 0) -> float:
    """Fraction of users with held-out clicks for whom a recommendation was clicked."""
    hits, total = 0, 0
    for user, (items, _) in test.histories.items():
        if user not in set(index.ids.tolist()):
            continue
        recs = {i for i, _ in user_cf_recommend(user, index, train, k_u, k_a, recent_window)}
        total += 1
        hits += bool(recs & set(items.tolist()))
    return hits / total if total else 0.0
