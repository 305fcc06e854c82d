"""Event logs, fixed-length behavior sequences, the social graph and neighbor sampling."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0
EDGE_ATTR_DIM = 2
# Edge-attribute component used for attribute-weighted neighbor sampling
# (log(1 + |common items|)).
COMMON_ITEMS_COMPONENT = 0
SUBGRAPH_CACHE_VERSION = 1


class DataError(ValueError):
    """Raised for malformed or invalid input files."""


@dataclass(frozen=True)
class EventLog:
    """Click events over dense ids, sorted by (user, timestamp).

    Users are numbered ``0..n_users-1``; items ``1..n_items`` with ``0``
    reserved for the pad item. ``user_ids`` / ``item_ids`` map dense ids back
    to the ids found in the source file (``item_ids[0]`` is the pad).
    """

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    n_users: int
    n_items: int
    user_ids: tuple = ()
    item_ids: tuple = ()

    @classmethod
    def from_records(cls, records: Iterable[tuple[int, int, int]], n_users: int | None = None,
                     n_items: int | None = None, user_ids=(), item_ids=()) -> "EventLog":
        """Build a log from dense ``(user, item, timestamp)`` triples."""
        arr = np.asarray(list(records), dtype=np.int64).reshape(-1, 3)
        users, items, times = arr[:, 0], arr[:, 1], arr[:, 2]
        if len(items) and items.min() <= PAD:
            raise DataError("item id 0 is reserved for the pad item")
        # stable: ties keep file order
        order = np.lexsort((times, users))
        users, items, times = users[order], items[order], times[order]
        if n_users is None:
            n_users = int(users.max()) + 1 if len(users) else 0
        if n_items is None:
            n_items = int(items.max()) if len(items) else 0
        if not user_ids:
            user_ids = tuple(range(n_users))
        if not item_ids:
            item_ids = tuple(range(n_items + 1))
        return cls(users, items, times, int(n_users), int(n_items), tuple(user_ids), tuple(item_ids))

    def __len__(self) -> int:
        return len(self.items)

    @cached_property
    def histories(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """user -> (items, times), chronological."""
        out = {}
        if not len(self.users):
            return out
        bounds = np.flatnonzero(np.diff(self.users)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(self.users)]])
        for s, e in zip(starts, ends):
            out[int(self.users[s])] = (self.items[s:e], self.times[s:e])
        return out

    @cached_property
    def user_index(self) -> dict:
        return {orig: i for i, orig in enumerate(self.user_ids)}

    @cached_property
    def item_counts(self) -> np.ndarray:
        """Appearance count per item id (index 0 = pad, always 0)."""
        return np.bincount(self.items, minlength=self.n_items + 1).astype(np.int64)

    def history(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        empty = np.zeros(0, dtype=np.int64)
        return self.histories.get(int(user), (empty, empty))

    def window_before(self, user: int, cut_time: int, m: int) -> "BehaviorSequence":
        """The user's last ``m`` items with timestamp strictly before ``cut_time``."""
        items, times = self.history(user)
        j = int(np.searchsorted(times, cut_time, side="left"))
        return BehaviorSequence.from_items(user, cut_time, items[:j], m)

    def subset(self, mask: np.ndarray) -> "EventLog":
        """Events selected by ``mask``, keeping the id spaces."""
        return EventLog(self.users[mask], self.items[mask], self.times[mask],
                        self.n_users, self.n_items, self.user_ids, self.item_ids)


@dataclass(frozen=True)
class BehaviorSequence:
    user_id: int
    cut_time: int
    items: np.ndarray
    true_length: int

    @classmethod
    def from_items(cls, user: int, cut_time: int, history: Sequence[int], m: int) -> "BehaviorSequence":
        recent = np.asarray(history, dtype=np.int64)[-m:] if m > 0 else np.zeros(0, np.int64)
        out = np.zeros(m, dtype=np.int64)
        if len(recent):
            out[m - len(recent):] = recent
        return cls(int(user), int(cut_time), out, len(recent))

    @property
    def key(self) -> tuple[int, int]:
        return self.user_id, self.cut_time


def _parse_tsv(path: Path, n_cols: int) -> list[tuple[int, ...]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise DataError(f"{path}:{lineno}: expected {n_cols} tab-separated fields, got {len(parts)}")
            try:
                rows.append(tuple(int(p) for p in parts))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    return rows


def load_events(path: str | os.PathLike, map_dir: str | os.PathLike | None = None) -> EventLog:
    """Read a ``user \\t item \\t timestamp`` file and densify ids.

    Original ids are mapped in ascending order; users to ``0..U-1`` and items
    to ``1..V``. When ``map_dir`` is given the mappings are written there as
    ``user_map.tsv`` and ``item_map.tsv`` (``original \\t dense``).
    """
    path = Path(path)
    rows = _parse_tsv(path, 3)
    for lineno, (_, item, _) in enumerate(rows, start=1):
        if item == PAD:
            raise DataError(f"{path}: item id 0 is reserved for padding (record {lineno})")
    user_ids = sorted({r[0] for r in rows})
    item_ids = sorted({r[1] for r in rows})
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {v: i + 1 for i, v in enumerate(item_ids)}
    records = [(uidx[u], iidx[v], t) for u, v, t in rows]
    log = EventLog.from_records(records, n_users=len(user_ids), n_items=len(item_ids),
                                user_ids=tuple(user_ids), item_ids=(PAD, *item_ids))
    if map_dir is not None:
        save_id_maps(log, map_dir)
    return log


def save_id_maps(log: EventLog, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "user_map.tsv", "w") as fh:
        for dense, orig in enumerate(log.user_ids):
            fh.write(f"{orig}\t{dense}\n")
    with open(directory / "item_map.tsv", "w") as fh:
        for dense, orig in enumerate(log.item_ids):
            if dense != PAD:
                fh.write(f"{orig}\t{dense}\n")


def build_sequences(log: EventLog, m: int, stride: int = 1) -> list[tuple[BehaviorSequence, int]]:
    """Training pairs (window strictly before the cut, item at the cut).

    Cuts are taken at every ``stride``-th event counting back from the last
    one, so the final event is always a target. The first event never is.
    """
    if m < 1 or stride < 1:
        raise ValueError("m and stride must be >= 1")
    pairs = []
    for user, (items, times) in log.histories.items():
        n = len(items)
        if n < 2:
            continue
        cuts = sorted(range(n - 1, 0, -stride))
        for j in cuts:
            seq = BehaviorSequence.from_items(user, int(times[j]), items[:j], m)
            pairs.append((seq, int(items[j])))
    return pairs


@dataclass
class SocialGraph:
    """Undirected friendship graph over dense user ids with edge attribute vectors."""

    n_users: int
    neighbors: dict[int, tuple[int, ...]]
    edge_attrs: dict[tuple[int, int], np.ndarray]
    d_e: int = EDGE_ATTR_DIM
    user_ids: tuple = ()

    def neighbors_of(self, user: int) -> tuple[int, ...]:
        return self.neighbors.get(int(user), ())

    def degree(self, user: int) -> int:
        return len(self.neighbors_of(user))

    def attr(self, u: int, v: int) -> np.ndarray:
        return self.edge_attrs[(min(u, v), max(u, v))]

    def __contains__(self, user: int) -> bool:
        return 0 <= int(user) < self.n_users

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], n_users: int, log: EventLog | None = None,
                   user_ids=()) -> "SocialGraph":
        """Symmetric graph from dense edges; attributes computed from ``log``.

        Attribute vector: ``[log(1 + |common items|), log(1 + min(deg u, deg v))]``.
        Self-loops are dropped and duplicates merged.
        """
        adj: dict[int, set[int]] = {}
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                continue
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
        item_sets: dict[int, set[int]] = {}
        if log is not None:
            item_sets = {u: set(items.tolist()) for u, (items, _) in log.histories.items()}
        attrs = {}
        for u, nbrs in adj.items():
            for v in nbrs:
                if u < v:
                    common = len(item_sets.get(u, set()) & item_sets.get(v, set()))
                    deg = min(len(adj[u]), len(adj[v]))
                    attrs[(u, v)] = np.array([math.log1p(common), math.log1p(deg)])
        neighbors = {u: tuple(sorted(n)) for u, n in adj.items()}
        return cls(int(n_users), neighbors, attrs, EDGE_ATTR_DIM, tuple(user_ids) or tuple(range(n_users)))

    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.edge_attrs)


def build_graph(edge_path: str | os.PathLike, log: EventLog) -> SocialGraph:
    """Read ``user \\t user`` friendship rows using the log's user id mapping.

    Users unknown to the log get fresh dense ids (and an empty history).
    """
    rows = _parse_tsv(Path(edge_path), 2)
    user_ids = list(log.user_ids)
    index = dict(log.user_index)

    def dense(orig):
        if orig not in index:
            index[orig] = len(user_ids)
            user_ids.append(orig)
        return index[orig]

    edges = [(dense(a), dense(b)) for a, b in rows]
    return SocialGraph.from_edges(edges, len(user_ids), log=log, user_ids=tuple(user_ids))


@dataclass
class SampledSubgraph:
    """Layered neighbor sample rooted at ``root``.

    ``layers[k]`` maps each depth-``k`` frontier node to its sampled
    neighbors as ``(node, edge_attr)`` pairs, sorted by node id.
    """

    root: int
    layers: list[dict[int, list[tuple[int, np.ndarray]]]] = field(default_factory=list)

    def neighbor_lists(self) -> dict[int, list[tuple[int, np.ndarray]]]:
        """Node -> sampled neighbors, taken from the shallowest layer listing the node."""
        out: dict[int, list[tuple[int, np.ndarray]]] = {}
        for layer in self.layers:
            for node, nbrs in layer.items():
                out.setdefault(node, nbrs)
        return out

    def nodes(self) -> list[int]:
        seen = {self.root}
        for layer in self.layers:
            for node, nbrs in layer.items():
                seen.add(node)
                seen.update(n for n, _ in nbrs)
        return sorted(seen)

    def nodes_within(self, hops: int) -> list[int]:
        seen = {self.root}
        for layer in self.layers[:hops]:
            for nbrs in layer.values():
                seen.update(n for n, _ in nbrs)
        return sorted(seen)


def _sample_neighbors(graph: SocialGraph, node: int, fanout: int, mode: str,
                      rng: np.random.Generator) -> list[int]:
    nbrs = np.asarray(graph.neighbors_of(node), dtype=np.int64)
    if len(nbrs) <= fanout:
        return nbrs.tolist()
    if mode == "uniform":
        picked = rng.choice(nbrs, size=fanout, replace=False)
    elif mode == "attribute_weighted":
        w = np.array([graph.attr(node, int(v))[COMMON_ITEMS_COMPONENT] for v in nbrs])
        positive = nbrs[w > 0]
        if len(positive) >= fanout:
            p = w[w > 0] / w[w > 0].sum()
            picked = rng.choice(positive, size=fanout, replace=False, p=p)
        else:
            # zero-weight neighbors only fill what the weighted ones cannot
            rest = rng.choice(nbrs[w <= 0], size=fanout - len(positive), replace=False)
            picked = np.concatenate([positive, rest])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return sorted(int(v) for v in picked)


def sample_subgraph(graph: SocialGraph, root: int, fanouts: Sequence[int], mode: str = "uniform",
                    rng_seed: int | np.random.SeedSequence | Sequence[int] = 0) -> SampledSubgraph:
    """Sample a ``len(fanouts)``-hop neighborhood of ``root`` without replacement."""
    rng = np.random.default_rng(rng_seed)
    layers: list[dict[int, list[tuple[int, np.ndarray]]]] = []
    frontier = [int(root)]
    for fanout in fanouts:
        layer = {}
        nxt = set()
        for node in frontier:
            picked = _sample_neighbors(graph, node, int(fanout), mode, rng) if node in graph else []
            layer[node] = [(v, graph.attr(node, v)) for v in picked]
            nxt.update(picked)
        layers.append(layer)
        frontier = sorted(nxt)
    return SampledSubgraph(int(root), layers)


def write_subgraph_cache(path: str | os.PathLike, records: Iterable[tuple[int, int, SampledSubgraph]],
                         d_e: int = EDGE_ATTR_DIM) -> None:
    """Write ``(root, replica, subgraph)`` records (layout documented in the README)."""
    records = list(records)
    n_layers = max((len(s.layers) for _, _, s in records), default=0)
    with open(path, "w") as fh:
        fh.write(f"#socialtrans-subgraph-cache\tv{SUBGRAPH_CACHE_VERSION}\td_e={d_e}\tlayers={n_layers}\n")
        for root, replica, sub in records:
            layers = [{str(node): [[v, [float(x) for x in e]] for v, e in nbrs] for node, nbrs in layer.items()}
                      for layer in sub.layers]
            fh.write(f"{root}\t{replica}\t{json.dumps(layers, separators=(',', ':'))}\n")


def read_subgraph_cache(path: str | os.PathLike) -> list[tuple[int, int, SampledSubgraph]]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[0] != "#socialtrans-subgraph-cache" or header[1] != f"v{SUBGRAPH_CACHE_VERSION}":
            raise DataError(f"{path}: unsupported subgraph cache header {header}")
        out = []
        for line in fh:
            root, replica, payload = line.rstrip("\n").split("\t", 2)
            layers = [{int(node): [(int(v), np.asarray(e, dtype=np.float64)) for v, e in nbrs]
                       for node, nbrs in layer.items()} for layer in json.loads(payload)]
            out.append((int(root), int(replica), SampledSubgraph(int(root), layers)))
    return out
