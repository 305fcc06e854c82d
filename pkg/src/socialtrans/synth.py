"""Synthetic social click streams with a tunable amount of friend influence.

Every user clicks once per tick. With probability ``rho`` the click copies
what a random friend clicked on the previous tick; otherwise the user's own
Markov chain advances. Each chain lives on a small user-specific item subset
(``chain_length`` items) with ``branching`` equally likely successors per
item, so ``branching=1`` gives a deterministic cycle.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class SynthSpec:
    n_users: int = 200
    n_items: int = 100
    rho: float = 0.0
    ticks: int = 30
    avg_friends: int = 3
    chain_length: int = 5
    branching: int = 1
    seed: int = 0

    def check(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.n_users < 2 or self.n_items < 1 or self.ticks < 1:
            raise ValueError("need at least 2 users, 1 item and 1 tick")
        if not 1 <= self.chain_length <= self.n_items:
            raise ValueError("chain_length must be in [1, n_items]")
        if not 1 <= self.branching <= self.chain_length:
            raise ValueError("branching must be in [1, chain_length]")


@dataclass
class SynthData:
    spec: SynthSpec
    events: list[tuple[int, int, int]]
    edges: list[tuple[int, int]]
    sources: list[str]
    chains: dict[int, dict[int, list[int]]]


def _friendships(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    edges = set()
    per_user = max(1, spec.avg_friends // 2 + (spec.avg_friends % 2))
    for u in range(spec.n_users):
        others = rng.choice(spec.n_users - 1, size=min(per_user, spec.n_users - 1), replace=False)
        for o in others:
            v = int(o) + (o >= u)
            edges.add((min(u, v), max(u, v)))
    return sorted(edges)


def generate(spec: SynthSpec) -> SynthData:
    spec.check()
    rng = np.random.default_rng(spec.seed)
    edges = _friendships(spec, rng)
    friends: dict[int, list[int]] = {u: [] for u in range(spec.n_users)}
    for a, b in edges:
        friends[a].append(b)
        friends[b].append(a)
    chains = {}
    for u in range(spec.n_users):
        subset = rng.choice(np.arange(1, spec.n_items + 1), size=spec.chain_length, replace=False)
        succ = {}
        for i, item in enumerate(subset):
            # successor 0 follows the cycle; extra branches are random subset members
            nxt = [int(subset[(i + 1) % len(subset)])]
            others = [int(x) for x in subset if int(x) not in nxt]
            if spec.branching > 1:
                nxt += [int(x) for x in rng.choice(others, size=spec.branching - 1, replace=False)]
            succ[int(item)] = nxt
        chains[u] = succ
    state = {u: int(rng.choice(list(chains[u]))) for u in range(spec.n_users)}
    last = dict(state)
    events, sources = [], []
    for u in range(spec.n_users):
        events.append((u, last[u], 0))
        sources.append("chain")
    for t in range(1, spec.ticks):
        prev = dict(last)
        for u in range(spec.n_users):
            if friends[u] and rng.random() < spec.rho:
                f = friends[u][int(rng.integers(len(friends[u])))]
                item, src = prev[f], "copy"
            else:
                options = chains[u][state[u]]
                item = options[int(rng.integers(len(options)))]
                state[u] = item
                src = "chain"
            last[u] = item
            events.append((u, item, t))
            sources.append(src)
    return SynthData(spec, events, edges, sources, chains)


def write_dataset(data: SynthData, directory: str | os.PathLike) -> dict[str, Path]:
    """Write ``events.tsv``, ``edges.tsv`` and ``truth.json``.

    Raw ids are written shifted by one for users so that dense and raw ids
    never coincide by accident.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"events": directory / "events.tsv", "edges": directory / "edges.tsv",
             "truth": directory / "truth.json"}
    with open(paths["events"], "w") as fh:
        for u, v, t in data.events:
            fh.write(f"{u + 1}\t{v}\t{t}\n")
    with open(paths["edges"], "w") as fh:
        for a, b in data.edges:
            fh.write(f"{a + 1}\t{b + 1}\n")
    truth = {"spec": asdict(data.spec),
             "sources": data.sources,
             "chains": {str(u + 1): {str(k): v for k, v in c.items()} for u, c in data.chains.items()}}
    paths["truth"].write_text(json.dumps(truth, sort_keys=True))
    return paths
