"""Temporal split, ranking metrics, the POP baseline and the ablation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import BehaviorSequence, EventLog, SocialGraph
from .model import SocialTrans, prepare_batch

EVAL_TAG = 0


@dataclass(frozen=True)
class EvalInstance:
    user: int
    cut_time: int
    truth: int


@dataclass
class Split:
    train: EventLog
    instances: list[EvalInstance]
    full: EventLog
    boundary: int  # train holds timestamps <= boundary

    @property
    def train_items(self) -> np.ndarray:
        return np.flatnonzero(self.train.item_counts > 0)

    def windows(self, m: int) -> list[BehaviorSequence]:
        """Each instance's own window: every event strictly before its cut time."""
        return [self.full.window_before(i.user, i.cut_time, m) for i in self.instances]


def temporal_split(log: EventLog, test_window: int) -> Split:
    """Hold out events in the last ``test_window`` time units.

    Test events whose item never occurs in the training part are dropped.
    """
    if test_window <= 0:
        raise ValueError("test window must be positive")
    if not len(log):
        raise ValueError("cannot split an empty log")
    t_min, t_max = int(log.times.min()), int(log.times.max())
    if test_window >= t_max - t_min:
        raise ValueError(f"test window {test_window} is not shorter than the log span {t_max - t_min}")
    boundary = t_max - test_window
    train = log.subset(log.times <= boundary)
    known = train.item_counts > 0
    test_idx = np.flatnonzero(log.times > boundary)
    instances = [EvalInstance(int(log.users[i]), int(log.times[i]), int(log.items[i]))
                 for i in test_idx if known[log.items[i]]]
    return Split(train, instances, log, boundary)


def ranking_from_scores(scores: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    """Item ids (column j = item j+1) by descending score, ties by ascending id."""
    scores = np.asarray(scores)
    ids = np.arange(1, len(scores) + 1)
    if allowed is not None:
        keep = np.isin(ids, allowed)
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))
    return ids[order]


def truth_ranks(scores: np.ndarray, truths: Sequence[int], allowed: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of each truth under the same ordering as :func:`ranking_from_scores`."""
    scores = np.asarray(scores)
    n, v = scores.shape
    ids = np.arange(1, v + 1)
    ok = np.ones(v, dtype=bool) if allowed is None else np.isin(ids, allowed)
    truths = np.asarray(truths)
    s_t = scores[np.arange(n), truths - 1][:, None]
    ahead = ok & ((scores > s_t) | ((scores == s_t) & (ids < truths[:, None])))
    return 1 + ahead.sum(axis=1)


def recall_at_k(truths: Sequence[int], rankings: Sequence[Sequence[int]], k: int) -> float:
    """Fraction of instances whose truth is among the first ``k`` ranked items."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if not len(truths):
        return 0.0
    hits = [1.0 if t in list(r[:k]) else 0.0 for t, r in zip(truths, rankings)]
    return float(np.mean(hits))


def ndcg(rank: int) -> float:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / math.log2(1 + rank)


@dataclass
class MetricReport:
    recall_at_k: float
    ndcg: float
    n_instances: int
    k: int
    groups: dict[str, tuple[float, float, int]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks: Sequence[int], k: int, **kw) -> "MetricReport":
        ranks = np.asarray(ranks)
        if not len(ranks):
            return cls(0.0, 0.0, 0, k, **kw)
        # fsum: correctly rounded, so the means do not depend on summation order
        n = len(ranks)
        recall = math.fsum(1.0 for r in ranks if r <= k) / n
        return cls(recall, math.fsum(ndcg(int(r)) for r in ranks) / n, n, k, **kw)

    def to_tsv(self) -> str:
        lines = ["group\tn_instances\trecall_at_k\tndcg\tk",
                 f"all\t{self.n_instances}\t{self.recall_at_k:.10f}\t{self.ndcg:.10f}\t{self.k}"]
        for name, (rec, nd, n) in self.groups.items():
            lines.append(f"{name}\t{n}\t{rec:.10f}\t{nd:.10f}\t{self.k}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = [f"instances: {self.n_instances}", f"recall@{self.k}: {self.recall_at_k:.4f}",
               f"ndcg: {self.ndcg:.4f}"]
        for name, (rec, nd, n) in self.groups.items():
            out.append(f"  friends {name}: n={n} recall@{self.k}={rec:.4f} ndcg={nd:.4f}")
        if self.config:
            out.append("config: " + ", ".join(f"{k}={v}" for k, v in sorted(self.config.items())))
        return "\n".join(out) + "\n"


def parse_buckets(spec: str) -> list[tuple[str, int, float]]:
    """``"0-2,3-9,27+"`` -> [(label, lo, hi)] with inclusive bounds."""
    out = []
    for part in (p.strip() for p in spec.split(",") if p.strip()):
        if part.endswith("+"):
            out.append((part, int(part[:-1]), math.inf))
        else:
            lo, hi = part.split("-")
            out.append((part, int(lo), int(hi)))
    return out


@torch.no_grad()
def user_representations(model: SocialTrans, seqs: Sequence[BehaviorSequence], log: EventLog,
                         graph: SocialGraph | None, cfg: RunConfig, chunk: int = 256,
                         tag: int = EVAL_TAG) -> torch.Tensor:
    """Representations used for scoring, computed with dropout off."""
    was = model.training
    model.eval()
    try:
        parts = []
        for start in range(0, len(seqs), chunk):
            batch = prepare_batch(seqs[start:start + chunk], log, graph, cfg, cfg.seed, tag,
                                  variant=model.variant)
            parts.append(model(batch))
        if not parts:
            return torch.zeros(0, cfg.d, dtype=model.dtype)
        return torch.cat(parts)
    finally:
        model.train(was)


@torch.no_grad()
def rank_items(model: SocialTrans, user: int, cut_time: int, log: EventLog, graph: SocialGraph | None,
               cfg: RunConfig, allowed: np.ndarray | None = None) -> np.ndarray:
    """All items ordered by score for ``user`` at ``cut_time``."""
    seq = log.window_before(user, cut_time, cfg.m)
    h = user_representations(model, [seq], log, graph, cfg)
    return ranking_from_scores(model.scores(h)[0].numpy(), allowed)


@torch.no_grad()
def evaluate_pairs(model: SocialTrans, seqs: Sequence[BehaviorSequence], truths: Sequence[int],
                   log: EventLog, graph: SocialGraph | None, cfg: RunConfig, k: int,
                   allowed: np.ndarray | None = None, buckets: str = "") -> MetricReport:
    h = user_representations(model, seqs, log, graph, cfg)
    scores = model.scores(h).numpy() if len(seqs) else np.zeros((0, model.item_emb.shape[0] - 1))
    ranks = truth_ranks(scores, truths, allowed) if len(seqs) else np.zeros(0, dtype=int)
    report = MetricReport.from_ranks(ranks, k, config=cfg.to_dict())
    if buckets and graph is not None:
        report.groups = _grouped(ranks, [graph.degree(s.user_id) for s in seqs], buckets, k)
    return report


def _grouped(ranks, degrees, buckets: str, k: int) -> dict:
    out = {}
    degrees = np.asarray(degrees)
    for label, lo, hi in parse_buckets(buckets):
        sel = (degrees >= lo) & (degrees <= hi)
        sub = MetricReport.from_ranks(np.asarray(ranks)[sel], k)
        out[label] = (sub.recall_at_k, sub.ndcg, sub.n_instances)
    return out


def evaluate_split(model: SocialTrans, split: Split, graph: SocialGraph | None, cfg: RunConfig,
                   k: int | None = None, buckets: str | None = None) -> MetricReport:
    """Rank the full training vocabulary for every test instance."""
    seqs = split.windows(cfg.m)
    truths = [i.truth for i in split.instances]
    return evaluate_pairs(model, seqs, truths, split.full, graph, cfg, k or cfg.k, split.train_items,
                          cfg.friend_buckets if buckets is None else buckets)


def pop_baseline(train: EventLog) -> np.ndarray:
    """Training items by descending count, ties by ascending id."""
    counts = train.item_counts
    ids = np.flatnonzero(counts > 0)
    return ids[np.lexsort((ids, -counts[ids]))]


def evaluate_pop(split: Split, k: int) -> MetricReport:
    ranking = pop_baseline(split.train)
    position = {int(v): i + 1 for i, v in enumerate(ranking)}
    ranks = [position[i.truth] for i in split.instances]
    return MetricReport.from_ranks(ranks, k)


def run_ablation(model: SocialTrans, variant: str, split: Split, graph: SocialGraph | None,
                 cfg: RunConfig, k: int | None = None) -> MetricReport:
    """Evaluate a checkpoint trained as ``variant``."""
    if model.variant != variant:
        raise ValueError(f"checkpoint was trained as {model.variant!r}, not {variant!r}")
    return evaluate_split(model, split, graph, cfg, k)

