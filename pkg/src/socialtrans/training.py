"""Sampled-softmax training with a row-sparse Adam."""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import load_container, save_container
from .config import RunConfig
from .data import PAD, BehaviorSequence, EventLog, SocialGraph, build_sequences
from .model import PreparedBatch, SocialTrans, fuse, prepare_batch, torch_dtype
from .transformer import MASK_VALUE

log = logging.getLogger(__name__)

__all__ = [
    "fuse", "full_softmax_prob", "sampled_softmax_loss", "sample_negatives", "SparseAdam",
    "train", "TrainResult", "TrainingDiverged", "save_checkpoint", "load_checkpoint",
]

# RNG stream tags under the root seed
_SHUFFLE, _NEGATIVES, _DROPOUT = 1, 2, 4


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: str | None):
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


def full_softmax_prob(h: torch.Tensor, item_emb: torch.Tensor, v: int) -> torch.Tensor:
    """p(next = v) with the softmax over every real item (pad row excluded)."""
    if v == PAD:
        raise ValueError("the pad item has no probability")
    logits = item_emb[1:] @ h
    logits = logits - logits.max()
    e = torch.exp(logits)
    return e[v - 1] / e.sum()


def sampled_softmax_loss(h: torch.Tensor, positives, negatives, item_emb: torch.Tensor,
                         reduction: str = "sum") -> torch.Tensor:
    """-log softmax of the positive over ``{positive} U J``.

    ``h`` is (d,) or (B, d); a negative equal to an instance's own positive is
    dropped from that instance's denominator.
    """
    single = h.dim() == 1
    h = h.unsqueeze(0) if single else h
    pos = torch.as_tensor(positives, dtype=torch.long).reshape(-1)
    neg = torch.as_tensor(negatives, dtype=torch.long).reshape(-1)
    cand = torch.cat([pos.unsqueeze(1), neg.unsqueeze(0).expand(len(pos), -1)], dim=1)
    logits = torch.einsum("bd,bkd->bk", h, item_emb[cand])
    clash = torch.zeros_like(cand, dtype=torch.bool)
    clash[:, 1:] = cand[:, 1:] == pos.unsqueeze(1)
    logits = logits.masked_fill(clash, MASK_VALUE)
    top = logits.max(dim=1, keepdim=True).values.detach()
    losses = torch.log(torch.exp(logits - top).sum(dim=1)) - (logits[:, 0] - top[:, 0])
    if single or reduction == "none":
        return losses[0] if single else losses
    return losses.sum() if reduction == "sum" else losses.mean()


def sample_negatives(item_counts, n: int, rng_seed) -> np.ndarray:
    """``n`` distinct items drawn without replacement, probability proportional to count.

    ``item_counts`` is a mapping ``item -> count`` or an array indexed by
    item id (entry 0, the pad, is ignored). Returns sorted item ids.
    """
    if isinstance(item_counts, Mapping):
        items = np.array(sorted(item_counts), dtype=np.int64)
        counts = np.array([item_counts[i] for i in items], dtype=np.float64)
    else:
        counts_all = np.asarray(item_counts, dtype=np.float64)
        items = np.arange(len(counts_all), dtype=np.int64)
        counts = counts_all.copy()
        counts[PAD] = 0
    keep = counts > 0
    items, counts = items[keep], counts[keep]
    if n >= len(items):
        if n > len(items):
            warnings.warn(f"requested {n} negatives from {len(items)} distinct items; using all")
        return items
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(items, size=n, replace=False, p=counts / counts.sum()))


class SparseAdam:
    """Adam that only moves the parameters (and item rows) seen in a step.

    Bias correction uses the global step count. Anything not in the touched
    set keeps its value and both moments bit-for-bit.
    """

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float = 0.001, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr, (self.beta1, self.beta2), self.eps = lr, betas, eps
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.n = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor], touched: Mapping[str, object]) -> None:
        """Apply one update.

        ``touched`` maps a parameter name to ``None`` (whole tensor) or to the
        row indices to update; names absent from it are frozen.
        """
        for name in touched:
            g = grads.get(name)
            if g is None:
                raise KeyError(f"no gradient for touched parameter {name!r}")
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name!r}; step aborted")
        self.step_count += 1
        k = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
        for name, rows in touched.items():
            p, m, n, g = self.params[name], self.m[name], self.n[name], grads[name]
            if rows is None:
                m.copy_(b1 * m + (1.0 - b1) * g)
                n.copy_(b2 * n + (1.0 - b2) * (g * g))
                p.copy_(p - self.lr * (m / c1) / (torch.sqrt(n / c2) + self.eps))
            else:
                rows = torch.as_tensor(rows, dtype=torch.long)
                if len(rows) == 0:
                    continue
                g = g[rows]
                m_r = b1 * m[rows] + (1.0 - b1) * g
                n_r = b2 * n[rows] + (1.0 - b2) * (g * g)
                m[rows] = m_r
                n[rows] = n_r
                p[rows] = p[rows] - self.lr * (m_r / c1) / (torch.sqrt(n_r / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k].detach().numpy()
            out[f"adam.n.{k}"] = self.n[k].detach().numpy()
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k].copy_(torch.from_numpy(tensors[f"adam.m.{k}"]))
            self.n[k].copy_(torch.from_numpy(tensors[f"adam.n.{k}"]))
        self.step_count = step


@dataclass
class TrainResult:
    model: SocialTrans
    optimizer: SparseAdam
    epoch_losses: list[float] = field(default_factory=list)
    checkpoint: str | None = None


def save_checkpoint(path, model: SocialTrans, optimizer: SparseAdam | None, cfg: RunConfig,
                    meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = dict(meta or {})
    meta.update(n_items=model.item_emb.shape[0] - 1, variant=model.variant,
                step=optimizer.step_count if optimizer else 0)
    save_container(path, tensors, cfg.to_dict(), meta)


def load_checkpoint(path) -> tuple[SocialTrans, RunConfig, dict, SparseAdam]:
    tensors, config, meta = load_container(path)
    cfg = RunConfig.from_dict(config)
    model = SocialTrans(meta["n_items"], cfg)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    opt = SparseAdam(dict(model.named_parameters()), lr=cfg.lr)
    if any(k.startswith("adam.") for k in tensors):
        opt.load_state_tensors(tensors, meta.get("step", 0))
    model.eval()
    return model, cfg, meta, opt


def shard_gradients(model: SocialTrans, batch: PreparedBatch, targets: Sequence[int], negatives,
                    scale: float, generator: torch.Generator | None) -> tuple[dict[str, torch.Tensor], float]:
    """Gradients of ``scale * sum(loss)`` over one shard and the shard's loss sum."""
    names = sorted(model.used_parameters())
    params = dict(model.named_parameters())
    h = model(batch, generator=generator)
    losses = sampled_softmax_loss(h, targets, negatives, model.item_emb, reduction="none")
    total = losses.sum()
    grads = torch.autograd.grad(total * scale, [params[n] for n in names], allow_unused=True)
    out = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}
    return out, float(total.detach())


def _shards(n: int, shard_size: int) -> list[range]:
    size = shard_size or n
    return [range(s, min(s + size, n)) for s in range(0, n, size)]


def batch_gradients(model: SocialTrans, seqs: Sequence[BehaviorSequence], targets: Sequence[int],
                    negatives: np.ndarray, log_: EventLog, graph: SocialGraph | None, cfg: RunConfig,
                    subgraph_tag: int, dropout_seed: Sequence[int], workers: int = 1):
    """Batch gradient as the shard-ordered sum of per-shard gradients.

    Shards are fixed-size slices of the batch (``cfg.shard_size``; 0 means one
    shard), so the result does not depend on how many workers evaluate them.
    Returns ``(grads, loss_sum, touched_items)``.
    """
    shards = _shards(len(seqs), cfg.shard_size)
    scale = 1.0 / len(seqs)

    def run(i: int):
        idx = shards[i]
        batch = prepare_batch([seqs[j] for j in idx], log_, graph, cfg, cfg.seed, subgraph_tag)
        gen = None
        if model.training and (cfg.dropout > 0 or cfg.gat_dropout > 0):
            gen = torch.Generator().manual_seed(int(np.random.SeedSequence([*dropout_seed, i]).generate_state(1)[0]))
        grads, loss_sum = shard_gradients(model, batch, [targets[j] for j in idx], negatives, scale, gen)
        return grads, loss_sum, batch.item_ids()

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(shards))))
    else:
        results = [run(i) for i in range(len(shards))]
    grads = dict(results[0][0])
    for g, _, _ in results[1:]:
        for k in grads:
            grads[k] = grads[k] + g[k]
    loss_sum = sum(r[1] for r in results)
    items = np.unique(np.concatenate([r[2] for r in results]
                                     + [np.asarray(targets, dtype=np.int64), np.asarray(negatives, dtype=np.int64)]))
    return grads, loss_sum, items[items != PAD]


def touched_set(model: SocialTrans, items: np.ndarray) -> dict[str, object]:
    touched: dict[str, object] = {n: None for n in model.used_parameters()}
    touched["transformer.item_emb"] = torch.as_tensor(items, dtype=torch.long)
    return touched


def train(cfg: RunConfig, log_: EventLog, graph: SocialGraph | None, out_dir: str | Path | None = None,
          n_items: int | None = None, model: SocialTrans | None = None) -> TrainResult:
    """Train on every (window, next item) pair of ``log_``.

    Writes ``checkpoint.bin`` and ``train_log.tsv`` into ``out_dir`` after each
    epoch when it is given.
    """
    cfg.validate()
    torch.set_num_threads(cfg.threads)
    n_items = n_items or log_.n_items
    model = model or SocialTrans(n_items, cfg)
    params = dict(model.named_parameters())
    opt = SparseAdam(params, lr=cfg.lr)
    pairs = build_sequences(log_, cfg.m, cfg.stride)
    counts = log_.item_counts
    n_distinct = int((counts[1:] > 0).sum())
    n_neg = min(cfg.negatives, max(n_distinct - 1, 1))
    if n_neg < cfg.negatives:
        log.warning("negatives reduced from %d to %d (vocabulary has %d items)", cfg.negatives, n_neg, n_distinct)
    ckpt_path = Path(out_dir) / "checkpoint.bin" if out_dir else None
    log_path = Path(out_dir) / "train_log.tsv" if out_dir else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    result = TrainResult(model, opt, checkpoint=None)
    shuffle = np.random.default_rng([cfg.seed, _SHUFFLE])
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        model.train()
        order = shuffle.permutation(len(pairs))
        loss_total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = order[start:start + cfg.batch_size]
            seqs = [pairs[i][0] for i in chosen]
            targets = [pairs[i][1] for i in chosen]
            negatives = sample_negatives(counts, n_neg, [cfg.seed, _NEGATIVES, epoch, b])
            grads, loss_sum, items = batch_gradients(
                model, seqs, targets, negatives, log_, graph, cfg,
                subgraph_tag=(epoch << 20) + b + 1, dropout_seed=[cfg.seed, _DROPOUT, epoch, b],
                workers=cfg.workers)
            if not math.isfinite(loss_sum):
                raise TrainingDiverged(f"loss became {loss_sum} at epoch {epoch} batch {b}",
                                       str(result.checkpoint) if result.checkpoint else None)
            opt.step(grads, touched_set(model, items))
            loss_total += loss_sum
        mean_loss = loss_total / max(len(pairs), 1)
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"mean loss {mean_loss} at epoch {epoch}",
                                   str(result.checkpoint) if result.checkpoint else None)
        result.epoch_losses.append(mean_loss)
        elapsed = time.perf_counter() - started
        log.info("epoch %d mean_loss %.6f (%.2fs)", epoch, mean_loss, elapsed)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch}\t{mean_loss:.10g}\n")
        if ckpt_path:
            model.eval()
            save_checkpoint(ckpt_path, model, opt, cfg, {"epoch": epoch, "n_users": log_.n_users})
            result.checkpoint = str(ckpt_path)
    model.eval()
    return result
