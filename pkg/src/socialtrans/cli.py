"""``socialtrans`` command line: synth, ingest, train, eval, embed, index, recommend, similar.

Every subcommand accepts ``--workdir`` (all relative paths resolve against
it), ``--config`` (a flat ``key = value`` file) and one ``--<key>`` flag per
configuration key; flags override the file. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from .checkpoint import CheckpointError
from .config import ConfigInvalid, RunConfig, dump_config, parse_config_text
from .data import DataError, EventLog, build_graph, load_events
from .evaluation import evaluate_pop, run_ablation, temporal_split
from .retrieval import EmbeddingStore, SimHashIndex, StageError, generate_embeddings, top_similar_users, \
    user_cf_recommend
from .social_gat import ConfigError, ContractError
from .synth import SynthSpec, generate, write_dataset
from .training import TrainingDiverged, load_checkpoint, train

log = logging.getLogger("socialtrans")

CONFIG_KEYS = [f.name for f in dataclasses.fields(RunConfig)]
# keys that may override a checkpoint's stored configuration at eval/serve time
RUNTIME_KEYS = {"events", "edges", "output_dir", "test_window", "k", "friend_buckets", "n_bits",
                "n_tables", "k_u", "k_a", "recent_window", "workers", "threads"}
CHECKPOINT = "checkpoint.bin"


class UsageError(Exception):
    pass


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.workdir = Path(args.workdir).resolve()
        values: dict[str, str] = {}
        if args.config:
            values.update(parse_config_text(self.path(args.config).read_text()))
        self.explicit = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
        values.update(self.explicit)
        self.file_values = values
        self.cfg = RunConfig.from_dict(values).validate()

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.cfg.output_dir)

    def serving_config(self, stored: RunConfig) -> RunConfig:
        """Checkpoint config with runtime keys taken from the file and flags."""
        runtime = {k: v for k, v in self.file_values.items() if k in RUNTIME_KEYS}
        return RunConfig.from_dict({**stored.to_dict(), **runtime}).validate()

    def lock(self) -> FileLock:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.out_dir / ".lock"), timeout=600)

    def load_data(self) -> tuple[EventLog, object]:
        events = load_events(self.path(self.cfg.events))
        graph = build_graph(self.path(self.cfg.edges), events)
        return events, graph


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_synth(ctx: Context) -> int:
    a = ctx.args
    spec = SynthSpec(n_users=a.users, n_items=a.items, rho=a.rho, ticks=a.ticks, avg_friends=a.avg_friends,
                     chain_length=a.chain_length, branching=a.branching, seed=ctx.cfg.seed)
    try:
        spec.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate(spec)
    target = ctx.path(a.out) if a.out else ctx.workdir
    paths = write_dataset(data, target)
    for name in ("events", "edges", "truth"):
        print(f"{name}\t{paths[name]}")
    return 0


def cmd_ingest(ctx: Context) -> int:
    with ctx.lock():
        events = load_events(ctx.path(ctx.cfg.events), map_dir=ctx.out_dir)
        graph = build_graph(ctx.path(ctx.cfg.edges), events)
        stats = {"n_events": len(events), "n_users": graph.n_users, "n_items": events.n_items,
                 "n_edges": len(graph.edges()), "t_min": int(events.times.min()) if len(events) else None,
                 "t_max": int(events.times.max()) if len(events) else None, "config": ctx.cfg.to_dict()}
        _write(ctx.out_dir / "ingest.json", json.dumps(stats, sort_keys=True, indent=1) + "\n")
    print("\n".join(f"{k}\t{v}" for k, v in stats.items() if k != "config"))
    return 0


def cmd_train(ctx: Context) -> int:
    cfg = ctx.cfg
    with ctx.lock():
        events, graph = ctx.load_data()
        train_log = temporal_split(events, cfg.test_window).train if cfg.test_window > 0 else events
        _write(ctx.out_dir / "config.txt", dump_config(cfg))
        result = train(cfg, train_log, graph, out_dir=ctx.out_dir, n_items=events.n_items)
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"checkpoint\t{result.checkpoint}\nepochs\t{len(result.epoch_losses)}\nfinal_loss\t{final:.6f}")
    return 0


def _load_model(ctx: Context):
    path = ctx.out_dir / CHECKPOINT
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run train first")
    model, stored, meta, _ = load_checkpoint(path)
    return model, ctx.serving_config(stored), path


def cmd_eval(ctx: Context) -> int:
    model, cfg, _ = _load_model(ctx)
    if cfg.test_window <= 0:
        raise UsageError("eval needs test_window > 0")
    variant = ctx.explicit.get("variant", model.variant)
    buckets = ctx.args.by_friend_buckets if ctx.args.by_friend_buckets is not None else cfg.friend_buckets
    with ctx.lock():
        events, graph = ctx.load_data()
        split = temporal_split(events, cfg.test_window)
        report = run_ablation(model, variant, split, graph, cfg.replace(friend_buckets=buckets), cfg.k)
        pop = evaluate_pop(split, cfg.k)
        echo = "# config " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n"
        tsv = echo + report.to_tsv() + f"pop\t{pop.n_instances}\t{pop.recall_at_k:.10f}\t{pop.ndcg:.10f}\t{pop.k}\n"
        _write(ctx.out_dir / f"report_{variant}.tsv", tsv)
        summary = report.summary() + f"pop recall@{pop.k}: {pop.recall_at_k:.4f} ndcg: {pop.ndcg:.4f}\n"
        _write(ctx.out_dir / f"summary_{variant}.txt", summary)
    sys.stdout.write(summary)
    return 0


def cmd_embed(ctx: Context) -> int:
    model, cfg, ckpt = _load_model(ctx)
    with ctx.lock():
        events, graph = ctx.load_data()
        stages = tuple(int(s) for s in ctx.args.stages.split(","))
        store = generate_embeddings(ckpt, events, graph, ctx.out_dir / "embeddings", stages=stages,
                                    model=model, cfg=cfg)
    print(f"embeddings\t{ctx.out_dir / 'embeddings'}\nusers\t{len(store.namespaces.get('fused', {}))}")
    return 0


def _index_path(ctx: Context) -> Path:
    return ctx.out_dir / "index.npz"


def cmd_index(ctx: Context) -> int:
    cfg = ctx.cfg
    with ctx.lock():
        store = EmbeddingStore.load(ctx.out_dir / "embeddings")
        ids, vectors = store.vectors(ctx.args.namespace)
        index = SimHashIndex(vectors.shape[1], cfg.n_bits, cfg.n_tables, seed=cfg.seed).add(ids, vectors)
        index.save(_index_path(ctx))
        _write(ctx.out_dir / "index.json",
               json.dumps({"namespace": ctx.args.namespace, "n_users": len(ids), "config": cfg.to_dict(),
                           "checkpoint_sha256": store.manifest.get("checkpoint_sha256")},
                          sort_keys=True, indent=1) + "\n")
    print(f"index\t{_index_path(ctx)}\nusers\t{len(ids)}")
    return 0


def _load_index(ctx: Context) -> SimHashIndex:
    path = _index_path(ctx)
    if not path.exists():
        raise FileNotFoundError(f"no index at {path}; run index first")
    return SimHashIndex.load(path)


def cmd_similar(ctx: Context) -> int:
    _, graph = ctx.load_data()
    index = _load_index(ctx)
    user = _graph_user(ctx, graph, ctx.args.user)
    k_u = ctx.args.ku or ctx.cfg.k_u
    for other, sim in top_similar_users(index, user, k_u):
        print(f"{graph.user_ids[other]}\t{sim:.6f}")
    return 0


def cmd_recommend(ctx: Context) -> int:
    events, graph = ctx.load_data()
    index = _load_index(ctx)
    user = _graph_user(ctx, graph, ctx.args.user)
    k_a = int(ctx.explicit["k"]) if "k" in ctx.explicit else ctx.cfg.k_a
    recs = user_cf_recommend(user, index, events, ctx.cfg.k_u, k_a, ctx.cfg.recent_window)
    for item, score in recs:
        print(f"{events.item_ids[item]}\t{score:.6f}")
    return 0


def _graph_user(ctx: Context, graph, original: str) -> int:
    key = _parse_id(original)
    index = {u: i for i, u in enumerate(graph.user_ids)}
    if key not in index:
        raise DataError(f"unknown user {original}")
    return index[key]


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "embed": cmd_embed, "index": cmd_index, "recommend": cmd_recommend, "similar": cmd_similar}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("configuration overrides")
    for key in CONFIG_KEYS:
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        group.add_argument(*flags, dest=key, default=None, metavar="VALUE")

    parser = argparse.ArgumentParser(prog="socialtrans", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--rho", type=float, default=0.0, help="probability of copying a friend's item")
    p.add_argument("--ticks", type=int, default=30)
    p.add_argument("--avg-friends", type=int, default=3)
    p.add_argument("--chain-length", type=int, default=5)
    p.add_argument("--branching", type=int, default=1)
    p.add_argument("--out", help="output directory (default: workdir)")
    sub.add_parser("ingest", parents=[common], help="validate inputs and write id maps")
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="evaluate the trained checkpoint")
    p.add_argument("--by-friend-buckets", default=None, metavar="SPEC", help='e.g. "0-2,3-9,10-26,27+"')
    p = sub.add_parser("embed", parents=[common], help="three-stage embedding generation")
    p.add_argument("--stages", default="1,2,3")
    p = sub.add_parser("index", parents=[common], help="build the SimHash user index")
    p.add_argument("--namespace", default="fused", choices=("personal", "social", "fused"))
    p = sub.add_parser("recommend", parents=[common], help="user-CF recommendations for one user")
    p.add_argument("--user", required=True)  # --k (a config flag) sets the list length here
    p = sub.add_parser("similar", parents=[common], help="most similar users for one user")
    p.add_argument("--user", required=True)
    p.add_argument("--ku", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except (ConfigInvalid, UsageError, ConfigError) as exc:
        print(f"socialtrans {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, StageError, ContractError, TrainingDiverged, FileNotFoundError,
            ValueError, KeyError, Timeout, OSError) as exc:
        print(f"socialtrans {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
