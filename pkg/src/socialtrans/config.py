"""Run configuration and its flat ``key = value`` file format.

One setting per line, ``#`` starts a comment. List values (``fanouts``) are
comma separated. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path


class ConfigInvalid(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    # paths (relative to the workdir)
    events: str = "events.tsv"
    edges: str = "edges.tsv"
    output_dir: str = "out"
    # model
    d: int = 100
    r: int = 4
    m: int = 50
    l_T: int = 3
    l_G: int = 2
    fanouts: tuple[int, ...] = (20, 20)
    fanout_max: int = 50
    sampling: str = "uniform"
    dropout: float = 0.1
    gat_dropout: float = 0.0
    variant: str = "full"
    # training
    batch_size: int = 128
    lr: float = 0.001
    negatives: int = 1000
    epochs: int = 10
    stride: int = 1
    seed: int = 0
    precision: int = 32
    shard_size: int = 0
    workers: int = 1
    threads: int = 1
    # evaluation
    test_window: int = 0
    k: int = 20
    friend_buckets: str = ""
    # retrieval
    n_bits: int = 16
    n_tables: int = 8
    k_u: int = 300
    k_a: int = 10
    recent_window: int = 0

    @property
    def d_s(self) -> int:
        return self.d // self.r

    def problems(self) -> list[str]:
        out = []
        if self.r < 1 or self.d % self.r:
            out.append(f"d ({self.d}) must equal r * d_s for an integer d_s (r={self.r})")
        if self.m < 1:
            out.append(f"m must be >= 1, got {self.m}")
        if self.l_T < 1:
            out.append(f"l_T must be >= 1, got {self.l_T}")
        if not 1 <= self.l_G <= 2:
            out.append(f"l_G must be 1 or 2, got {self.l_G}")
        if len(self.fanouts) != self.l_G:
            out.append(f"fanouts has {len(self.fanouts)} entries but l_G = {self.l_G}")
        for f in self.fanouts:
            if not 1 <= f <= self.fanout_max:
                out.append(f"fanout {f} outside [1, {self.fanout_max}]")
        if self.sampling not in ("uniform", "attribute_weighted"):
            out.append(f"sampling must be uniform or attribute_weighted, got {self.sampling!r}")
        if self.variant not in ("full", "transformer_only", "gat_only"):
            out.append(f"unknown variant {self.variant!r}")
        if not 0 <= self.dropout < 1 or not 0 <= self.gat_dropout < 1:
            out.append("dropout rates must be in [0, 1)")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.lr < 0:
            out.append("lr must be >= 0")
        if self.negatives < 1:
            out.append("negatives must be >= 1")
        if self.precision not in (32, 64):
            out.append(f"precision must be 32 or 64, got {self.precision}")
        if self.shard_size < 0 or self.workers < 1 or self.threads < 1:
            out.append("shard_size must be >= 0 and workers, threads >= 1")
        if self.stride < 1 or self.epochs < 0:
            out.append("stride must be >= 1 and epochs >= 0")
        if self.k < 1 or self.k_u < 1 or self.k_a < 1:
            out.append("k, k_u and k_a must be >= 1")
        if self.n_bits < 1 or self.n_tables < 1:
            out.append("n_bits and n_tables must be >= 1")
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigInvalid(problems)
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["fanouts"] = list(self.fanouts)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        kw = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key not in types:
                raise ConfigInvalid([f"unknown config key {key!r}"])
            kw[key] = _coerce(key, types[key], value)
        return cls(**kw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key, f: dataclasses.Field, value):
    default = f.default if f.default is not dataclasses.MISSING else None
    if key == "fanouts":
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        return tuple(int(v) for v in value)
    if isinstance(value, str):
        try:
            if isinstance(default, bool):
                return value.lower() in ("1", "true", "yes")
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise ConfigInvalid([f"{key}: cannot parse {value!r}"]) from None
    return value


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid([f"line {lineno}: expected 'key = value', got {raw!r}"])
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: str | os.PathLike, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
