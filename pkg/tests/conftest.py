import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from socialtrans.config import RunConfig
from socialtrans.data import EventLog, SocialGraph
from socialtrans.synth import SynthSpec, generate


def small_config(**kw) -> RunConfig:
    base = dict(d=8, r=2, m=5, l_T=2, l_G=2, fanouts=(3, 3), dropout=0.0, precision=64, negatives=3,
                batch_size=8, epochs=1, lr=0.01)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def four_node():
    """Four users with overlapping histories over six items and a small friendship graph."""
    records = [(0, 1, 1), (0, 2, 2), (0, 3, 5), (1, 2, 1), (1, 4, 3), (1, 5, 6), (2, 6, 2),
               (2, 1, 4), (2, 3, 7), (3, 5, 1), (3, 2, 3), (3, 4, 8), (0, 6, 9), (1, 1, 9)]
    log = EventLog.from_records(records, n_users=4, n_items=6)
    graph = SocialGraph.from_edges([(0, 1), (0, 2), (1, 2), (2, 3), (1, 3)], 4, log)
    return log, graph


@pytest.fixture
def synth_small():
    data = generate(SynthSpec(n_users=30, n_items=20, rho=0.5, ticks=12, avg_friends=3, seed=3))
    log = EventLog.from_records(data.events, n_users=30, n_items=20)
    graph = SocialGraph.from_edges(data.edges, 30, log)
    return data, log, graph


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rand_items(rng: np.random.Generator, n: int, m: int, n_items: int, pad_prob: float = 0.2) -> np.ndarray:
    items = rng.integers(1, n_items + 1, size=(n, m))
    # left padding of random length
    for row in items:
        row[: int(rng.binomial(m, pad_prob))] = 0
    return items
