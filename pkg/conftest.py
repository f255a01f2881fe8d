import numpy as np
import pytest
import torch

from app.config.settings import LmConfig, SynthConfig
from app.services.graph_cf import InteractionGraph, SplitSpec, build_graph
from app.services.minilm import MiniLm
from app.services.numerics import Rng
from app.services.tokenizer import Vocabulary


def random_interactions(rng: Rng, num_users: int, num_items: int, density: float = 0.4):
    """Random bipartite edges where every user and every item has at least one edge"""
    edges = set()
    for u in range(num_users):
        edges.add((u, int(rng.integers(0, num_items))))
    for i in range(num_items):
        edges.add((int(rng.integers(0, num_users)), i))
    draws = rng.random((num_users, num_items))
    edges.update((u, i) for u in range(num_users) for i in range(num_items) if draws[u, i] < density)
    return sorted(edges)


def dense_normalized_adjacency(graph: InteractionGraph) -> np.ndarray:
    """Dense D^-1/2 A D^-1/2 built independently of the sparse path"""
    m, n = graph.num_users, graph.num_items
    a = np.zeros((m + n, m + n))
    for u, i in graph.train_edges():
        a[u, m + i] = a[m + i, u] = 1.0
    d = a.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return inv[:, None] * a * inv[None, :]


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def toy_graph():
    # all edges stay in train
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 3), (3, 2), (3, 3)]
    return build_graph(edges, SplitSpec(0.0, 0.0, 0))


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def tiny_lm_config():
    return LmConfig(hidden=16, num_layers=1, num_heads=2, max_context=256, ff_mult=2, init_std=0.1)


@pytest.fixture
def tiny_lm(vocab, tiny_lm_config):
    return MiniLm(vocab, tiny_lm_config, Rng(1))


@pytest.fixture
def small_synth_config():
    return SynthConfig(num_users=40, num_items=40, groups=2)


def pytest_configure(config):
    torch.set_num_threads(1)
