"""
Collaborative Relation Tokenizer
Builds the user-item graph, runs LightGCN propagation and trains the layer-0
embeddings with BPR + L2 regularisation under Recall@K early stopping
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.config.settings import GraphConfig
from app.models.records import TrainingLog
from app.services.numerics import DTYPE, Rng, check_finite
from app.utils.errors import DivergenceError, GraphError

logger = logging.getLogger(__name__)

TRAIN, VALIDATION, TEST = "train", "validation", "test"
SPLITS = (TRAIN, VALIDATION, TEST)


def _id_key(raw: Hashable):
    # ints sort numerically, everything else by its string form
    return (0, raw, "") if isinstance(raw, (int, np.integer)) else (1, 0, str(raw))


@dataclass
class SplitSpec:
    validation_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0


@dataclass
class InteractionGraph:
    """Bipartite user-item graph; adjacency lists hold train edges only"""
    num_users: int
    num_items: int
    edges: List[Tuple[int, int]]
    split: List[str]
    user_neighbors: List[List[int]]
    item_neighbors: List[List[int]]
    user_index: Dict[Any, int] = field(default_factory=dict)
    item_index: Dict[Any, int] = field(default_factory=dict)
    _interacted: List[Set[int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._interacted:
            self._interacted = [set() for _ in range(self.num_users)]
            for u, i in self.edges:
                self._interacted[u].add(i)

    @property
    def user_ids(self) -> List[Any]:
        return sorted(self.user_index, key=self.user_index.get)

    @property
    def item_ids(self) -> List[Any]:
        return sorted(self.item_index, key=self.item_index.get)

    def interacted(self, u: int) -> Set[int]:
        """Items of u in any split"""
        return self._interacted[u]

    def train_items(self, u: int) -> List[int]:
        return self.user_neighbors[u]

    def heldout(self, split: str = VALIDATION) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for (u, i), s in zip(self.edges, self.split):
            if s == split:
                out.setdefault(u, []).append(i)
        return {u: sorted(items) for u, items in sorted(out.items())}

    def train_edges(self) -> List[Tuple[int, int]]:
        return [e for e, s in zip(self.edges, self.split) if s == TRAIN]

    def user_degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.user_neighbors], dtype=np.int64)

    def item_degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.item_neighbors], dtype=np.int64)

    def normalized_adjacency(self) -> torch.Tensor:
        """Sparse (m+n)x(m+n) matrix D^-1/2 A D^-1/2 over train edges"""
        du, di = self.user_degree(), self.item_degree()
        isolated = [f"user {u}" for u in np.flatnonzero(du == 0)] + [f"item {i}" for i in np.flatnonzero(di == 0)]
        if isolated:
            raise GraphError(f"isolated node(s) in propagation: {', '.join(isolated[:10])}")
        rows, cols, vals = [], [], []
        m = self.num_users
        for u, items in enumerate(self.user_neighbors):
            for i in items:
                w = 1.0 / math.sqrt(du[u] * di[i])
                rows += [u, m + i]
                cols += [m + i, u]
                vals += [w, w]
        size = m + self.num_items
        adj = torch.sparse_coo_tensor(
            torch.tensor([rows, cols], dtype=torch.long), torch.tensor(vals, dtype=DTYPE), (size, size)
        )
        return adj.coalesce()


def build_graph(interactions: Sequence[Tuple[Any, Any]], split_spec: Optional[SplitSpec] = None) -> InteractionGraph:
    """
    Build the interaction graph with a seeded per-user train/validation/test split

    Each user's edges (sorted by item) are shuffled with the seeded generator; the first
    floor(validation_fraction * degree) go to validation, the next floor(test_fraction * degree)
    to test, the rest to train. Items left without a train edge get their held-out edge with the
    lowest user index moved back to train.
    """
    spec = split_spec or SplitSpec()
    user_index = {raw: k for k, raw in enumerate(sorted({u for u, _ in interactions}, key=_id_key))}
    item_index = {raw: k for k, raw in enumerate(sorted({i for _, i in interactions}, key=_id_key))}
    m, n = len(user_index), len(item_index)

    per_user: List[List[int]] = [[] for _ in range(m)]
    seen: Set[Tuple[int, int]] = set()
    duplicates = 0
    for raw_u, raw_i in interactions:
        edge = (user_index[raw_u], item_index[raw_i])
        if edge in seen:
            duplicates += 1
            continue
        seen.add(edge)
        per_user[edge[0]].append(edge[1])
    if duplicates:
        logger.warning("Dropped %d duplicate interactions", duplicates)

    rng = Rng(spec.seed)
    assignment: Dict[Tuple[int, int], str] = {}
    for u in range(m):
        items = sorted(per_user[u])
        order = rng.permutation(len(items))
        n_val = int(math.floor(spec.validation_fraction * len(items)))
        n_test = int(math.floor(spec.test_fraction * len(items)))
        if len(items) - n_val - n_test < 1:
            raw = next(r for r, k in user_index.items() if k == u)
            raise GraphError(f"user {raw!r} has no train edges after split")
        for rank, pos in enumerate(order):
            label = VALIDATION if rank < n_val else TEST if rank < n_val + n_test else TRAIN
            assignment[(u, items[pos])] = label

    covered = {i for (u, i), s in assignment.items() if s == TRAIN}
    for (u, i) in sorted(assignment):
        if i not in covered:
            assignment[(u, i)] = TRAIN
            covered.add(i)

    edges = sorted(assignment)
    split = [assignment[e] for e in edges]
    user_neighbors: List[List[int]] = [[] for _ in range(m)]
    item_neighbors: List[List[int]] = [[] for _ in range(n)]
    for (u, i), s in zip(edges, split):
        if s == TRAIN:
            user_neighbors[u].append(i)
            item_neighbors[i].append(u)

    graph = InteractionGraph(m, n, edges, split, user_neighbors, item_neighbors, user_index, item_index)
    counts = {s: split.count(s) for s in SPLITS}
    logger.info("Built graph: %d users, %d items, %s", m, n, counts)
    return graph


@dataclass
class EmbeddingTable:
    """Layer-0 parameters plus the derived layer-averaged embeddings"""
    layer0_user: torch.Tensor
    layer0_item: torch.Tensor
    num_layers: int
    final_user: Optional[torch.Tensor] = None
    final_item: Optional[torch.Tensor] = None

    @property
    def dim(self) -> int:
        return self.layer0_user.shape[1]

    def refresh(self, graph: InteractionGraph) -> "EmbeddingTable":
        with torch.no_grad():
            self.final_user, self.final_item = final_embeddings(propagate(graph, self, self.num_layers))
        check_finite(self.final_user, "final user embeddings")
        check_finite(self.final_item, "final item embeddings")
        return self


def init_embedding_table(num_users: int, num_items: int, dim: int, num_layers: int, rng: Rng,
                         std: float = 0.1) -> EmbeddingTable:
    return EmbeddingTable(rng.normal((num_users, dim), std), rng.normal((num_items, dim), std), num_layers)


class LayerEmbeddings(NamedTuple):
    user: torch.Tensor
    item: torch.Tensor


def propagate(graph: InteractionGraph, layer0: EmbeddingTable, num_layers: Optional[int] = None,
              adjacency: Optional[torch.Tensor] = None) -> List[LayerEmbeddings]:
    """LightGCN propagation; returns layers 0..L (layer 0 included)"""
    L = layer0.num_layers if num_layers is None else num_layers
    if L < 0:
        raise GraphError(f"number of layers must be >= 0, got {L}")
    layers = [LayerEmbeddings(layer0.layer0_user, layer0.layer0_item)]
    if L == 0:
        return layers
    adj = graph.normalized_adjacency() if adjacency is None else adjacency
    emb = torch.cat([layer0.layer0_user, layer0.layer0_item], dim=0)
    for _ in range(L):
        emb = torch.sparse.mm(adj, emb)
        user, item = torch.split(emb, [graph.num_users, graph.num_items])
        layers.append(LayerEmbeddings(user, item))
    return layers


def final_embeddings(layers: Sequence[LayerEmbeddings]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean over layers 0..K"""
    if not layers:
        raise GraphError("need at least one layer")
    shapes = {(tuple(l.user.shape), tuple(l.item.shape)) for l in layers}
    if len(shapes) != 1:
        raise GraphError(f"layer shape mismatch: {sorted(shapes)}")
    user = torch.stack([l.user for l in layers], dim=0).mean(dim=0)
    item = torch.stack([l.item for l in layers], dim=0).mean(dim=0)
    return user, item


def score(u_emb: torch.Tensor, i_emb: torch.Tensor) -> torch.Tensor:
    """Inner-product prediction score"""
    if u_emb.shape[-1] != i_emb.shape[-1]:
        raise GraphError(f"dimension mismatch: {u_emb.shape[-1]} vs {i_emb.shape[-1]}")
    return (u_emb * i_emb).sum(dim=-1)


@dataclass
class BprBatch:
    users: torch.Tensor
    pos_items: torch.Tensor
    neg_items: torch.Tensor

    def __len__(self) -> int:
        return int(self.users.numel())

    def validate(self, graph: InteractionGraph) -> None:
        for u, i, j in zip(self.users.tolist(), self.pos_items.tolist(), self.neg_items.tolist()):
            if i not in graph.user_neighbors[u]:
                raise GraphError(f"positive item {i} is not a train edge of user {u}")
            if j in graph.interacted(u):
                raise GraphError(f"negative item {j} is an edge of user {u}")


def sample_negatives(graph: InteractionGraph, u: int, rng: Rng) -> int:
    """Uniform draw over the items u never interacted with (any split)"""
    interacted = graph.interacted(u)
    if len(interacted) >= graph.num_items:
        raise GraphError(f"user {u} interacted with every item; no negative to sample")
    while True:
        j = int(rng.integers(0, graph.num_items))
        if j not in interacted:
            return j


def iter_bpr_batches(graph: InteractionGraph, batch_size: int, rng: Rng) -> Iterator[BprBatch]:
    """One epoch of shuffled train edges, one uniform negative per positive"""
    edges = graph.train_edges()
    order = rng.permutation(len(edges))
    for start in range(0, len(edges), batch_size):
        chunk = [edges[k] for k in order[start:start + batch_size]]
        users = [u for u, _ in chunk]
        negs = [sample_negatives(graph, u, rng) for u in users]
        yield BprBatch(
            torch.tensor(users, dtype=torch.long),
            torch.tensor([i for _, i in chunk], dtype=torch.long),
            torch.tensor(negs, dtype=torch.long),
        )


def bpr_loss(batch: BprBatch, final_user: torch.Tensor, final_item: torch.Tensor) -> torch.Tensor:
    """-sum ln sigmoid(y_ui - y_uj)"""
    u = final_user[batch.users]
    diff = score(u, final_item[batch.pos_items]) - score(u, final_item[batch.neg_items])
    return -F.logsigmoid(diff).sum()


def reg_loss(user_rows: torch.Tensor, item_rows: torch.Tensor, reg_weight: float) -> torch.Tensor:
    """reg_weight * (sum ||e_u||^2 + sum ||e_i||^2) over the given layer-0 rows"""
    return reg_weight * (user_rows.pow(2).sum() + item_rows.pow(2).sum())


def batch_reg_loss(batch: BprBatch, layer0_user: torch.Tensor, layer0_item: torch.Tensor,
                   reg_weight: float) -> torch.Tensor:
    # each node that appears in the batch is counted once
    users = torch.unique(batch.users)
    items = torch.unique(torch.cat([batch.pos_items, batch.neg_items]))
    return reg_loss(layer0_user[users], layer0_item[items], reg_weight)


def bpr_gradients(graph: InteractionGraph, table: EmbeddingTable, batch: BprBatch,
                  reg_weight: float = 0.0) -> Tuple[float, torch.Tensor, torch.Tensor]:
    """Joint loss and its gradient w.r.t. the layer-0 user/item matrices"""
    user0 = table.layer0_user.detach().clone().requires_grad_(True)
    item0 = table.layer0_item.detach().clone().requires_grad_(True)
    layers = propagate(graph, EmbeddingTable(user0, item0, table.num_layers))
    fu, fi = final_embeddings(layers)
    loss = bpr_loss(batch, fu, fi) + batch_reg_loss(batch, user0, item0, reg_weight)
    gu, gi = torch.autograd.grad(loss, [user0, item0])
    return loss.item(), gu, gi


@dataclass
class RecallResult:
    mean: float
    per_user: Dict[int, float]
    k: int


def rank_items(final_user: torch.Tensor, final_item: torch.Tensor, graph: InteractionGraph,
               users: Sequence[int], k: int) -> Dict[int, List[int]]:
    """Top-k non-train items per user; score descending, ties by ascending item id"""
    scores = final_user[list(users)] @ final_item.T
    for row, u in enumerate(users):
        train = graph.user_neighbors[u]
        if k > graph.num_items - len(train):
            raise GraphError(f"K={k} exceeds the {graph.num_items - len(train)} candidate items of user {u}")
        if train:
            scores[row, train] = -math.inf
    # a stable descending sort keeps equal scores in ascending item order
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :k]
    return {u: order[row].tolist() for row, u in enumerate(users)}


def recall_at_k(final_user: torch.Tensor, final_item: torch.Tensor, graph: InteractionGraph,
                k: int = 20, split: str = VALIDATION) -> RecallResult:
    """Mean Recall@k over users with at least one held-out item in `split`"""
    if k < 1:
        raise GraphError(f"K must be >= 1, got {k}")
    heldout = graph.heldout(split)
    if not heldout:
        raise GraphError(f"no {split} edges to evaluate")
    users = sorted(heldout)
    with torch.no_grad():
        top = rank_items(final_user, final_item, graph, users, k)
    per_user = {u: len(set(top[u]) & set(heldout[u])) / len(heldout[u]) for u in users}
    return RecallResult(float(np.mean([per_user[u] for u in users])), per_user, k)


class LightGcnTokenizer(torch.nn.Module):
    """Trainable layer-0 tables over a fixed graph"""

    def __init__(self, graph: InteractionGraph, table: EmbeddingTable):
        super().__init__()
        self.graph = graph
        self.num_layers = table.num_layers
        self.user_emb = torch.nn.Parameter(table.layer0_user.detach().clone())
        self.item_emb = torch.nn.Parameter(table.layer0_item.detach().clone())
        self.adjacency = graph.normalized_adjacency() if table.num_layers > 0 else None

    def forward(self) -> Tuple[torch.Tensor, torch.Tensor]:
        layers = propagate(self.graph, EmbeddingTable(self.user_emb, self.item_emb, self.num_layers),
                           adjacency=self.adjacency)
        return final_embeddings(layers)

    def snapshot(self) -> EmbeddingTable:
        return EmbeddingTable(self.user_emb.detach().clone(), self.item_emb.detach().clone(), self.num_layers)


def train_tokenizer(graph: InteractionGraph, config: Optional[GraphConfig] = None, seed: int = 0,
                    progress: bool = False) -> Tuple[EmbeddingTable, TrainingLog]:
    """
    Minimise BPR + L2 with Adam; stop once validation Recall@K has not improved
    for `patience` consecutive epochs and return the best checkpoint
    """
    config = config or GraphConfig()
    if not graph.heldout(VALIDATION):
        raise GraphError("training requires a non-empty validation split")
    rng = Rng(seed)
    table = init_embedding_table(graph.num_users, graph.num_items, config.dim, config.num_layers, rng,
                                 config.init_std)
    model = LightGcnTokenizer(graph, table)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))

    log = TrainingLog()
    best_recall, best_epoch, best_table, since_best = -1.0, -1, model.snapshot(), 0
    epochs = tqdm(range(config.max_epochs), desc="train-gnn", disable=not progress)
    for epoch in epochs:
        epoch_loss, step = 0.0, 0
        for step, batch in enumerate(iter_bpr_batches(graph, config.batch_size, rng)):
            optimizer.zero_grad()
            fu, fi = model()
            loss = bpr_loss(batch, fu, fi) + batch_reg_loss(batch, model.user_emb, model.item_emb, config.reg_weight)
            if not bool(torch.isfinite(loss)):
                logger.error("Tokenizer diverged at epoch %d step %d", epoch, step)
                raise DivergenceError(epoch, step, loss.item())
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()

        with torch.no_grad():
            fu, fi = model()
        recall = recall_at_k(fu, fi, graph, config.recall_k, VALIDATION).mean
        log.append(epoch=epoch, loss=epoch_loss, recall=recall)
        logger.info("epoch %d loss %.6f recall@%d %.4f", epoch, epoch_loss, config.recall_k, recall)

        if recall > best_recall:
            best_recall, best_epoch, best_table, since_best = recall, epoch, model.snapshot(), 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    log.best_epoch = best_epoch
    log.stopped_epoch = log.entries[-1]["epoch"] if log.entries else None
    log.rng_state = rng.get_state()
    logger.info("Best recall@%d %.4f at epoch %d", config.recall_k, best_recall, best_epoch)
    return best_table.refresh(graph), log
