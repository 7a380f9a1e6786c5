"""Node embeddings for graph collaborative indexing.

Two embedding trainers (a two-layer GCN fit to cluster labels and BPR matrix
factorisation on user-item pairs), per-dimension z-scoring, and the K-means
quantiser that turns embeddings into cluster tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import torch

from .corpus import SplitDataset
from .graph import WeightedGraph

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a loss becomes non-finite."""


# --------------------------------------------------------------------------
# K-means
# --------------------------------------------------------------------------


@dataclass
class LloydRun:
    labels: np.ndarray  # 0-based
    centroids: np.ndarray
    inertia: float
    history: List[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than clusters: duplicates are allowed
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers, dtype=np.float64)


def lloyd(X: np.ndarray, init: np.ndarray, max_iter: int = 300) -> LloydRun:
    """Lloyd iterations until the assignment stops changing.

    An empty cluster keeps its previous centroid.
    """
    C = init.copy()
    d = _sq_dists(X, C)
    labels = d.argmin(1)
    history = [float(d[np.arange(len(X)), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(C.shape[0]):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(0)
        d = _sq_dists(X, C)
        new = d.argmin(1)
        history.append(float(d[np.arange(len(X)), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return LloydRun(labels, C, history[-1], history, it)


def _canonical(labels: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Relabel clusters in order of first appearance."""
    order: List[int] = []
    seen = set()
    for lab in labels.tolist():
        if lab not in seen:
            seen.add(lab)
            order.append(lab)
    order += [c for c in range(len(centroids)) if c not in seen]
    remap = np.empty(len(centroids), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels], centroids[order]


def kmeans(
    X: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = 300,
) -> Tuple[np.ndarray, np.ndarray]:
    """K-means with k-means++ seeding and ``n_init`` restarts.

    Returns ``(labels, centroids)`` of the lowest-inertia run. Labels are
    1-based and numbered in order of first appearance.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("kmeans expects a 2-D array")
    if not 1 <= n_clusters <= X.shape[0]:
        raise ValueError(f"n_clusters={n_clusters} must lie in [1, {X.shape[0]}]")
    rng = np.random.default_rng(seed)
    best: Optional[LloydRun] = None
    for _ in range(n_init):
        run = lloyd(X, kmeans_plusplus(X, n_clusters, rng), max_iter)
        if best is None or run.inertia < best.inertia:
            best = run
    labels, centroids = _canonical(best.labels, best.centroids)
    return labels + 1, centroids


def inertia(X: np.ndarray, labels: np.ndarray) -> float:
    """Sum of squared distances to cluster means (labels of any base)."""
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for lab in np.unique(labels):
        pts = X[labels == lab]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


# --------------------------------------------------------------------------
# Z-score
# --------------------------------------------------------------------------


def zscore(X: np.ndarray) -> np.ndarray:
    """Per-column ``(x - mean) / std`` with population std; constant columns
    become zeros."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(0)
    sigma = X.std(0)
    out = np.zeros_like(X)
    ok = sigma > 0
    out[:, ok] = (X[:, ok] - mu[ok]) / sigma[ok]
    return out


# --------------------------------------------------------------------------
# GCN
# --------------------------------------------------------------------------


def normalized_adjacency(graph: WeightedGraph) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2`` as a sparse float64 tensor."""
    a = graph.adjacency.astype(np.float64) + sp.identity(graph.num_nodes, format="csr")
    deg = np.asarray(a.sum(1)).ravel()
    inv = 1.0 / np.sqrt(deg)
    a_hat = (sp.diags(inv) @ a @ sp.diags(inv)).tocoo()
    idx = torch.from_numpy(np.vstack([a_hat.row, a_hat.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(a_hat.data), a_hat.shape, check_invariants=False).coalesce()


class GcnModel(torch.nn.Module):
    """Learnable node features followed by two graph convolutions.

    hidden = relu(Â F W1), logits = Â hidden W2.
    """

    def __init__(self, num_nodes: int, dim: int, num_classes: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        g = generator
        self.features = torch.nn.Parameter(torch.randn(num_nodes, dim, generator=g, dtype=torch.float64) * 0.1)
        self.w1 = torch.nn.Parameter(torch.randn(dim, dim, generator=g, dtype=torch.float64) / math.sqrt(dim))
        self.w2 = torch.nn.Parameter(torch.randn(dim, num_classes, generator=g, dtype=torch.float64) / math.sqrt(dim))

    def forward(self, a_hat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = torch.relu(torch.sparse.mm(a_hat, self.features) @ self.w1)
        logits = torch.sparse.mm(a_hat, hidden) @ self.w2
        return hidden, logits


def gcn_forward(model: GcnModel, graph: WeightedGraph) -> Tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        hidden, logits = model(normalized_adjacency(graph))
    return hidden.numpy(), logits.numpy()


def gcn_loss(model: GcnModel, a_hat: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy summed over nodes; ``targets`` are 0-based classes."""
    _, logits = model(a_hat)
    return torch.nn.functional.cross_entropy(logits, targets, reduction="sum")


@dataclass
class GcnConfig:
    dim: int = 64
    lr: float = 0.01
    epochs: int = 200
    seed: int = 0


def gcn_train(
    graph: WeightedGraph,
    labels: np.ndarray,
    config: GcnConfig = GcnConfig(),
    losses: Optional[List[float]] = None,
) -> np.ndarray:
    """Fit the GCN to 1-based cluster ``labels``; return the hidden layer.

    Full-batch SGD. The reported loss is the node sum; the step uses the
    node-averaged gradient so ``lr`` does not depend on graph size.
    """
    labels = np.asarray(labels)
    if labels.shape != (graph.num_nodes,):
        raise ValueError("labels must cover every node")
    targets = torch.from_numpy(labels.astype(np.int64) - 1)
    num_classes = int(labels.max())
    g = torch.Generator().manual_seed(config.seed)
    model = GcnModel(graph.num_nodes, config.dim, num_classes, generator=g)
    a_hat = normalized_adjacency(graph)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr / graph.num_nodes)
    for epoch in range(config.epochs):
        opt.zero_grad()
        loss = gcn_loss(model, a_hat, targets)
        if not torch.isfinite(loss):
            raise TrainingError(f"GCN loss became {loss.item()} at epoch {epoch}")
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(loss.item())
    with torch.no_grad():
        hidden, _ = model(a_hat)
    return hidden.numpy()


# --------------------------------------------------------------------------
# BPR matrix factorisation
# --------------------------------------------------------------------------


class MfModel(torch.nn.Module):
    def __init__(self, num_users: int, num_items: int, dim: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.user = torch.nn.Parameter(torch.randn(num_users, dim, generator=generator, dtype=torch.float64) * 0.1)
        self.item = torch.nn.Parameter(torch.randn(num_items, dim, generator=generator, dtype=torch.float64) * 0.1)


def bpr_loss(
    model: MfModel,
    users: torch.Tensor,
    pos: torch.Tensor,
    neg: torch.Tensor,
    mode: str = "bpr",
) -> torch.Tensor:
    """Summed pairwise loss.

    ``neg`` has shape ``(batch, k)``. In ``"bpr"`` mode every (pos, neg) pair
    contributes ``-log sigmoid(u.i_pos - u.i_neg)``. In ``"softmax"`` mode the
    k negatives of a positive are mixed as
    ``-log sum_j sigmoid(u.i_pos - u.i_neg_j) * softmax_j(u.i_neg_j)``.
    """
    u = model.user[users]
    s_pos = (u * model.item[pos]).sum(-1)
    s_neg = torch.einsum("bd,bkd->bk", u, model.item[neg])
    diff = s_pos[:, None] - s_neg
    if mode == "bpr":
        return -torch.nn.functional.logsigmoid(diff).sum()
    if mode == "softmax":
        mix = torch.nn.functional.logsigmoid(diff) + torch.log_softmax(s_neg, dim=-1)
        return -torch.logsumexp(mix, dim=-1).sum()
    raise ValueError(f"unknown BPR mode {mode!r}")


@dataclass
class BprConfig:
    dim: int = 64
    lr: float = 0.05
    epochs: int = 50
    negatives_per_pos: int = 1
    batch_size: int = 256
    mode: str = "bpr"
    seed: int = 0


def sample_negatives(
    split: SplitDataset, users: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform non-interacted items by rejection sampling; ``users`` must
    all have at least one non-interacted item."""
    seen = {u: set(split.train.get(u, ())) for u in np.unique(users).tolist()}
    out = rng.integers(split.num_items, size=(len(users), k))
    for r, u in enumerate(users.tolist()):
        s = seen[u]
        for c in range(k):
            while int(out[r, c]) in s:
                out[r, c] = rng.integers(split.num_items)
    return out


def mf_bpr_train(
    split: SplitDataset,
    config: BprConfig = BprConfig(),
    losses: Optional[List[float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Train user/item embeddings on the train interactions.

    Users who interacted with every item have no negatives and are skipped.
    """
    rng = np.random.default_rng(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    model = MfModel(split.num_users, split.num_items, config.dim, generator=g)
    pairs = np.array(
        [(u, i) for u, i in split.train_pairs() if len(set(split.train[u])) < split.num_items],
        dtype=np.int64,
    ).reshape(-1, 2)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = pairs[order[start : start + config.batch_size]]
            neg = sample_negatives(split, batch[:, 0], config.negatives_per_pos, rng)
            opt.zero_grad()
            loss = bpr_loss(
                model,
                torch.from_numpy(batch[:, 0]),
                torch.from_numpy(batch[:, 1]),
                torch.from_numpy(neg),
                config.mode,
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"BPR loss became {loss.item()} at epoch {epoch}")
            (loss / len(batch)).backward()
            opt.step()
            total += loss.item()
        if losses is not None:
            losses.append(total)
    return model.user.detach().numpy().copy(), model.item.detach().numpy().copy()
