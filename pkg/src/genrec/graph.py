"""User-only, item-only and joint user-item interaction graphs.

All builders read the *train* part of a split only. Weights:

* user-user: number of distinct items both users interacted with
* item-item: number of users whose history contains both items
* user-item: number of interaction records between the pair
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .corpus import SplitDataset

USER, ITEM = "u", "i"


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph with positive integer weights, stored as a sparse
    symmetric adjacency with an empty diagonal.

    ``nodes`` tags every row with ``(side, index)`` where ``side`` is
    ``"u"`` or ``"i"`` and ``index`` is the entity's dense index.
    """

    nodes: Tuple[Tuple[str, int], ...]
    adjacency: sp.csr_matrix

    def __post_init__(self) -> None:
        n = len(self.nodes)
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adjacency.shape} does not match {n} nodes")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def weight(self, a: int, b: int) -> int:
        return int(self.adjacency[a, b])

    def edges(self) -> List[Tuple[int, int, int]]:
        """Edges as ``(a, b, w)`` with ``a < b``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        out = sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))
        return [(a, b, int(w)) for a, b, w in out]

    def subgraph(self, rows: Sequence[int]) -> "WeightedGraph":
        rows = np.asarray(rows, dtype=np.int64)
        adj = self.adjacency[rows][:, rows].tocsr()
        return WeightedGraph(tuple(self.nodes[r] for r in rows), adj)

    def dense(self) -> np.ndarray:
        return self.adjacency.toarray().astype(np.float64)


def _counts(split: SplitDataset) -> sp.csr_matrix:
    """User x item matrix of record counts."""
    rows, cols = [], []
    for u, items in split.train.items():
        rows.extend([u] * len(items))
        cols.extend(items)
    data = np.ones(len(rows), dtype=np.int64)
    c = sp.coo_matrix((data, (rows, cols)), shape=(split.num_users, split.num_items))
    return c.tocsr()  # duplicates are summed


def _offdiag(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.int64)
    m.setdiag(0)
    m.eliminate_zeros()
    return m


def _user_user(counts: sp.csr_matrix, count: str) -> sp.csr_matrix:
    if count == "distinct":
        b = (counts > 0).astype(np.int64)
        return _offdiag(b @ b.T)
    if count == "records":
        # number of record pairs (r_u, r_v) on a shared item
        return _offdiag(counts @ counts.T)
    raise ValueError(f"unknown co-interaction counting {count!r}")


def _item_item(counts: sp.csr_matrix) -> sp.csr_matrix:
    b = (counts > 0).astype(np.int64)
    return _offdiag(b.T @ b)


def build_user_graph(split: SplitDataset, count: str = "distinct") -> WeightedGraph:
    adj = _user_user(_counts(split), count)
    return WeightedGraph(tuple((USER, u) for u in range(split.num_users)), adj)


def build_item_graph(split: SplitDataset) -> WeightedGraph:
    adj = _item_item(_counts(split))
    return WeightedGraph(tuple((ITEM, i) for i in range(split.num_items)), adj)


def build_user_item_graph(split: SplitDataset, count: str = "distinct") -> WeightedGraph:
    """Joint graph; users occupy rows ``0..m-1`` and items ``m..m+n-1``."""
    c = _counts(split)
    adj = sp.bmat([[_user_user(c, count), c], [c.T, _item_item(c)]], format="csr", dtype=np.int64)
    adj.eliminate_zeros()
    nodes = tuple((USER, u) for u in range(split.num_users)) + tuple(
        (ITEM, i) for i in range(split.num_items)
    )
    return WeightedGraph(nodes, adj)


def write_graph(graph: WeightedGraph, path, names=None) -> None:
    """TSV dump ``node_a<TAB>node_b<TAB>weight``; nodes are written as
    ``u:<handle>`` / ``i:<handle>``. ``names`` maps side -> handle list."""

    def label(k: int) -> str:
        side, idx = graph.nodes[k]
        handle = names[side][idx] if names else str(idx)
        return f"{side}:{handle}"

    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# node_a\tnode_b\tweight\t(nodes tagged u:=user i:=item)\n")
        for a, b, w in graph.edges():
            fh.write(f"{label(a)}\t{label(b)}\t{w}\n")
