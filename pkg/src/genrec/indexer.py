"""Hierarchical collaborative IDs for users and items.

Entities are clustered, oversized clusters are re-clustered one level
deeper, and entities that still share a token sequence get a trailing
ordinal. Spectral clustering on the interaction graphs (SCI) or K-means on
trained node embeddings (GCI) supply the clustering.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from . import embed, graph as graphs, spectral
from .corpus import InteractionLog, SplitDataset

log = logging.getLogger(__name__)

TOKEN_MIN, TOKEN_MAX = 1, 999
METHODS = ("sci", "gci")
TARGETS = ("u", "i", "ui", "coui")

ClusterFn = Callable[[Sequence[int]], np.ndarray]


class IndexingError(ValueError):
    """Invalid index configuration or unrepresentable index."""


@dataclass
class IndexConfig:
    method: str = "sci"
    target: str = "u"
    N: int = 20
    M: int = 20
    K: int = 10
    E: int = 64
    seed: int = 0
    normalized_laplacian: bool = False
    co_interaction: str = "distinct"
    gcn_epochs: int = 200
    gcn_lr: float = 0.01
    bpr_epochs: int = 50
    bpr_lr: float = 0.05
    bpr_mode: str = "bpr"

    def __post_init__(self) -> None:
        self.method = self.method.lower()
        self.target = self.target.lower()
        if self.method not in METHODS:
            raise IndexingError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.target not in TARGETS:
            raise IndexingError(f"target must be one of {TARGETS}, got {self.target!r}")
        if not 2 <= self.N <= TOKEN_MAX:
            raise IndexingError(f"N={self.N} must lie in [2, {TOKEN_MAX}]")
        if not 1 <= self.M <= TOKEN_MAX:
            raise IndexingError(f"M={self.M} must lie in [1, {TOKEN_MAX}]")
        if self.K < 1:
            raise IndexingError(f"K={self.K} must be >= 1")


@dataclass
class IndexDictionary:
    """Token sequences for one side (``"user"`` or ``"item"``), keyed by
    entity index."""

    side: str
    ids: Dict[int, Tuple[int, ...]]
    meta: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, entity: int) -> Tuple[int, ...]:
        return self.ids[entity]

    def entities(self) -> List[int]:
        return sorted(self.ids)

    def validate(self) -> None:
        seen: Dict[Tuple[int, ...], int] = {}
        for e, seq in self.ids.items():
            if not seq:
                raise IndexingError(f"{self.side} {e} has an empty ID")
            for t in seq:
                if not TOKEN_MIN <= t <= TOKEN_MAX:
                    raise IndexingError(f"{self.side} {e}: token {t} outside [{TOKEN_MIN}, {TOKEN_MAX}]")
            if seq in seen:
                raise IndexingError(f"{self.side}s {seen[seq]} and {e} share ID {render_id(seq)!r}")
            seen[seq] = e


@dataclass
class HierarchyResult:
    ids: Dict[Hashable, Tuple[int, ...]]  # after dedup
    leaves: Dict[Hashable, Tuple[int, ...]]  # before dedup
    levels: List[Dict[Hashable, int]]  # label assigned to each entity at each level
    depth_limit_hit: bool


def render_id(seq: Sequence[int]) -> str:
    """``[13, 25, 46] -> "13 25 46"``."""
    for t in seq:
        if not TOKEN_MIN <= int(t) <= TOKEN_MAX:
            raise IndexingError(f"token {t} outside [{TOKEN_MIN}, {TOKEN_MAX}]")
    return " ".join(str(int(t)) for t in seq)


def parse_id(text: str) -> Tuple[int, ...]:
    seq = tuple(int(t) for t in text.split())
    render_id(seq)
    return seq


def hierarchical_ids(
    entities: Sequence[Hashable],
    cluster_fn: ClusterFn,
    config: IndexConfig,
    sides: Optional[Sequence[Hashable]] = None,
) -> HierarchyResult:
    """Build token IDs by recursive clustering.

    ``cluster_fn`` receives positions into ``entities`` (in entity order) and
    returns one label in ``[1, N]`` per position. Depth 1 clusters everyone;
    any cluster with more than ``M`` members is re-clustered and the sub-label
    appended, up to ``K`` tokens. Entities left with the same sequence get a
    1-based ordinal appended, in entity order. ``sides`` partitions entities
    for deduplication (co-indexed users and items may share a sequence).
    """
    n = len(entities)
    if n == 0:
        return HierarchyResult({}, {}, [], False)
    seqs: List[List[int]] = [[] for _ in range(n)]
    levels: List[Dict[Hashable, int]] = []

    def assign(members: List[int]) -> Dict[int, List[int]]:
        labels = np.asarray(cluster_fn(members)).astype(int).tolist()
        if len(labels) != len(members):
            raise IndexingError("cluster_fn returned the wrong number of labels")
        groups: Dict[int, List[int]] = {}
        for pos, lab in zip(members, labels):
            if not TOKEN_MIN <= lab <= TOKEN_MAX:
                raise IndexingError(f"cluster label {lab} outside [{TOKEN_MIN}, {TOKEN_MAX}]")
            seqs[pos].append(lab)
            levels[-1][entities[pos]] = lab
            groups.setdefault(lab, []).append(pos)
        return groups

    levels.append({})
    frontier = [g for _, g in sorted(assign(list(range(n))).items())]
    depth = 1
    depth_hit = False
    while True:
        oversized = [g for g in frontier if len(g) > config.M]
        if not oversized:
            break
        if depth >= config.K:
            depth_hit = True
            break
        levels.append({})
        frontier = []
        for g in oversized:
            frontier.extend(grp for _, grp in sorted(assign(g).items()))
        depth += 1

    leaves = {entities[p]: tuple(seqs[p]) for p in range(n)}
    side_of = list(sides) if sides is not None else [None] * n
    buckets: Dict[Tuple[Hashable, Tuple[int, ...]], List[int]] = {}
    for p in range(n):
        buckets.setdefault((side_of[p], tuple(seqs[p])), []).append(p)
    ids: Dict[Hashable, Tuple[int, ...]] = {}
    for (_, seq), members in buckets.items():
        if len(members) == 1:
            ids[entities[members[0]]] = seq
            continue
        if len(members) > TOKEN_MAX:
            raise IndexingError(
                f"{len(members)} entities share ID {render_id(seq)!r} after {depth} levels; "
                f"ordinal token would exceed {TOKEN_MAX} (raise K or lower M)"
            )
        for ordinal, p in enumerate(members, start=1):
            ids[entities[p]] = seq + (ordinal,)
    return HierarchyResult(ids, leaves, levels, depth_hit)


def fallback_ids(count: int) -> Dict[int, Tuple[int, ...]]:
    """Sequential fixed-length IDs: the index written in base 999, each
    digit shifted by one so tokens stay in [1, 999]. Fixed length keeps the
    set prefix-free."""
    base = TOKEN_MAX
    width = 1
    while base**width < count:
        width += 1
    out = {}
    for k in range(count):
        digits = []
        x = k
        for _ in range(width):
            digits.append(x % base + 1)
            x //= base
        out[k] = tuple(reversed(digits))
    return out


# --------------------------------------------------------------------------
# SCI / GCI wiring
# --------------------------------------------------------------------------


def _spectral_fn(g: graphs.WeightedGraph, config: IndexConfig) -> ClusterFn:
    def fn(members: Sequence[int]) -> np.ndarray:
        k = min(config.N, len(members))
        sub = g if len(members) == g.num_nodes else g.subgraph(members)
        return spectral.spectral_cluster(sub, k, seed=config.seed, normalized=config.normalized_laplacian)

    return fn


def _kmeans_fn(X: np.ndarray, config: IndexConfig) -> ClusterFn:
    def fn(members: Sequence[int]) -> np.ndarray:
        k = min(config.N, len(members))
        labels, _ = embed.kmeans(X[np.asarray(members)], k, seed=config.seed)
        return labels

    return fn


def _gcn_embeddings(g: graphs.WeightedGraph, config: IndexConfig) -> np.ndarray:
    labels = spectral.spectral_cluster(
        g, min(config.N, g.num_nodes), seed=config.seed, normalized=config.normalized_laplacian
    )
    cfg = embed.GcnConfig(dim=config.E, lr=config.gcn_lr, epochs=config.gcn_epochs, seed=config.seed)
    return embed.zscore(embed.gcn_train(g, labels, cfg))


def _single_graph(g: graphs.WeightedGraph, config: IndexConfig) -> HierarchyResult:
    if config.method == "sci":
        fn = _spectral_fn(g, config)
    else:
        fn = _kmeans_fn(_gcn_embeddings(g, config), config)
    return hierarchical_ids(list(range(g.num_nodes)), fn, config)


def _meta(config: IndexConfig, side: str, depth_hit: bool) -> Dict[str, object]:
    meta: Dict[str, object] = {
        "method": config.method,
        "target": config.target,
        "N": config.N,
        "M": config.M,
        "K": config.K,
        "E": config.E,
        "seed": config.seed,
        "side": side,
        "depth_limit_hit": depth_hit,
    }
    return meta


def _fallback(side: str, count: int, config: IndexConfig) -> IndexDictionary:
    meta = _meta(config, side, False)
    meta["scheme"] = "sequential"
    return IndexDictionary(side, fallback_ids(count), meta)


def build_index(
    log: InteractionLog, split: SplitDataset, config: IndexConfig
) -> Tuple[IndexDictionary, IndexDictionary]:
    """Index users and items according to ``config.target``.

    A side the target does not cover gets sequential fallback IDs, so the
    result always contains both dictionaries; their ``meta["scheme"]`` tells
    which is which.
    """
    m, n = split.num_users, split.num_items
    user_index: Optional[IndexDictionary] = None
    item_index: Optional[IndexDictionary] = None

    if config.target in ("u", "ui"):
        res = _single_graph(graphs.build_user_graph(split, config.co_interaction), config)
        user_index = IndexDictionary("user", res.ids, _meta(config, "user", res.depth_limit_hit))
    if config.target in ("i", "ui"):
        res = _single_graph(graphs.build_item_graph(split), config)
        item_index = IndexDictionary("item", res.ids, _meta(config, "item", res.depth_limit_hit))
    if config.target == "coui":
        if config.method == "sci":
            joint = graphs.build_user_item_graph(split, config.co_interaction)
            fn = _spectral_fn(joint, config)
        else:
            bpr = embed.BprConfig(
                dim=config.E, lr=config.bpr_lr, epochs=config.bpr_epochs, mode=config.bpr_mode, seed=config.seed
            )
            users, items = embed.mf_bpr_train(split, bpr)
            fn = _kmeans_fn(embed.zscore(np.vstack([users, items])), config)
        nodes = list(range(m + n))
        sides = ["user"] * m + ["item"] * n
        res = hierarchical_ids(nodes, fn, config, sides=sides)
        user_index = IndexDictionary(
            "user", {k: res.ids[k] for k in range(m)}, _meta(config, "user", res.depth_limit_hit)
        )
        item_index = IndexDictionary(
            "item", {k - m: res.ids[k] for k in range(m, m + n)}, _meta(config, "item", res.depth_limit_hit)
        )

    if user_index is None:
        user_index = _fallback("user", m, config)
    if item_index is None:
        item_index = _fallback("item", n, config)
    for idx in (user_index, item_index):
        idx.meta.setdefault("scheme", "collaborative")
        idx.validate()
    return user_index, item_index


# --------------------------------------------------------------------------
# Index files
# --------------------------------------------------------------------------


def write_index(index: IndexDictionary, handles: Sequence[str], path, extra_meta=None) -> None:
    """``entity<TAB>token token ...`` lines after ``# key=value`` headers."""
    meta = dict(index.meta)
    if extra_meta:
        meta.update(extra_meta)
    with Path(path).open("w", encoding="utf-8") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        for e in index.entities():
            fh.write(f"{handles[e]}\t{render_id(index.ids[e])}\n")


def read_index(path, handles: Sequence[str], side: str) -> IndexDictionary:
    lookup = {h: k for k, h in enumerate(handles)}
    ids: Dict[int, Tuple[int, ...]] = {}
    meta: Dict[str, object] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
                continue
            handle, _, text = line.partition("\t")
            if handle not in lookup:
                raise IndexingError(f"{path}: unknown {side} {handle!r}")
            ids[lookup[handle]] = parse_id(text)
    index = IndexDictionary(side, ids, meta)
    index.validate()
    return index


def config_dict(config: IndexConfig) -> Dict[str, object]:
    return asdict(config)
