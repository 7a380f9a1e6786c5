"""Synthetic interaction logs with planted block structure."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .corpus import InteractionLog


def planted_blocks(
    num_users: int = 200,
    num_items: int = 100,
    blocks: int = 4,
    per_user: int = 12,
    in_block: float = 0.9,
    seed: int = 0,
) -> Tuple[InteractionLog, np.ndarray, np.ndarray]:
    """Users and items split into ``blocks`` equal groups; each interaction
    stays inside the user's group with probability ``in_block``.

    Returns ``(log, user_block, item_block)``. A user never repeats an item.
    Timestamps are distinct and increasing in record order.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) * blocks // num_users
    item_block = np.arange(num_items) * blocks // num_items
    members = [np.flatnonzero(item_block == b) for b in range(blocks)]
    triples: List[Tuple[str, str, int]] = []
    ts = 0
    for u in range(num_users):
        own = members[user_block[u]]
        others = np.flatnonzero(item_block != user_block[u])
        chosen: List[int] = []
        while len(chosen) < per_user:
            pool = own if rng.random() < in_block else others
            i = int(rng.choice(pool))
            if i not in chosen:
                chosen.append(i)
        for i in chosen:
            ts += 1
            triples.append((f"u{u}", f"i{i}", ts))
    # interleave users so first-appearance order is not trivially blocked
    order = rng.permutation(len(triples))
    triples = [triples[k] for k in order]
    log = InteractionLog.from_triples(triples)
    # re-express block memberships in the log's vocabulary order
    ub = np.array([user_block[int(h[1:])] for h in log.users])
    ib = np.array([item_block[int(h[1:])] for h in log.items])
    return log, ub, ib


def random_log(num_users: int, num_items: int, num_records: int, seed: int = 0) -> InteractionLog:
    """Uniformly random records; every user and item appears at least once."""
    if num_records < max(num_users, num_items):
        raise ValueError("need at least one record per user and per item")
    rng = np.random.default_rng(seed)
    users = np.concatenate([np.arange(num_users), rng.integers(num_users, size=num_records - num_users)])
    items = np.concatenate([rng.permutation(num_items), rng.integers(num_items, size=num_records - num_items)])
    items = items[:num_records]
    users = users[:num_records]
    rng.shuffle(users)
    triples = [(f"u{u}", f"i{i}", k) for k, (u, i) in enumerate(zip(users.tolist(), items.tolist()))]
    return InteractionLog.from_triples(triples)
