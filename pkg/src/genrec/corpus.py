"""Interaction logs: ingestion, leave-one-out splitting and dataset statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple


class CorpusError(ValueError):
    """Raised for malformed or empty interaction files."""


@dataclass(frozen=True)
class InteractionRecord:
    user: int
    item: int
    timestamp: int = 0


@dataclass
class InteractionLog:
    """User/item vocabularies plus the raw interaction records.

    ``users`` and ``items`` hold the original string handles; records refer
    to them by dense index (position in the vocabulary).
    """

    users: List[str]
    items: List[str]
    records: List[InteractionRecord]

    def __post_init__(self) -> None:
        m, n = len(self.users), len(self.items)
        for r in self.records:
            if not (0 <= r.user < m and 0 <= r.item < n):
                raise CorpusError(f"record {r} references an unknown handle")

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def user_histories(self) -> List[List[InteractionRecord]]:
        """Per-user records sorted by timestamp, ties kept in input order."""
        hist: List[List[InteractionRecord]] = [[] for _ in self.users]
        for r in self.records:
            hist[r.user].append(r)
        for h in hist:
            h.sort(key=lambda r: r.timestamp)  # list.sort is stable
        return hist

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence]) -> "InteractionLog":
        """Build a log from ``(user, item[, timestamp])`` tuples of handles."""
        user_ix: Dict[str, int] = {}
        item_ix: Dict[str, int] = {}
        records = []
        for t in triples:
            u, i = str(t[0]), str(t[1])
            ts = int(t[2]) if len(t) > 2 else 0
            records.append(
                InteractionRecord(
                    user_ix.setdefault(u, len(user_ix)),
                    item_ix.setdefault(i, len(item_ix)),
                    ts,
                )
            )
        return cls(list(user_ix), list(item_ix), records)


@dataclass
class SplitDataset:
    """Leave-one-out partition. Values are item indices."""

    num_users: int
    num_items: int
    train: Dict[int, List[int]]
    valid: Dict[int, int] = field(default_factory=dict)
    test: Dict[int, int] = field(default_factory=dict)

    def train_pairs(self) -> List[Tuple[int, int]]:
        return [(u, i) for u in sorted(self.train) for i in self.train[u]]


@dataclass(frozen=True)
class CorpusStats:
    num_users: int
    num_items: int
    num_interactions: int
    sparsity: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_users": self.num_users,
                "num_items": self.num_items,
                "num_interactions": self.num_interactions,
                "sparsity": self.sparsity,
            },
            indent=2,
        )


def _split_line(line: str, fmt: str) -> List[str]:
    if fmt == "csv":
        return [f.strip() for f in next(csv.reader([line]))]
    # tsv: any whitespace run separates fields
    return line.split()


def load_interactions(path, format: str = "tsv") -> InteractionLog:
    """Read ``user<sep>item[<sep>timestamp]`` lines.

    Vocabularies get dense indices in first-appearance order. Duplicate
    (user, item) pairs stay as separate records. Blank lines and lines
    starting with ``#`` are skipped.
    """
    if format not in ("tsv", "csv"):
        raise CorpusError(f"unknown format {format!r}")
    triples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = _split_line(line, format)
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise CorpusError(f"{path}:{lineno}: expected user, item[, timestamp]; got {line!r}")
            if len(fields) == 3:
                try:
                    ts = int(fields[2])
                except ValueError:
                    raise CorpusError(f"{path}:{lineno}: bad timestamp {fields[2]!r}") from None
                triples.append((fields[0], fields[1], ts))
            else:
                triples.append((fields[0], fields[1]))
    if not triples:
        raise CorpusError(f"{path}: no interactions")
    return InteractionLog.from_triples(triples)


def save_interactions(log: InteractionLog, path) -> None:
    """Write the log as TSV in record order; reloading reproduces the log."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(f"{log.users[r.user]}\t{log.items[r.item]}\t{r.timestamp}\n")


def leave_one_out_split(log: InteractionLog) -> SplitDataset:
    """Last interaction to test, second-to-last to valid, the rest to train.

    Users with fewer than three interactions keep everything in train and are
    not evaluated.
    """
    train: Dict[int, List[int]] = {}
    valid: Dict[int, int] = {}
    test: Dict[int, int] = {}
    for u, hist in enumerate(log.user_histories()):
        items = [r.item for r in hist]
        if len(items) >= 3:
            train[u] = items[:-2]
            valid[u] = items[-2]
            test[u] = items[-1]
        else:
            train[u] = items
    return SplitDataset(log.num_users, log.num_items, train, valid, test)


def write_split(split: SplitDataset, log: InteractionLog, directory) -> None:
    """Write ``train.tsv``, ``valid.tsv`` and ``test.tsv`` (``user<TAB>item``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "train.tsv").open("w", encoding="utf-8") as fh:
        for u, i in split.train_pairs():
            fh.write(f"{log.users[u]}\t{log.items[i]}\n")
    for name, part in (("valid", split.valid), ("test", split.test)):
        with (d / f"{name}.tsv").open("w", encoding="utf-8") as fh:
            for u in sorted(part):
                fh.write(f"{log.users[u]}\t{log.items[part[u]]}\n")


def read_split(log: InteractionLog, directory) -> SplitDataset:
    d = Path(directory)
    uix = {h: k for k, h in enumerate(log.users)}
    iix = {h: k for k, h in enumerate(log.items)}

    def rows(name):
        with (d / f"{name}.tsv").open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    u, i = line.rstrip("\n").split("\t")
                    yield uix[u], iix[i]

    train: Dict[int, List[int]] = {u: [] for u in range(log.num_users)}
    for u, i in rows("train"):
        train[u].append(i)
    valid = dict(rows("valid"))
    test = dict(rows("test"))
    return SplitDataset(log.num_users, log.num_items, train, valid, test)


def corpus_stats(log: InteractionLog) -> CorpusStats:
    m, n, k = log.num_users, log.num_items, len(log.records)
    return CorpusStats(m, n, k, 1.0 - k / (m * n))


def format_sparsity(stats: CorpusStats) -> str:
    return f"{100 * stats.sparsity:.2f}%"

