"""Leave-one-out ranking metrics and efficiency reporting."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

from .corpus import SplitDataset

CSV_HEADER = "method,target,N,M,E,w,HR@5,NDCG@5,HR@10,NDCG@10,params,epochs,seconds"


class SupportsRecommend(Protocol):
    def recommend(self, user: int, topk: int = 10, exclude=()) -> List[Tuple[int, float]]: ...


def hit_ratio_at_k(recs: Sequence[int], truth: int, k: int) -> int:
    return int(truth in list(recs)[:k])


def ndcg_at_k(recs: Sequence[int], truth: int, k: int) -> float:
    """Single relevant item: ``1 / log2(rank + 1)`` inside the cutoff."""
    top = list(recs)[:k]
    if truth not in top:
        return 0.0
    rank = top.index(truth) + 1
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsReport:
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    users_evaluated: int
    wall_time: float = 0.0
    epochs: int = 0
    param_count: int = 0
    per_user: Dict[int, List[int]] = field(default_factory=dict, repr=False)

    def metrics_json(self) -> str:
        """Deterministic metric fields only (no timing)."""
        return json.dumps(
            {
                "hr": {str(k): v for k, v in sorted(self.hr.items())},
                "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
                "users_evaluated": self.users_evaluated,
                "epochs": self.epochs,
                "param_count": self.param_count,
            },
            indent=2,
            sort_keys=True,
        )

    def check(self) -> None:
        """Raise if a structural invariant of the report is violated."""
        ks = sorted(self.hr)
        for k in ks:
            if self.ndcg[k] > self.hr[k] + 1e-12:
                raise AssertionError(f"NDCG@{k} > HR@{k}")
        for a, b in zip(ks, ks[1:]):
            if self.hr[a] > self.hr[b] + 1e-12 or self.ndcg[a] > self.ndcg[b] + 1e-12:
                raise AssertionError(f"metrics not monotone between K={a} and K={b}")


def evaluate(
    recommender: SupportsRecommend,
    split: SplitDataset,
    ks: Sequence[int] = (5, 10),
    filter_train: bool = True,
    use_valid: bool = False,
) -> MetricsReport:
    """Average HR@K / NDCG@K over users that have a held-out item.

    With ``filter_train`` the user's training items are removed from the
    candidate list before cutting at K.
    """
    start = time.perf_counter()
    held = split.valid if use_valid else split.test
    depth = max(ks)
    hr = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    per_user: Dict[int, List[int]] = {}
    for u in sorted(held):
        exclude = split.train.get(u, ()) if filter_train else ()
        recs = [i for i, _ in recommender.recommend(u, depth, exclude)]
        per_user[u] = recs
        for k in ks:
            hr[k] += hit_ratio_at_k(recs, held[u], k)
            ndcg[k] += ndcg_at_k(recs, held[u], k)
    n = len(held)
    if n:
        hr = {k: v / n for k, v in hr.items()}
        ndcg = {k: v / n for k, v in ndcg.items()}
    return MetricsReport(hr, ndcg, n, time.perf_counter() - start, per_user=per_user)


@dataclass
class RunLog:
    epochs: int
    train_seconds: float
    eval_seconds: float
    param_count: int
    loss_curve: List[float] = field(default_factory=list)


def efficiency_report(run: RunLog) -> Dict[str, object]:
    return {
        "epochs": run.epochs,
        "train_seconds": round(run.train_seconds, 3),
        "eval_seconds": round(run.eval_seconds, 3),
        "wall_time": round(run.train_seconds + run.eval_seconds, 3),
        "param_count": run.param_count,
    }


def csv_row(
    report: Optional[MetricsReport],
    method: str,
    target: str,
    N: int,
    M: int,
    E: int,
    w: int,
    params: Optional[int],
    epochs: Optional[int],
    seconds: Optional[float],
) -> str:
    def fmt(x, spec="{:.4f}"):
        return "NA" if x is None else spec.format(x)

    metrics = ["NA"] * 4
    if report is not None:
        metrics = [fmt(report.hr.get(5)), fmt(report.ndcg.get(5)), fmt(report.hr.get(10)), fmt(report.ndcg.get(10))]
    return ",".join(
        [method, target, str(N), str(M), str(E), str(w), *metrics, fmt(params, "{}"), fmt(epochs, "{}"), fmt(seconds, "{:.1f}")]
    )
