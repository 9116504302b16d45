"""Rating error and top-K ranking metrics on popularity-debiased test subsets."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataio import TestSubset

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RankingProtocol:
    k: int = 10
    candidates_per_positive: int = 99
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.candidates_per_positive < 0:
            raise ValueError("k must be >= 1 and candidates_per_positive >= 0")


@dataclass
class MetricsReport:
    mae: float
    mse: float
    hr_at_k: float
    ndcg_at_k: float
    n_ratings: int
    n_users: int
    subset_popularity: int
    k: int = 10
    candidates_per_positive: int = 99
    protocol_seed: int = 0


def mae_mse(y, yhat) -> tuple[float, float]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.size == 0 or y.shape != yhat.shape:
        raise ValueError(f"mae_mse: need equal non-empty inputs, got {y.shape} and {yhat.shape}")
    err = y - yhat
    return float(np.mean(np.abs(err))), float(np.mean(err * err))


def rank_items(items, scores) -> np.ndarray:
    """Items by descending score; ties go to the lower item index."""
    items = np.asarray(items)
    return items[np.lexsort((items, -np.asarray(scores, dtype=np.float64)))]


def hit_ratio_at_k(ranked_lists: Sequence[Sequence[int]], positives: Sequence[set], k: int) -> float:
    """Share of users with at least one held-out positive in their top ``k``.

    Users without positives count in neither numerator nor denominator.
    """
    hits = total = 0
    for ranked, pos in zip(ranked_lists, positives):
        if not pos:
            continue
        total += 1
        hits += any(item in pos for item in list(ranked)[:k])
    return hits / total if total else 0.0


def dcg_at_k(relevance_in_rank_order: Sequence[float], k: int) -> float:
    return sum((2.0 ** rel - 1.0) / math.log2(r + 1)
               for r, rel in enumerate(list(relevance_in_rank_order)[:k], start=1))


def ndcg_at_k(relevance_in_rank_order: Sequence[float], k: int) -> float | None:
    """nDCG of one ranked list; None when no item is relevant (IDCG = 0)."""
    ideal = dcg_at_k(sorted(relevance_in_rank_order, reverse=True), k)
    if ideal == 0.0:
        return None
    return dcg_at_k(relevance_in_rank_order, k) / ideal


def mean_ndcg(per_user: Sequence[float | None]) -> float:
    vals = [v for v in per_user if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def evaluate(model: Predictor, subset: TestSubset, protocol: RankingProtocol | None = None,
             n_items: int | None = None, seen: Sequence[set] | None = None) -> MetricsReport:
    """Rating metrics over every subset row; ranking metrics per user.

    Each user's list holds their subset positives plus
    ``candidates_per_positive`` items per positive, drawn without replacement
    from items outside ``seen[user]`` and outside the positives. Negatives
    have relevance 0, positives their rating.
    """
    protocol = protocol or RankingProtocol()
    if not subset.rows:
        raise ValueError("evaluate: empty test subset")
    if n_items is None:
        n_items = _infer_n_items(model)
    users = np.array([r[0] for r in subset.rows])
    items = np.array([r[1] for r in subset.rows])
    y = np.array([r[2] for r in subset.rows], dtype=np.float64)
    mae, mse = mae_mse(y, model(users, items))

    by_user: dict[int, dict[int, float]] = defaultdict(dict)
    for u, i, r in subset.rows:
        by_user[u][i] = r
    rng = np.random.default_rng(protocol.seed)
    ranked_lists, pos_sets, ndcgs = [], [], []
    for u in sorted(by_user):
        pos = by_user[u]
        excluded = set(pos)
        if seen is not None:
            excluded |= set(seen[u])
        n_cand = protocol.candidates_per_positive * len(pos)
        pool = np.setdiff1d(np.arange(n_items), np.fromiter(excluded, dtype=np.int64), assume_unique=False)
        cand = rng.choice(pool, size=min(n_cand, len(pool)), replace=False) if n_cand else pool[:0]
        cand_items = np.concatenate([np.fromiter(pos, dtype=np.int64), cand.astype(np.int64)])
        scores = model(np.full(len(cand_items), u), cand_items)
        ranked = rank_items(cand_items, scores)
        ranked_lists.append(ranked.tolist())
        pos_sets.append(set(pos))
        ndcgs.append(ndcg_at_k([pos.get(int(i), 0.0) for i in ranked], protocol.k))
    return MetricsReport(mae, mse, hit_ratio_at_k(ranked_lists, pos_sets, protocol.k),
                         mean_ndcg(ndcgs), len(subset.rows), len(by_user), subset.n_per_item,
                         protocol.k, protocol.candidates_per_positive, protocol.seed)


def _infer_n_items(model) -> int:
    if getattr(model, "beta", None) is not None:
        return len(model.beta)
    params = getattr(model, "params", None)
    if params is not None and getattr(params, "item_table", None) is not None:
        return len(params.item_table)
    raise ValueError("evaluate: n_items not given and not inferable from the model")


def write_reports(path, reports: Sequence[MetricsReport]) -> None:
    """One row per subset: ``subset_popularity,mae,mse,hr@k,ndcg@k,n_ratings,n_users``
    followed by the ranking protocol columns."""
    k = reports[0].k if reports else 10
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset_popularity", "mae", "mse", f"hr@{k}", f"ndcg@{k}", "n_ratings",
                    "n_users", "k", "candidates_per_positive", "protocol_seed"])
        for r in reports:
            w.writerow([r.subset_popularity, f"{r.mae:.6f}", f"{r.mse:.6f}", f"{r.hr_at_k:.6f}",
                        f"{r.ndcg_at_k:.6f}", r.n_ratings, r.n_users, r.k,
                        r.candidates_per_positive, r.protocol_seed])
