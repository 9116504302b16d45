"""Rating/trust ingestion, id mapping, splits and exposure tables."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

RATING_MIN, RATING_MAX = 1.0, 5.0


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class EmptySubsetError(ValueError):
    """No item has enough test ratings for the requested popularity."""


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float


@dataclass(frozen=True)
class SocialEdge:
    truster: str
    trustee: str


def _rows(path, header: bool):
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if header and line_no == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            yield line_no, [c.strip() for c in row]


def load_ratings(path, header: bool = False) -> list[RatingRecord]:
    out = []
    for line_no, row in _rows(path, header):
        if len(row) != 3:
            raise ParseError(path, line_no, f"expected 3 fields, got {len(row)}")
        user, item, raw = row
        if not user or not item:
            raise ParseError(path, line_no, "empty id")
        try:
            r = float(raw)
        except ValueError:
            raise ParseError(path, line_no, f"non-numeric rating {raw!r}") from None
        if not (RATING_MIN <= r <= RATING_MAX):
            raise ParseError(path, line_no, f"rating {r} outside [1, 5]")
        out.append(RatingRecord(user, item, r))
    return out


def load_social(path, header: bool = False) -> list[SocialEdge]:
    out = []
    for line_no, row in _rows(path, header):
        if len(row) != 2 or not row[0] or not row[1]:
            raise ParseError(path, line_no, "expected `truster,trustee`")
        out.append(SocialEdge(row[0], row[1]))
    return out


@dataclass
class Dataset:
    n_users: int
    n_items: int
    ratings: list[tuple[int, int, float]]
    social_adj: list[list[int]]
    bipartite_adj: list[list[int]]  # users are nodes [0, n_users), items follow
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def with_ratings(self, ratings: Sequence[tuple[int, int, float]]) -> "Dataset":
        """Same users, items and social graph; interactions restricted to ``ratings``."""
        ratings = list(ratings)
        return Dataset(self.n_users, self.n_items, ratings, self.social_adj,
                       bipartite_adjacency(self.n_users, self.n_items, ratings),
                       self.user_ids, self.item_ids)

    def rated_by_user(self) -> list[set[int]]:
        seen = [set() for _ in range(self.n_users)]
        for u, i, _ in self.ratings:
            seen[u].add(i)
        return seen


def bipartite_adjacency(n_users: int, n_items: int,
                        ratings: Iterable[tuple[int, int, float]]) -> list[list[int]]:
    adj = [[] for _ in range(n_users + n_items)]
    for u, i, _ in ratings:
        adj[u].append(n_users + i)
        adj[n_users + i].append(u)
    return adj


def build_dataset(ratings: Sequence[RatingRecord], edges: Sequence[SocialEdge],
                  users: Sequence[str] = (), items: Sequence[str] = ()) -> Dataset:
    """Map ids densely (first appearance: ``users``/``items``, ratings, then edges).

    Duplicate (user, item) ratings keep the last occurrence. Trust edges are
    stored undirected; users without any edge get a self-loop.
    """
    if not ratings and not users:
        raise ValueError("build_dataset: no ratings")
    uidx: dict[str, int] = {}
    iidx: dict[str, int] = {}
    for u in users:
        uidx.setdefault(u, len(uidx))
    for i in items:
        iidx.setdefault(i, len(iidx))
    latest: dict[tuple[int, int], float] = {}
    for rec in ratings:
        u = uidx.setdefault(rec.user_id, len(uidx))
        i = iidx.setdefault(rec.item_id, len(iidx))
        latest.pop((u, i), None)  # last occurrence also decides order
        latest[(u, i)] = rec.rating
    pairs = []
    for e in edges:
        a = uidx.setdefault(e.truster, len(uidx))
        b = uidx.setdefault(e.trustee, len(uidx))
        pairs.append((a, b))
    n_users, n_items = len(uidx), len(iidx)

    nbrs: list[dict[int, None]] = [dict() for _ in range(n_users)]
    for a, b in pairs:
        nbrs[a][b] = None
        nbrs[b][a] = None
    social = []
    for u in range(n_users):
        social.append(list(nbrs[u]) if nbrs[u] else [u])

    rlist = [(u, i, r) for (u, i), r in latest.items()]
    return Dataset(n_users, n_items, rlist, social,
                   bipartite_adjacency(n_users, n_items, rlist),
                   list(uidx), list(iidx))


def split_train_test(ds: Dataset, train_fraction: float = 0.6, seed: int = 0):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds.ratings))
    n_train = math.floor(train_fraction * len(ds.ratings))
    if n_train == 0:
        log.warning("split_train_test: %d ratings leave an empty training set", len(ds.ratings))
    train = [ds.ratings[k] for k in order[:n_train]]
    test = [ds.ratings[k] for k in order[n_train:]]
    return train, test


@dataclass
class TestSubset:
    __test__ = False  # not a pytest class
    n_per_item: int
    rows: list[tuple[int, int, float]]

    def item_counts(self) -> Counter:
        return Counter(i for _, i, _ in self.rows)


def make_popularity_subset(test_pool: Sequence[tuple[int, int, float]], n_per_item: int,
                           seed: int = 0) -> TestSubset:
    """Keep items with at least ``n_per_item`` test ratings, each exactly ``n_per_item`` times."""
    if n_per_item < 1:
        raise ValueError("n_per_item must be >= 1")
    by_item: dict[int, list[int]] = defaultdict(list)
    for k, (_, i, _) in enumerate(test_pool):
        by_item[i].append(k)
    rng = np.random.default_rng(seed)
    rows = []
    for item in sorted(by_item):
        ks = by_item[item]
        if len(ks) < n_per_item:
            continue
        pick = rng.choice(len(ks), size=n_per_item, replace=False)
        rows.extend(test_pool[ks[j]] for j in sorted(pick))
    if not rows:
        raise EmptySubsetError(f"no item has {n_per_item} or more test ratings")
    return TestSubset(n_per_item, rows)


@dataclass
class ExposureTable:
    users: np.ndarray
    items: np.ndarray
    exposure: np.ndarray  # 1 observed, 0 sampled negative
    ratings: np.ndarray  # NaN on negatives
    positive_rate: float
    short_users: dict[int, int] = field(default_factory=dict)  # user -> negatives missing

    def __len__(self):
        return len(self.users)

    def rows(self):
        for u, i, e, r in zip(self.users, self.items, self.exposure, self.ratings):
            yield int(u), int(i), int(e), (None if np.isnan(r) else float(r))


def build_exposure_table(train_ratings: Sequence[tuple[int, int, float]], n_items: int,
                         negatives_per_positive: int = 1, seed: int = 0) -> ExposureTable:
    """Positives from ``train_ratings`` plus uniformly drawn unrated items per positive."""
    if negatives_per_positive < 0:
        raise ValueError("negatives_per_positive must be >= 0")
    if not train_ratings:
        raise ValueError("build_exposure_table: no training ratings")
    rng = np.random.default_rng(seed)
    pos_u = np.array([r[0] for r in train_ratings], dtype=np.int64)
    pos_i = np.array([r[1] for r in train_ratings], dtype=np.int64)
    pos_r = np.array([r[2] for r in train_ratings], dtype=np.float64)

    rated: dict[int, set[int]] = defaultdict(set)
    count: Counter = Counter()
    for u, i in zip(pos_u.tolist(), pos_i.tolist()):
        rated[u].add(i)
        count[u] += 1

    neg_u, neg_i, short = [], [], {}
    if negatives_per_positive:
        for u in sorted(rated):
            want = count[u] * negatives_per_positive
            seen = rated[u]
            free = n_items - len(seen)
            if free <= want:
                cand = np.array(sorted(set(range(n_items)) - seen), dtype=np.int64)
                if free < want:
                    short[u] = want - free
                picks = cand
            else:
                # rejection sampling without replacement; cheap when the user is sparse
                chosen: dict[int, None] = {}
                while len(chosen) < want:
                    draw = rng.integers(0, n_items, size=2 * (want - len(chosen)) + 4)
                    for j in draw.tolist():
                        if j not in seen and j not in chosen:
                            chosen[j] = None
                            if len(chosen) == want:
                                break
                picks = np.fromiter(chosen, dtype=np.int64, count=want)
            neg_u.append(np.full(len(picks), u, dtype=np.int64))
            neg_i.append(picks)
    if short:
        log.info("exposure table: %d users lack unrated items for all negatives", len(short))
    nu = np.concatenate(neg_u) if neg_u else np.empty(0, np.int64)
    ni = np.concatenate(neg_i) if neg_i else np.empty(0, np.int64)
    users = np.concatenate([pos_u, nu])
    items = np.concatenate([pos_i, ni])
    exposure = np.concatenate([np.ones(len(pos_u), np.int8), np.zeros(len(nu), np.int8)])
    ratings = np.concatenate([pos_r, np.full(len(nu), np.nan)])
    return ExposureTable(users, items, exposure, ratings,
                         len(pos_u) / len(users), short)


# -- file artifacts ----------------------------------------------------------

def write_interactions(path, users, items, exposure, ratings) -> None:
    """``user_idx,item_idx,exposure,rating``; empty rating for negatives."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_idx", "item_idx", "exposure", "rating"])
        for u, i, e, r in zip(users, items, exposure, ratings):
            w.writerow([int(u), int(i), int(e),
                        "" if r is None or (isinstance(r, float) and math.isnan(r)) else repr(float(r))])


def write_ratings_table(path, rows: Sequence[tuple[int, int, float]]) -> None:
    write_interactions(path, [r[0] for r in rows], [r[1] for r in rows],
                       [1] * len(rows), [r[2] for r in rows])


def write_exposure_table(path, table: ExposureTable) -> None:
    write_interactions(path, table.users, table.items, table.exposure, table.ratings)


def read_ratings_table(path) -> list[tuple[int, int, float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if rec["rating"] == "":
                continue
            rows.append((int(rec["user_idx"]), int(rec["item_idx"]), float(rec["rating"])))
    return rows


def save_split(out_dir, ds: Dataset, train, test_pool, subsets: dict[int, TestSubset]) -> None:
    """Everything downstream commands need to rebuild the id-mapped dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ratings_table(out / "train.csv", train)
    write_ratings_table(out / "test_pool.csv", test_pool)
    for n, sub in subsets.items():
        write_ratings_table(out / f"test_pop{n}.csv", sub.rows)
    with open(out / "social_adj.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_idx", "neighbor_idx"])
        for u, nbrs in enumerate(ds.social_adj):
            for v in nbrs:
                w.writerow([u, v])
    meta = {"n_users": ds.n_users, "n_items": ds.n_items,
            "user_ids": ds.user_ids, "item_ids": ds.item_ids,
            "n_train": len(train), "n_test_pool": len(test_pool),
            "subsets": sorted(subsets)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_split(split_dir) -> tuple[Dataset, dict[int, TestSubset]]:
    """Rebuild the training-only dataset and the popularity subsets written by ``save_split``."""
    d = Path(split_dir)
    meta = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    n_users, n_items = meta["n_users"], meta["n_items"]
    social = [[] for _ in range(n_users)]
    with open(d / "social_adj.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            social[int(rec["user_idx"])].append(int(rec["neighbor_idx"]))
    train = read_ratings_table(d / "train.csv")
    ds = Dataset(n_users, n_items, train, social,
                 bipartite_adjacency(n_users, n_items, train),
                 meta["user_ids"], meta["item_ids"])
    subsets = {n: TestSubset(n, read_ratings_table(d / f"test_pop{n}.csv"))
               for n in meta["subsets"]}
    return ds, subsets
