"""Synthetic social-recommendation data with a known popularity x conformity confounder.

The same term c_u * s_i raises both the chance that user u is exposed to
item i and the rating u gives it, so naive fits on observed ratings pick
up popularity effects that do not transfer to a uniformly exposed test set.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, RatingRecord, SocialEdge, TestSubset, build_dataset

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    n_users: int = 500
    n_items: int = 800
    latent_dim: int = 2
    confound_strength: float = 3.0
    exposure_scale: float = 0.5
    exposure_offset: float = 4.0
    social_knn: int = 10
    rating_noise_sd: float = 0.5
    popularity_shape: float = 2.0  # Pareto tail index
    confound_in_rating: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.latent_dim, self.social_knn) < 1:
            raise ValueError("n_users, n_items, latent_dim and social_knn must be >= 1")
        if self.confound_strength < 0 or self.rating_noise_sd < 0:
            raise ValueError("confound_strength and rating_noise_sd must be >= 0")
        if self.popularity_shape <= 0:
            raise ValueError("popularity_shape must be > 0")


@dataclass
class SynthOracle:
    user_preference: np.ndarray  # [n_users, latent_dim]
    item_attribute: np.ndarray  # [n_items, latent_dim]
    user_conformity: np.ndarray  # [n_users] in (0, 1)
    item_popularity: np.ndarray  # [n_items] in (0, 1]
    confound_strength: float
    rating_confound: float  # weight of c_u * s_i in the rating (0 if exposure-only)
    rating_noise_sd: float
    exposure_scale: float
    exposure_offset: float
    offset_adjustments: list[float] = field(default_factory=list)

    def affinity(self, users, items):
        return np.einsum("ij,ij->i", self.user_preference[users], self.item_attribute[items])

    def expected_rating(self, users, items) -> np.ndarray:
        """Noise-free rating before rounding and clamping."""
        users, items = np.asarray(users), np.asarray(items)
        return (3.0 + self.affinity(users, items)
                + self.rating_confound * self.user_conformity[users] * self.item_popularity[items])

    def sample_rating(self, users, items, rng: np.random.Generator) -> np.ndarray:
        raw = self.expected_rating(users, items) + rng.normal(0.0, self.rating_noise_sd, len(users))
        return np.clip(np.rint(raw), 1.0, 5.0)

    def exposure_logit(self):
        pq = self.user_preference @ self.item_attribute.T
        cs = self.user_conformity[:, None] * self.item_popularity[None, :]
        return self.exposure_scale * pq + self.confound_strength * cs - self.exposure_offset

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthOracle":
        arrays = ("user_preference", "item_attribute", "user_conformity", "item_popularity")
        return cls(**{k: (np.asarray(v, dtype=np.float64) if k in arrays else v)
                      for k, v in d.items()})


def _mutual_knn(features: np.ndarray, k: int) -> list[tuple[int, int]]:
    n = len(features)
    if n < 2:
        return []
    k = min(k, n - 1)
    sq = np.einsum("ij,ij->i", features, features)
    d2 = sq[:, None] + sq[None, :] - 2.0 * features @ features.T
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    member = np.zeros((n, n), dtype=bool)
    member[np.repeat(np.arange(n), k), nn.ravel()] = True
    mutual = member & member.T
    a, b = np.nonzero(np.triu(mutual, 1))
    return list(zip(a.tolist(), b.tolist()))


def generate(cfg: SynthConfig) -> tuple[Dataset, SynthOracle]:
    """Sample latents, exposures, observed ratings and a homophilous trust graph.

    Internal user/item indices equal the generator's indices (ids ``u<k>``,
    ``i<k>``). If some user ends up with no exposure the offset is lowered
    by 0.5 and exposures are redrawn; each adjustment is recorded.
    """
    rng = np.random.default_rng(cfg.seed)
    p = rng.standard_normal((cfg.n_users, cfg.latent_dim))
    q = rng.standard_normal((cfg.n_items, cfg.latent_dim))
    c = rng.uniform(0.0, 1.0, cfg.n_users)
    raw = rng.pareto(cfg.popularity_shape, cfg.n_items) + 1.0
    s = raw / raw.max()
    oracle = SynthOracle(p, q, c, s, cfg.confound_strength,
                         cfg.confound_strength if cfg.confound_in_rating else 0.0,
                         cfg.rating_noise_sd, cfg.exposure_scale, cfg.exposure_offset)

    while True:
        prob = 1.0 / (1.0 + np.exp(-oracle.exposure_logit()))
        exposed = rng.random(prob.shape) < prob
        if exposed.any(axis=1).all():
            break
        oracle.exposure_offset -= 0.5
        oracle.offset_adjustments.append(oracle.exposure_offset)
        log.warning("synth: user without exposures, offset lowered to %.2f", oracle.exposure_offset)

    users, items = np.nonzero(exposed)
    ratings = oracle.sample_rating(users, items, rng)
    records = [RatingRecord(f"u{u}", f"i{i}", float(r))
               for u, i, r in zip(users.tolist(), items.tolist(), ratings.tolist())]
    order = rng.permutation(len(records))
    records = [records[k] for k in order]
    edges = [SocialEdge(f"u{a}", f"u{b}")
             for a, b in _mutual_knn(np.column_stack([p, c]), cfg.social_knn)]
    ds = build_dataset(records, edges,
                       users=[f"u{k}" for k in range(cfg.n_users)],
                       items=[f"i{k}" for k in range(cfg.n_items)])
    return ds, oracle


def unbiased_testset(oracle: SynthOracle, n_per_item: int, seed: int = 0,
                     exclude: Dataset | None = None) -> TestSubset:
    """Every item rated by ``n_per_item`` uniformly drawn users, ratings from the oracle.

    Users in ``exclude`` who already rated the item are skipped when enough
    other users remain.
    """
    if n_per_item < 1:
        raise ValueError("n_per_item must be >= 1")
    rng = np.random.default_rng(seed)
    n_users, n_items = len(oracle.user_conformity), len(oracle.item_popularity)
    rated = [set() for _ in range(n_items)]
    if exclude is not None:
        for u, i, _ in exclude.ratings:
            rated[i].add(u)
    us, its = [], []
    for i in range(n_items):
        pool = np.setdiff1d(np.arange(n_users), list(rated[i]), assume_unique=True) \
            if rated[i] else np.arange(n_users)
        if len(pool) < n_per_item:
            pool = np.arange(n_users)
        pick = rng.choice(pool, size=n_per_item, replace=n_per_item > len(pool))
        us.append(pick)
        its.append(np.full(n_per_item, i))
    u, i = np.concatenate(us), np.concatenate(its)
    y = oracle.sample_rating(u, i, rng)
    return TestSubset(n_per_item, list(zip(u.tolist(), i.tolist(), y.tolist())))


def write_synth(out_dir, ds: Dataset, oracle: SynthOracle, cfg: SynthConfig) -> None:
    """``ratings.csv``, ``social.csv`` (the CSV formats ``dataio`` reads) and ``oracle.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ratings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for u, i, r in ds.ratings:
            w.writerow([ds.user_ids[u], ds.item_ids[i], f"{r:g}"])
    with open(out / "social.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for u, nbrs in enumerate(ds.social_adj):
            for v in nbrs:
                if u < v:
                    w.writerow([ds.user_ids[u], ds.user_ids[v]])
    payload = {"config": asdict(cfg), "oracle": oracle.to_json()}
    (out / "oracle.json").write_text(json.dumps(payload) + "\n", encoding="utf-8")
