"""Node embeddings from biased random walks and skip-gram with negative sampling.

User vectors come from the social graph only; item vectors from the
user-item bipartite graph, of which only the item rows are kept.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nncore import AdamState, adam_step

EMB_MAGIC = b"D2EMB"


@dataclass
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    return_param_p: float = 1.0
    inout_param_q: float = 1.0
    window: int = 5
    negatives: int = 5
    sgns_epochs: int = 5
    sgns_lr: float = 0.025
    sgns_batch: int = 1024
    dim: int = 64

    def __post_init__(self):
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.dim < 1 or self.window < 1:
            raise ValueError("dim and window must be >= 1")
        if self.return_param_p <= 0 or self.inout_param_q <= 0:
            raise ValueError("p and q must be > 0")


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # [n_nodes, dim]
    untrained: list[int] = field(default_factory=list)  # rows left at their initialisation

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def save(self, path) -> None:
        v = np.ascontiguousarray(self.vectors, dtype="<f4")
        Path(path).write_bytes(EMB_MAGIC + struct.pack("<II", *v.shape) + v.tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        data = Path(path).read_bytes()
        if data[:5] != EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding table (bad magic)")
        n, dim = struct.unpack_from("<II", data, 5)
        vec = np.frombuffer(data, dtype="<f4", count=n * dim, offset=13)
        return cls(vec.reshape(n, dim).astype(np.float32))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node"] + [f"d{k}" for k in range(self.dim)])
            for k, row in enumerate(self.vectors):
                w.writerow([k] + [f"{x:.6g}" for x in row])


class _CSR:
    def __init__(self, adjacency: Sequence[Sequence[int]]):
        self.n = len(adjacency)
        self.deg = np.array([len(a) for a in adjacency], dtype=np.int64)
        self.indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.deg, out=self.indptr[1:])
        self.indices = np.fromiter((v for a in adjacency for v in a), dtype=np.int64,
                                   count=int(self.indptr[-1]))
        src = np.repeat(np.arange(self.n, dtype=np.int64), self.deg)
        self._keys = np.unique(src * self.n + self.indices)

    def sample_neighbor(self, nodes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        off = (rng.random(len(nodes)) * self.deg[nodes]).astype(np.int64)
        return self.indices[self.indptr[nodes] + off]

    def has_edge(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        key = a * self.n + b
        pos = np.searchsorted(self._keys, key)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == key


def generate_walks(adjacency: Sequence[Sequence[int]], cfg: WalkConfig, seed: int = 0,
                   start_nodes: Sequence[int] | None = None) -> np.ndarray:
    """Second-order (p, q) biased walks, ``walks_per_node`` from every start node.

    Returns an int array [n_walks, walk_length]. The biased step draws a
    uniform neighbour and accepts it with probability w / max(w), where w is
    1/p for a return step, 1 for a neighbour of the previous node and 1/q
    otherwise; this samples the normalised node2vec weights exactly.
    """
    g = _CSR(adjacency)
    starts = np.arange(g.n) if start_nodes is None else np.asarray(start_nodes, dtype=np.int64)
    if len(starts) == 0:
        return np.empty((0, cfg.walk_length), dtype=np.int64)
    if np.any(g.deg[starts] == 0):
        raise ValueError("generate_walks: start node with no neighbours")
    rng = np.random.default_rng(seed)
    inv_p, inv_q = 1.0 / cfg.return_param_p, 1.0 / cfg.inout_param_q
    w_max = max(inv_p, 1.0, inv_q)
    unbiased = inv_p == 1.0 and inv_q == 1.0

    cur = np.tile(starts, cfg.walks_per_node)
    walks = np.empty((len(cur), cfg.walk_length), dtype=np.int64)
    walks[:, 0] = cur
    walks[:, 1] = g.sample_neighbor(cur, rng)
    for t in range(2, cfg.walk_length):
        prev, cur = walks[:, t - 2], walks[:, t - 1]
        if unbiased:
            walks[:, t] = g.sample_neighbor(cur, rng)
            continue
        nxt = np.empty_like(cur)
        todo = np.arange(len(cur))
        while len(todo):
            x = g.sample_neighbor(cur[todo], rng)
            pv = prev[todo]
            w = np.where(x == pv, inv_p, np.where(g.has_edge(pv, x), 1.0, inv_q))
            ok = rng.random(len(todo)) * w_max < w
            nxt[todo[ok]] = x[ok]
            todo = todo[~ok]
        walks[:, t] = nxt
    return walks


def context_pairs(walks: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """All (center, context) pairs within ``window`` steps, both directions."""
    centers, contexts = [], []
    length = walks.shape[1]
    for off in range(1, min(window, length - 1) + 1):
        a, b = walks[:, :-off].ravel(), walks[:, off:].ravel()
        centers += [a, b]
        contexts += [b, a]
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _scatter(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Row-wise scatter-add of ``vals`` into an [n, d] zero matrix."""
    d = vals.shape[1]
    flat = (idx[:, None] * d + np.arange(d)).ravel()
    return np.bincount(flat, weights=vals.ravel(), minlength=n * d).reshape(n, d)


def sgns_objective(emb_in, emb_out, centers, contexts, noise: np.ndarray, negatives: int) -> float:
    """Mean skip-gram objective per observed pair, noise expectation taken exactly.

    log s(u_o . v_c) + k * E_{n ~ noise} log s(-u_n . v_c), averaged over pairs.
    """
    pos = _log_sigmoid(np.einsum("ij,ij->i", emb_in[centers], emb_out[contexts]))
    uniq, inv = np.unique(centers, return_inverse=True)
    neg = np.empty(len(uniq))
    for s in range(0, len(uniq), 1024):
        block = emb_in[uniq[s:s + 1024]] @ emb_out.T
        neg[s:s + 1024] = _log_sigmoid(-block) @ noise
    return float(np.mean(pos + negatives * neg[inv]))


@dataclass
class SkipGramResult:
    table: EmbeddingTable
    objective: list[float]  # at the initialisation and after each epoch; empty if not tracked


def train_skipgram(walks: np.ndarray, cfg: WalkConfig, n_nodes: int, seed: int = 0,
                   track_objective: bool | None = None) -> SkipGramResult:
    """Skip-gram with negative sampling over window co-occurrences of ``walks``.

    Noise distribution is the walk unigram^0.75. Mini-batch Adam on the mean
    batch loss, learning rate decayed linearly to 1e-4 of its start value.
    The objective is tracked by default for graphs up to 5000 nodes.
    """
    rng = np.random.default_rng(seed)
    emb_in = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, size=(n_nodes, cfg.dim))
    emb_out = np.zeros((n_nodes, cfg.dim))
    seen = np.zeros(n_nodes, dtype=bool)
    if walks.size:
        seen[np.unique(walks)] = True
    untrained = np.flatnonzero(~seen).tolist()
    centers, contexts = context_pairs(walks, cfg.window)
    if len(centers) == 0 or cfg.sgns_epochs == 0:
        return SkipGramResult(EmbeddingTable(emb_in.astype(np.float32), untrained), [])

    freq = np.bincount(walks.ravel(), minlength=n_nodes).astype(np.float64) ** 0.75
    noise = freq / freq.sum()
    noise_cdf = np.cumsum(noise)
    k = cfg.negatives
    if track_objective is None:
        track_objective = n_nodes <= 5000
    history = []
    if track_objective:
        history.append(sgns_objective(emb_in, emb_out, centers, contexts, noise, k))

    opt = AdamState.for_params([emb_in, emb_out], lr=cfg.sgns_lr)
    total, done = cfg.sgns_epochs * len(centers), 0
    for _ in range(cfg.sgns_epochs):
        order = rng.permutation(len(centers))
        for start in range(0, len(order), cfg.sgns_batch):
            sel = order[start:start + cfg.sgns_batch]
            c, o = centers[sel], contexts[sel]
            neg = np.minimum(np.searchsorted(noise_cdf, rng.random((len(sel), k))), n_nodes - 1)
            vc, uo, un = emb_in[c], emb_out[o], emb_out[neg]
            g_pos = _sigmoid(np.einsum("ij,ij->i", vc, uo)) - 1.0
            g_neg = _sigmoid((un @ vc[:, :, None])[:, :, 0])  # [b, k]
            scale = 1.0 / len(sel)
            d_vc = (g_pos[:, None] * uo + (g_neg[:, :, None] * un).sum(axis=1)) * scale
            d_uo = g_pos[:, None] * vc * scale
            d_un = g_neg[:, :, None] * vc[:, None, :] * scale
            grad_in = _scatter(c, d_vc, n_nodes)
            grad_out = _scatter(np.concatenate([o, neg.ravel()]),
                                np.concatenate([d_uo, d_un.reshape(-1, cfg.dim)]), n_nodes)
            opt.lr = cfg.sgns_lr * max(1e-4, 1.0 - done / total)
            adam_step([emb_in, emb_out], [grad_in, grad_out], opt)
            done += len(sel)
        if track_objective:
            history.append(sgns_objective(emb_in, emb_out, centers, contexts, noise, k))
    table = EmbeddingTable(emb_in.astype(np.float32), untrained)
    if not np.all(np.isfinite(table.vectors)):
        raise FloatingPointError("skip-gram produced non-finite embeddings")
    return SkipGramResult(table, history)


def user_embeddings(ds, cfg: WalkConfig, seed: int = 0) -> EmbeddingTable:
    """User vectors from the (self-looped) social graph, rows indexed by user."""
    walks = generate_walks(ds.social_adj, cfg, seed)
    return train_skipgram(walks, cfg, ds.n_users, seed + 1).table


def item_embeddings(ds, cfg: WalkConfig, seed: int = 0) -> EmbeddingTable:
    """Item vectors from the user-item graph; isolated items keep their init."""
    adj = ds.bipartite_adj
    starts = [v for v, nb in enumerate(adj) if nb]
    walks = generate_walks(adj, cfg, seed, start_nodes=starts)
    full = train_skipgram(walks, cfg, ds.n_users + ds.n_items, seed + 1).table
    vectors = full.vectors[ds.n_users:].copy()
    untrained = [v - ds.n_users for v in full.untrained if v >= ds.n_users]
    return EmbeddingTable(vectors, untrained)
