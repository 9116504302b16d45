"""The disentangling recommender: six factor heads, exposure and rating paths, losses.

Shapes: B rows per batch, one (user, item) pair per row. Factor matrices
are [B, d_factor] and non-negative (ReLU outputs).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .nncore import (AffineLayer, DimensionError, affine_backward, affine_forward,
                     grad_check, load_sections, relu, relu_backward, rowdot, save_sections, sigmoid)

PROB_CLAMP = 1e-7
FACTORS = ("alpha_u", "gamma_u", "delta_u", "alpha_i", "gamma_i", "delta_i")
# (first, second) factor-name pairs entering the discrepancy loss
DISC_PAIRS = (("alpha_u", "gamma_u"), ("alpha_u", "delta_u"), ("gamma_u", "delta_u"),
              ("alpha_i", "gamma_i"), ("gamma_i", "delta_i"), ("alpha_i", "delta_i"))


class ConfigError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class Variant(str, Enum):
    FULL = "full"
    NO_NETWORK_EMBEDDINGS = "no_network_embeddings"
    NO_DISENTANGLEMENT = "no_disentanglement"


@dataclass
class ModelConfig:
    d_emb: int = 64
    d_factor: int | None = None  # defaults to d_emb
    depth: int = 1
    variant: Variant = Variant.FULL
    kappa: float = 0.5
    omega_max: float = 100.0
    omega_mode: str = "predict"  # "predict": w scales y_hat; "loss": w weights the squared error
    exposure_bias: bool = False
    finetune_embeddings: bool = False
    bandwidth: float | str = "auto"
    clamp_eval: bool = False  # clip predictions to [1, 5] at evaluation time

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.d_factor is None:
            self.d_factor = self.d_emb
        if self.omega_mode not in ("predict", "loss"):
            raise ConfigError(f"omega_mode must be 'predict' or 'loss', got {self.omega_mode!r}")
        if self.depth < 1 or self.d_emb < 1 or self.d_factor < 1:
            raise ConfigError("depth, d_emb and d_factor must be positive")
        if self.omega_max < 1:
            raise ConfigError("omega_max must be >= 1")


# -- heads -------------------------------------------------------------------

@dataclass
class Head:
    """Affine + ReLU, ``depth`` times; the last ReLU is the factor activation."""
    layers: list[AffineLayer]

    @classmethod
    def init(cls, d_in, d_out, depth, rng, dtype=np.float64):
        dims = [d_in] + [d_out] * depth
        return cls([AffineLayer.init(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])])

    def forward(self, x):
        cache = []
        for layer in self.layers:
            pre = affine_forward(layer, x)
            cache.append((x, pre))
            x = relu(pre)
        return x, cache

    def backward(self, cache, upstream):
        g = upstream
        for layer, (x, pre) in zip(reversed(self.layers), reversed(cache)):
            g = affine_backward(layer, x, relu_backward(pre, g))
        return g

    @property
    def d_in(self):
        return self.layers[0].weight.shape[0]


@dataclass
class D2RecParams:
    heads: list[Head]  # h1..h6; tied variants share objects
    variant: Variant
    user_table: np.ndarray | None = None  # trainable user vectors (no-network or fine-tune)
    item_table: np.ndarray | None = None
    exp_bias: np.ndarray | None = None  # shape (1,)
    grad_user_table: np.ndarray | None = field(default=None, repr=False)
    grad_item_table: np.ndarray | None = field(default=None, repr=False)
    grad_exp_bias: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.user_table is not None:
            self.grad_user_table = np.zeros_like(self.user_table)
        if self.item_table is not None:
            self.grad_item_table = np.zeros_like(self.item_table)
        if self.exp_bias is not None:
            self.grad_exp_bias = np.zeros_like(self.exp_bias)

    def unique_heads(self) -> list[Head]:
        seen, out = set(), []
        for h in self.heads:
            if id(h) not in seen:
                seen.add(id(h))
                out.append(h)
        return out

    def parameters(self) -> list[np.ndarray]:
        ps = [p for h in self.unique_heads() for layer in h.layers for p in layer.params()]
        for t in (self.user_table, self.item_table, self.exp_bias):
            if t is not None:
                ps.append(t)
        return ps

    def gradients(self) -> list[np.ndarray]:
        gs = [g for h in self.unique_heads() for layer in h.layers for g in layer.grads()]
        for t in (self.grad_user_table, self.grad_item_table, self.grad_exp_bias):
            if t is not None:
                gs.append(t)
        return gs

    def zero_grad(self):
        for g in self.gradients():
            g[...] = 0.0

    def copy(self) -> "D2RecParams":
        memo = {}

        def clone(h):
            if id(h) not in memo:
                memo[id(h)] = Head([AffineLayer(l.weight.copy(), l.bias.copy()) for l in h.layers])
            return memo[id(h)]

        return D2RecParams([clone(h) for h in self.heads], self.variant,
                           None if self.user_table is None else self.user_table.copy(),
                           None if self.item_table is None else self.item_table.copy(),
                           None if self.exp_bias is None else self.exp_bias.copy())


def init_params(cfg: ModelConfig, n_users: int, n_items: int, seed: int = 0,
                dtype=np.float32, theta=None, beta=None) -> D2RecParams:
    """Seeded parameters. ``theta``/``beta`` seed the tables when fine-tuning."""
    rng = np.random.default_rng(seed)
    mk = lambda: Head.init(cfg.d_emb, cfg.d_factor, cfg.depth, rng, dtype)
    if cfg.variant is Variant.NO_DISENTANGLEMENT:
        hu, hi = mk(), mk()
        heads = [hu, hu, hu, hi, hi, hi]
    else:
        heads = [mk() for _ in range(6)]
    user_table = item_table = None
    if cfg.variant is Variant.NO_NETWORK_EMBEDDINGS:
        user_table = rng.uniform(-0.01, 0.01, size=(n_users, cfg.d_emb)).astype(dtype)
        item_table = rng.uniform(-0.01, 0.01, size=(n_items, cfg.d_emb)).astype(dtype)
    elif cfg.finetune_embeddings:
        user_table = np.array(theta, dtype=dtype, copy=True)
        item_table = np.array(beta, dtype=dtype, copy=True)
    exp_bias = np.zeros(1, dtype=dtype) if cfg.exposure_bias else None
    return D2RecParams(heads, cfg.variant, user_table, item_table, exp_bias)


# -- forward pieces ------------------------------------------------------------

@dataclass
class FactorBundle:
    alpha_u: np.ndarray
    gamma_u: np.ndarray
    delta_u: np.ndarray
    alpha_i: np.ndarray
    gamma_i: np.ndarray
    delta_i: np.ndarray

    def __getitem__(self, name):
        return getattr(self, name)


@dataclass
class CombinedFactors:
    alpha_ui: np.ndarray
    gamma_ui: np.ndarray
    delta_ui: np.ndarray


def disentangle(theta_batch, beta_batch, params: D2RecParams, return_cache=False):
    """alpha/gamma/delta for users via h1..h3 on theta, for items via h4..h6 on beta."""
    if theta_batch.shape[0] != beta_batch.shape[0]:
        raise DimensionError(f"theta rows {theta_batch.shape[0]} != beta rows {beta_batch.shape[0]}")
    for k, x in ((0, theta_batch), (3, beta_batch)):
        if x.shape[1] != params.heads[k].d_in:
            raise DimensionError(
                f"embedding dim {x.shape[1]} != head input dim {params.heads[k].d_in}")
    outs, caches = [], []
    for k, h in enumerate(params.heads):
        out, cache = h.forward(theta_batch if k < 3 else beta_batch)
        outs.append(out)
        caches.append(cache)
    bundle = FactorBundle(*outs)
    return (bundle, caches) if return_cache else bundle


def combine(bundle: FactorBundle) -> CombinedFactors:
    return CombinedFactors(bundle.alpha_u * bundle.alpha_i,
                           bundle.gamma_u * bundle.gamma_i,
                           bundle.delta_u * bundle.delta_i)


def predict_exposure(cf: CombinedFactors, bias: float = 0.0) -> np.ndarray:
    return sigmoid(rowdot(cf.alpha_ui, cf.gamma_ui) + bias)


def reweight(positive_rate: float, exposure_prob, omega_max: float = 100.0) -> np.ndarray:
    """Importance weight 1 + p/(1-p) * (1-q)/q, clamped to [1, omega_max]."""
    if not 0.0 < positive_rate < 1.0:
        raise ConfigError(f"positive_rate must lie in (0, 1), got {positive_rate}")
    q = np.asarray(exposure_prob, dtype=np.float64)
    w = 1.0 + (positive_rate / (1.0 - positive_rate)) * ((1.0 - q) / q)
    return np.clip(w, 1.0, omega_max)


def predict_rating(cf: CombinedFactors, omega) -> np.ndarray:
    return omega * relu(rowdot(cf.gamma_ui, cf.delta_ui))


# -- MMD -----------------------------------------------------------------------

def _pair_sq_dists(Z):
    sq = np.einsum("ij,ij->i", Z, Z)
    scale = sq[:, None] + sq[None, :]
    d2 = scale - 2.0 * (Z @ Z.T)
    # the Gram shortcut cancels badly for near-coincident rows (a roundoff-sized
    # median bandwidth then wrecks the kernel); redo those entries from differences
    a, b = np.nonzero(d2 <= 1e-6 * scale)
    diff = Z[a] - Z[b]
    d2[a, b] = np.einsum("ij,ij->i", diff, diff)
    return d2


def _median_bandwidth(Z, d2):
    """Median distance over distinct row pairs, and the pair(s) that realise it."""
    iu, ju = np.triu_indices(len(Z), k=1)
    d = np.sqrt(d2[iu, ju])
    lo, hi = (len(d) - 1) // 2, len(d) // 2
    order = np.argpartition(d, [lo, hi] if lo != hi else lo)
    mids = [order[lo]] if lo == hi else [order[lo], order[hi]]
    sigma = float(np.mean(d[mids]))
    return sigma, [(int(iu[m]), int(ju[m])) for m in mids]


def _canonical(X, Y):
    """True when (X, Y) should be swapped so both argument orders run identical arithmetic."""
    if X.shape != Y.shape:
        return X.shape > Y.shape
    return X.tobytes() > Y.tobytes()


def _mmd2_core(X, Y, bandwidth, need_grad):
    m, n = len(X), len(Y)
    Z = np.concatenate([X, Y]).astype(np.float64, copy=False)
    d2 = _pair_sq_dists(Z)
    pairs = []
    if bandwidth == "auto":
        sigma, pairs = _median_bandwidth(Z, d2)
        if sigma == 0.0:
            sigma, pairs = 1.0, []
    else:
        sigma = float(bandwidth)
    K = np.exp(-d2 / (2.0 * sigma * sigma))
    c = np.empty_like(K)
    c[:m, :m] = 1.0 / (m * m)
    c[m:, m:] = 1.0 / (n * n)
    c[:m, m:] = -1.0 / (m * n)
    c[m:, :m] = -1.0 / (m * n)
    M = c * K
    val = float(M[:m, :m].sum() + M[m:, m:].sum() + 2.0 * M[:m, m:].sum())
    if not need_grad:
        return val, None
    # d/dz_a sum_ab c_ab K_ab = -(2/s^2) sum_b c_ab K_ab (z_a - z_b)
    g = -(2.0 / sigma ** 2) * (M.sum(axis=1)[:, None] * Z - M @ Z)
    if pairs:
        # bandwidth is itself a function of the median pair distance
        dval_dsigma = float((M * d2).sum()) / sigma ** 3
        share = dval_dsigma / len(pairs)
        for a, b in pairs:
            diff = Z[a] - Z[b]
            dist = np.sqrt(diff @ diff)
            if dist > 0:
                g[a] += share * diff / dist
                g[b] -= share * diff / dist
    return val, (g[:m], g[m:])


def mmd2(X, Y, bandwidth="auto") -> float:
    """Biased (V-statistic) squared MMD with a Gaussian RBF kernel.

    k(a, b) = exp(-|a - b|^2 / (2 s^2)); ``bandwidth="auto"`` sets s to the
    median pairwise distance over the pooled rows (1.0 if that median is 0).
    """
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if len(X) == 0 or len(Y) == 0 or X.size == 0 or Y.size == 0:
        raise ValueError("mmd2: empty sample")
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"mmd2: column mismatch {X.shape} vs {Y.shape}")
    if _canonical(X, Y):
        X, Y = Y, X
    return _mmd2_core(X, Y, bandwidth, False)[0]


def mmd2_with_grad(X, Y, bandwidth="auto"):
    """``(value, (dX, dY))``; exact, including the dependence of the auto bandwidth."""
    if _canonical(X, Y):
        val, (gy, gx) = _mmd2_core(Y, X, bandwidth, True)
    else:
        val, (gx, gy) = _mmd2_core(X, Y, bandwidth, True)
    return val, (gx, gy)


def discrepancy_terms(bundle: FactorBundle, bandwidth="auto") -> list[float]:
    if bundle.alpha_u.shape[0] < 2:
        raise DegenerateBatchError("discrepancy loss needs a batch of at least 2 rows")
    return [mmd2(bundle[a], bundle[b], bandwidth) for a, b in DISC_PAIRS]


def discrepancy_loss(bundle: FactorBundle, bandwidth="auto") -> float:
    return float(sum(discrepancy_terms(bundle, bandwidth)))


# -- losses --------------------------------------------------------------------

@dataclass
class LossReport:
    rating_loss: float
    exposure_loss: float
    discrepancy_loss: float
    total: float
    kappa: float
    n_positive: int = 0

    @property
    def no_positives(self) -> bool:
        return self.n_positive == 0


def _bce(exposure, q):
    qc = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.sum(exposure * np.log(qc) + (1.0 - exposure) * np.log(1.0 - qc)))


def losses(exposure, ratings, exposure_prob, predicted, discrepancy: float,
           kappa: float = 0.5, loss_weight=None) -> LossReport:
    """Summed squared error over exposed rows, summed BCE over all rows.

    total = rating + exposure - kappa * discrepancy (the discrepancy is maximised).
    """
    exposure = np.asarray(exposure, dtype=np.float64)
    pos = exposure == 1
    err = np.asarray(ratings, dtype=np.float64)[pos] - np.asarray(predicted, dtype=np.float64)[pos]
    sq = err * err
    if loss_weight is not None:
        sq = sq * np.asarray(loss_weight, dtype=np.float64)[pos]
    rating = float(sq.sum())
    exp_loss = _bce(exposure, np.asarray(exposure_prob, dtype=np.float64))
    total = rating + exp_loss - kappa * discrepancy
    return LossReport(rating, exp_loss, float(discrepancy), total, kappa, int(pos.sum()))


# -- the model -------------------------------------------------------------------

@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    exposure: np.ndarray
    ratings: np.ndarray  # NaN where exposure == 0

    def __len__(self):
        return len(self.users)


@dataclass
class Forward:
    bundle: FactorBundle
    combined: CombinedFactors
    exposure_score: np.ndarray
    exposure_prob: np.ndarray
    omega: np.ndarray
    rating_score: np.ndarray
    prediction: np.ndarray
    caches: list = field(repr=False, default_factory=list)
    theta: np.ndarray | None = field(repr=False, default=None)
    beta: np.ndarray | None = field(repr=False, default=None)


class D2Rec:
    """Parameters plus the frozen embeddings and training marginal needed for inference."""

    def __init__(self, cfg: ModelConfig, params: D2RecParams, positive_rate: float,
                 theta=None, beta=None):
        if not 0.0 < positive_rate < 1.0:
            raise ConfigError(f"positive_rate must lie in (0, 1), got {positive_rate}")
        self.cfg = cfg
        self.params = params
        self.positive_rate = float(positive_rate)
        dtype = params.heads[0].layers[0].weight.dtype
        self.theta = None if theta is None else np.asarray(theta, dtype=dtype)
        self.beta = None if beta is None else np.asarray(beta, dtype=dtype)
        if params.user_table is None:
            for name, t in (("theta", self.theta), ("beta", self.beta)):
                if t is None:
                    raise ConfigError(f"{name} embeddings required for variant {cfg.variant.value}")
                if t.shape[1] != cfg.d_emb:
                    raise DimensionError(f"{name} dim {t.shape[1]} != d_emb {cfg.d_emb}")

    @property
    def dtype(self):
        return self.params.heads[0].layers[0].weight.dtype

    def user_vectors(self, users):
        t = self.params.user_table if self.params.user_table is not None else self.theta
        return t[users]

    def item_vectors(self, items):
        t = self.params.item_table if self.params.item_table is not None else self.beta
        return t[items]

    def forward(self, users, items, keep_cache=False, omega=None) -> Forward:
        """``omega`` overrides the computed weights (used to hold them fixed)."""
        theta = self.user_vectors(users)
        beta = self.item_vectors(items)
        bundle, caches = disentangle(theta, beta, self.params, return_cache=True)
        cf = combine(bundle)
        bias = 0.0 if self.params.exp_bias is None else self.params.exp_bias[0]
        s_e = rowdot(cf.alpha_ui, cf.gamma_ui) + bias
        q = sigmoid(s_e)
        if omega is None:
            omega = reweight(self.positive_rate, q, self.cfg.omega_max).astype(q.dtype)
        s_r = rowdot(cf.gamma_ui, cf.delta_ui)
        r = relu(s_r)
        yhat = omega * r if self.cfg.omega_mode == "predict" else r
        return Forward(bundle, cf, s_e, q, omega, s_r, yhat,
                       caches if keep_cache else [],
                       theta if keep_cache else None, beta if keep_cache else None)

    def predict(self, users, items, clamp: bool | None = None) -> np.ndarray:
        out = self.forward(np.asarray(users), np.asarray(items)).prediction
        if self.cfg.clamp_eval if clamp is None else clamp:
            out = np.clip(out, 1.0, 5.0)
        return out

    def __call__(self, users, items):
        return self.predict(users, items)

    def objective(self, batch: Batch, omega=None) -> tuple[LossReport, Forward]:
        f = self.forward(batch.users, batch.items, omega=omega)
        disc = discrepancy_loss(f.bundle, self.cfg.bandwidth)
        lw = f.omega if self.cfg.omega_mode == "loss" else None
        return losses(batch.exposure, batch.ratings, f.exposure_prob, f.prediction, disc,
                      self.cfg.kappa, lw), f

    def loss_and_grad(self, batch: Batch, omega=None) -> LossReport:
        """Objective on ``batch``; gradients are *accumulated* into the parameters.

        The importance weights are constants in differentiation.
        """
        p = self.params
        f = self.forward(batch.users, batch.items, keep_cache=True, omega=omega)
        b, cf = f.bundle, f.combined
        dtype = f.prediction.dtype
        e = batch.exposure.astype(np.float64)
        pos = e == 1

        # rating path: yhat = w * relu(s_r)  or  loss weight w on relu(s_r)
        y = np.where(pos, batch.ratings, 0.0)
        resid = np.where(pos, f.prediction.astype(np.float64) - y, 0.0)
        # d/dr of (y - w r)^2 and of w (y - r)^2 are both 2 w resid
        g_sr = 2.0 * resid * f.omega * (f.rating_score > 0)
        lw = f.omega if self.cfg.omega_mode == "loss" else None

        # exposure path: BCE on clamp(sigmoid(s_e)); no gradient where the clamp is active
        q = f.exposure_prob.astype(np.float64)
        inside = (q > PROB_CLAMP) & (q < 1.0 - PROB_CLAMP)
        g_se = np.where(inside, q - e, 0.0)

        disc_terms = []
        g_fac = {k: np.zeros_like(b[k], dtype=np.float64) for k in FACTORS}
        for a_name, b_name in DISC_PAIRS:
            val, (ga, gb) = mmd2_with_grad(b[a_name], b[b_name], self.cfg.bandwidth)
            disc_terms.append(val)
            g_fac[a_name] -= self.cfg.kappa * ga
            g_fac[b_name] -= self.cfg.kappa * gb
        disc = float(sum(disc_terms))
        report = losses(e, batch.ratings, q, f.prediction, disc, self.cfg.kappa, lw)
        if not np.isfinite(report.total):
            return report

        g_A = g_se[:, None] * cf.gamma_ui
        g_G = g_se[:, None] * cf.alpha_ui + g_sr[:, None] * cf.delta_ui
        g_D = g_sr[:, None] * cf.gamma_ui
        g_fac["alpha_u"] += g_A * b.alpha_i
        g_fac["alpha_i"] += g_A * b.alpha_u
        g_fac["gamma_u"] += g_G * b.gamma_i
        g_fac["gamma_i"] += g_G * b.gamma_u
        g_fac["delta_u"] += g_D * b.delta_i
        g_fac["delta_i"] += g_D * b.delta_u

        d_theta = np.zeros_like(f.theta)
        d_beta = np.zeros_like(f.beta)
        for k, (name, head) in enumerate(zip(FACTORS, p.heads)):
            gx = head.backward(f.caches[k], g_fac[name].astype(dtype, copy=False))
            if k < 3:
                d_theta += gx
            else:
                d_beta += gx
        if p.grad_user_table is not None:
            np.add.at(p.grad_user_table, batch.users, d_theta)
            np.add.at(p.grad_item_table, batch.items, d_beta)
        if p.grad_exp_bias is not None:
            p.grad_exp_bias += g_se.sum()
        return report

    def gradient_check(self, batch: Batch, h: float = 1e-5, tolerance: float = 1e-4):
        """Finite-difference check of ``loss_and_grad`` over every trainable parameter.

        Run on a float64 model. The weights are frozen at their value for the
        unperturbed parameters, matching how they enter the analytic gradient.
        """
        omega = self.forward(batch.users, batch.items).omega.copy()

        def closure():
            self.params.zero_grad()
            rep = self.loss_and_grad(batch, omega=omega)
            return rep.total, [g.copy() for g in self.params.gradients()]

        return grad_check(closure, self.params.parameters(), h, tolerance)

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        """Binary parameter container plus a JSON sidecar (``<path>.json``)."""
        sections = {}
        for k, head in enumerate(self.params.heads, start=1):
            for j, layer in enumerate(head.layers):
                name = f"h{k}" if len(head.layers) == 1 else f"h{k}.{j}"
                sections[name] = (layer.weight, layer.bias)
        if self.params.user_table is not None:
            sections["user_table"] = (self.params.user_table, None)
            sections["item_table"] = (self.params.item_table, None)
        if self.params.exp_bias is not None:
            sections["exp_bias"] = (self.params.exp_bias.reshape(1, 1), None)
        save_sections(path, sections)
        meta = asdict(self.cfg)
        meta["variant"] = self.cfg.variant.value
        meta["positive_rate"] = self.positive_rate
        meta["dtype"] = np.dtype(self.dtype).name
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                             encoding="utf-8")

    @classmethod
    def load(cls, path, theta=None, beta=None) -> "D2Rec":
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        positive_rate = meta.pop("positive_rate")
        meta.pop("dtype", None)
        cfg = ModelConfig(**meta)
        sec = load_sections(path)

        def head(k):
            if f"h{k}" in sec:
                w, bias = sec[f"h{k}"]
                return Head([AffineLayer(w.copy(), bias.copy())])
            return Head([AffineLayer(sec[f"h{k}.{j}"][0].copy(), sec[f"h{k}.{j}"][1].copy())
                         for j in range(cfg.depth)])

        if cfg.variant is Variant.NO_DISENTANGLEMENT:
            hu, hi = head(1), head(4)
            heads = [hu, hu, hu, hi, hi, hi]
        else:
            heads = [head(k) for k in range(1, 7)]
        ut = sec["user_table"][0].copy() if "user_table" in sec else None
        it = sec["item_table"][0].copy() if "item_table" in sec else None
        eb = sec["exp_bias"][0].reshape(1).copy() if "exp_bias" in sec else None
        params = D2RecParams(heads, cfg.variant, ut, it, eb)
        return cls(cfg, params, positive_rate, theta, beta)


def toy_gradient_check(n_users: int = 6, n_items: int = 6, d_emb: int = 8, d_factor: int = 4,
                       batch: int = 6, variant: Variant = Variant.FULL, seed: int = 0,
                       h: float = 1e-5, tolerance: float = 1e-4, **cfg_kw):
    """Finite-difference check of the full objective on a random float64 instance.

    Users and items in the batch are distinct where the sizes allow, and every
    other row is a sampled negative.
    """
    cfg = ModelConfig(d_emb=d_emb, d_factor=d_factor, variant=variant, **cfg_kw)
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n_users, d_emb))
    beta = rng.standard_normal((n_items, d_emb))
    params = init_params(cfg, n_users, n_items, seed, np.float64, theta, beta)
    if cfg.variant is Variant.NO_NETWORK_EMBEDDINGS:
        # the +-0.01 initial tables put many pair distances within h of each other
        params.user_table[...] = rng.standard_normal(params.user_table.shape)
        params.item_table[...] = rng.standard_normal(params.item_table.shape)
    users = rng.permutation(max(n_users, batch))[:batch] % n_users
    items = rng.permutation(max(n_items, batch))[:batch] % n_items
    exposure = (np.arange(batch) % 2 == 0).astype(np.int8)
    ratings = np.where(exposure == 1, rng.integers(1, 6, batch).astype(np.float64), np.nan)
    model = D2Rec(cfg, params, 0.5, theta, beta)
    return model.gradient_check(Batch(users, items, exposure, ratings), h, tolerance)
