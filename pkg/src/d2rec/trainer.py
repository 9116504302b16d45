"""Mini-batch training with Adam, per-epoch negative resampling and early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataio import Dataset, ExposureTable, build_exposure_table
from .model import Batch, D2Rec, ModelConfig, Variant, init_params
from .nncore import AdamState, adam_step

log = logging.getLogger(__name__)

D_EMB_GRID = (32, 64, 128, 256)
BATCH_GRID = (64, 128, 512, 1000)
LR_GRID = (0.0001, 0.001, 0.01)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    d_emb: int = 64
    d_factor: int | None = None
    depth: int = 1
    batch_size: int = 512
    lr: float = 0.001
    kappa: float = 0.5
    max_epochs: int = 200
    patience: int = 10
    negatives_per_positive: int = 1
    resample_negatives: bool = True
    seed: int = 0
    variant: Variant = Variant.FULL
    omega_max: float = 100.0
    omega_mode: str = "predict"
    exposure_bias: bool = False
    finetune_embeddings: bool = False
    clamp_eval: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("d_emb", "batch_size", "lr", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0 or self.negatives_per_positive < 0:
            raise ValueError("max_epochs and negatives_per_positive must be >= 0")
        if self.patience > max(self.max_epochs, 1) and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_emb=self.d_emb, d_factor=self.d_factor, depth=self.depth,
                           variant=self.variant, kappa=self.kappa, omega_max=self.omega_max,
                           omega_mode=self.omega_mode, exposure_bias=self.exposure_bias,
                           finetune_embeddings=self.finetune_embeddings,
                           clamp_eval=self.clamp_eval)


@dataclass
class EpochRecord:
    epoch: int
    rating_loss: float
    exposure_loss: float
    discrepancy_loss: float
    total: float
    train_mse: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial: EpochRecord | None = None  # epoch 0: the untrained model
    best_epoch: int = 0
    stopped_early: bool = False

    def train_mse(self) -> list[float]:
        return [r.train_mse for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "rating_loss", "exposure_loss", "discrepancy_loss", "total", "train_mse"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.rating_loss), repr(r.exposure_loss),
                            repr(r.discrepancy_loss), repr(r.total), repr(r.train_mse)])


def make_batches(table: ExposureTable, batch_size: int, epoch_seed: int) -> list[Batch]:
    """Seeded shuffle, contiguous chunks; a trailing chunk of 1 row joins its predecessor."""
    n = len(table)
    if n == 0:
        raise ValueError("make_batches: empty table")
    order = np.random.default_rng(epoch_seed).permutation(n)
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    return [Batch(table.users[idx], table.items[idx], table.exposure[idx], table.ratings[idx])
            for idx in (order[a:b] for a, b in zip(bounds[:-1], bounds[1:]))]


def early_stop(train_mse: list[float], patience: int) -> bool:
    """True iff none of the last ``patience`` epochs beat the minimum seen before them."""
    if len(train_mse) <= patience:
        return False
    best_before = min(train_mse[:-patience])
    return all(m >= best_before for m in train_mse[-patience:])


def run_epochs(epoch_fn: Callable[[int], EpochRecord], snapshot_fn: Callable[[], object],
               max_epochs: int, patience: int):
    """Drive ``epoch_fn`` until ``max_epochs`` or early stopping on ``train_mse``.

    Returns (snapshot of the best-MSE epoch or None, history).
    """
    hist = TrainHistory()
    best, best_mse = None, np.inf
    for epoch in range(1, max_epochs + 1):
        rec = epoch_fn(epoch)
        hist.records.append(rec)
        if rec.train_mse < best_mse:
            best_mse, hist.best_epoch = rec.train_mse, epoch
            best = snapshot_fn()
        if early_stop(hist.train_mse(), patience):
            hist.stopped_early = True
            log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
            break
    return best, hist


def train_mse(model: D2Rec, train_ratings, chunk: int = 8192) -> float:
    u = np.array([r[0] for r in train_ratings])
    i = np.array([r[1] for r in train_ratings])
    y = np.array([r[2] for r in train_ratings])
    pred = np.concatenate([model.predict(u[s:s + chunk], i[s:s + chunk], clamp=False)
                           for s in range(0, len(u), chunk)])
    return float(np.mean((y - pred) ** 2))


def objective_pass(model: D2Rec, batches: list[Batch]) -> tuple[float, float, float, float]:
    """Mean per-batch (rating, exposure, discrepancy, total) with no parameter update."""
    reps = [model.objective(b)[0] for b in batches]
    return tuple(float(np.mean([getattr(r, k) for r in reps]))
                 for k in ("rating_loss", "exposure_loss", "discrepancy_loss", "total"))


def _epoch_table(train_ratings, n_items, cfg: TrainConfig, epoch: int) -> ExposureTable:
    seed = cfg.seed * 1_000_003 + (epoch if cfg.resample_negatives else 0)
    return build_exposure_table(train_ratings, n_items, cfg.negatives_per_positive, seed)


def build_model(ds: Dataset, theta, beta, cfg: TrainConfig, positive_rate: float) -> D2Rec:
    mcfg = cfg.model_config()
    dtype = np.dtype(cfg.dtype)
    th = None if theta is None else getattr(theta, "vectors", theta)
    be = None if beta is None else getattr(beta, "vectors", beta)
    params = init_params(mcfg, ds.n_users, ds.n_items, cfg.seed, dtype, th, be)
    if cfg.variant is Variant.NO_NETWORK_EMBEDDINGS:
        th = be = None
    return D2Rec(mcfg, params, positive_rate, th, be)


def train(ds: Dataset, theta, beta, cfg: TrainConfig, train_ratings=None):
    """Fit on ``train_ratings`` (default: ``ds.ratings``); returns (best model, history).

    With negatives_per_positive=0 the exposure loss has only positives; the
    training marginal is then nudged off 1 so the weights stay defined.
    """
    train_ratings = list(ds.ratings if train_ratings is None else train_ratings)
    table0 = _epoch_table(train_ratings, ds.n_items, cfg, 1)
    p_rate = min(table0.positive_rate, 1.0 - 1e-6)
    model = build_model(ds, theta, beta, cfg, p_rate)
    opt = AdamState.for_params(model.params.parameters(), lr=cfg.lr)

    probe = make_batches(table0, cfg.batch_size, cfg.seed)
    r0, e0, d0, t0 = objective_pass(model, probe)
    initial = EpochRecord(0, r0, e0, d0, t0, train_mse(model, train_ratings))

    def epoch_fn(epoch):
        table = table0 if epoch == 1 else _epoch_table(train_ratings, ds.n_items, cfg, epoch)
        sums = np.zeros(4)
        batches = make_batches(table, cfg.batch_size, cfg.seed * 7919 + epoch)
        for k, batch in enumerate(batches):
            model.params.zero_grad()
            rep = model.loss_and_grad(batch)
            vals = (rep.rating_loss, rep.exposure_loss, rep.discrepancy_loss, rep.total)
            if not np.all(np.isfinite(vals)):
                raise TrainingDiverged(epoch, k, f"losses {vals}")
            grads = model.params.gradients()
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch, k, "non-finite gradient")
            adam_step(model.params.parameters(), grads, opt)
            sums += vals
        sums /= len(batches)
        mse = train_mse(model, train_ratings)
        if not np.isfinite(mse):
            raise TrainingDiverged(epoch, len(batches), "train MSE")
        log.debug("epoch %d mse %.4f disc %.4f", epoch, mse, sums[2])
        return EpochRecord(epoch, *map(float, sums), mse)

    best, hist = run_epochs(epoch_fn, model.params.copy, cfg.max_epochs, cfg.patience)
    hist.initial = initial
    if best is not None:
        model.params = best
    return model, hist
