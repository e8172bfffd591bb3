"""Epoch loop with end-of-epoch weight refresh, validation and early stopping."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from crossdenoise import metrics
from crossdenoise.ingest import DataSplit, sample_negatives
from crossdenoise.models import build_model, weighted_batch_loss
from crossdenoise.nn import AdamState, NumericError, adam_step
from crossdenoise.seeding import Purpose, rng_for
from crossdenoise.weighting import (
    Components,
    LossRecordSet,
    WeightStrategyConfig,
    WeightTable,
    epoch_weights,
)

log = logging.getLogger(__name__)

EPOCH_CSV_FIELDS = ("epoch", "loss", "recall50", "ndcg50", "tp_loss", "fp_loss", "tp_weight", "fp_weight", "seconds")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 2.0
    lr: float = 1e-3
    batch_size: int = 2048
    negative_ratio: int = 1
    embedding_dim: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    model: str = "gmf"
    weighting: WeightStrategyConfig = field(default_factory=WeightStrategyConfig)
    components: Components = field(default_factory=Components)
    weight_decay: float = 0.0
    corruption_rate: float = 0.5
    select_metric: str = "recall"
    select_k: int = 50
    eval_ks: tuple = (50, 100)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= self.beta:
            raise ValueError(f"need 0 <= alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0 or self.negative_ratio < 1:
            raise ValueError("batch_size, patience and negative_ratio must be >= 1")
        if isinstance(self.weighting, dict):
            self.weighting = WeightStrategyConfig(**self.weighting)
        if isinstance(self.components, dict):
            self.components = Components(**self.components)
        elif isinstance(self.components, str):
            self.components = Components.parse(self.components)
        self.eval_ks = tuple(self.eval_ks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    recall50: float
    ndcg50: float
    tp_loss: float | None
    fp_loss: float | None
    tp_weight: float | None
    fp_weight: float | None
    seconds: float
    selection: float = float("nan")


@dataclass
class TrainResult:
    model: object
    reports: list
    best_epoch: int
    best_score: float
    stopped_early: bool = False


def epochs_to_csv(reports, timing: bool = False) -> str:
    """Epoch rows; `seconds` stays blank unless `timing` so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_CSV_FIELDS)
    for r in reports:
        row = [r.epoch, r.loss, r.recall50, r.ndcg50, r.tp_loss, r.fp_loss, r.tp_weight, r.fp_weight]
        row = [("" if v is None else (repr(v) if isinstance(v, float) else v)) for v in row]
        row.append(f"{r.seconds:.6f}" if timing else "")
        w.writerow(row)
    return buf.getvalue()


def validate(model, split: DataSplit, ks=(50,), target=None) -> metrics.MetricsReport:
    """Full-catalog metrics on the (true-positive) validation set, train items excluded."""
    target = split.valid if target is None else target
    return metrics.evaluate_model(model, target, [split.train], ks)


def evaluate_test(model, split: DataSplit, ks=(50, 100)) -> metrics.MetricsReport:
    exclude = [split.train]
    if split.valid_unfiltered is not None:
        exclude.append(split.valid_unfiltered)
    return metrics.evaluate_model(model, split.test, exclude, ks)


def _weighted_epochs(split, config, weighted=True):
    """Shared epoch iterator. Yields (epoch, model, records, flags, pos_mask, table, mean_loss)."""
    train = split.train
    m, n = train.num_users, train.num_items
    model = build_model(
        config.model,
        m,
        n,
        config.embedding_dim,
        rng=rng_for(config.seed, Purpose.INIT),
        train=train,
        **({"corruption_rate": config.corruption_rate} if config.model == "cdae" else {}),
    )
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    table = WeightTable.ones(n)
    n_pos = len(train)
    for epoch in range(1, config.max_epochs + 1):
        neg = sample_negatives(train, config.negative_ratio, config.seed, epoch)
        users = np.concatenate([train.users, neg.users])
        items = np.concatenate([train.items, neg.items])
        labels = np.concatenate([np.ones(n_pos), np.zeros(len(neg))])
        flags = np.concatenate([train.noisy, np.zeros(len(neg), bool)])
        perm = rng_for(config.seed, Purpose.SHUFFLE, epoch).permutation(len(users))
        users, items, labels, flags = users[perm], items[perm], labels[perm], flags[perm]
        corrupt = rng_for(config.seed, Purpose.CORRUPTION, epoch) if config.model == "cdae" else None

        losses = np.empty(len(users))
        total = 0.0
        for s in range(0, len(users), config.batch_size):
            sl = slice(s, s + config.batch_size)
            w = table.lookup(users[sl], items[sl]) if weighted else np.ones(len(users[sl]))
            loss, per_sample, grads = weighted_batch_loss(model, users[sl], items[sl], labels[sl], w, corrupt)
            adam_step(model.params, grads, state)
            losses[sl] = per_sample
            total += loss * len(per_sample)
        mean_loss = total / max(len(users), 1)
        if not math.isfinite(mean_loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        records = LossRecordSet(users, items, losses)
        yield epoch, model, records, flags, labels == 1, table, mean_loss
        if weighted:
            # barrier: next epoch's table is built only from this epoch's records
            table = epoch_weights(records, m, n, config.alpha, config.beta, config.weighting, config.components)


def train(split: DataSplit, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train `config.model` on `split.train` under per-epoch sample weights.

    Epoch 1 uses weight 1 everywhere. After every epoch the per-sample losses
    are turned into the next epoch's weight table. Validation selects the
    best epoch; training stops after `patience` epochs without improvement.
    """
    reports = []
    best_score, best_epoch, best_params = -math.inf, 0, None
    since = 0
    stopped = False
    model = None
    t0 = time.perf_counter()
    for epoch, model, records, flags, pos, table, mean_loss in _weighted_epochs(split, config):
        diag = metrics.tp_fp_diagnostics(records, table, flags, pos)
        ks = sorted({50, config.select_k})
        val = validate(model, split, ks)
        sel = val.mean(config.select_metric, config.select_k)
        now = time.perf_counter()
        rep = EpochReport(
            epoch,
            mean_loss,
            val.mean("recall", 50),
            val.mean("ndcg", 50),
            diag.tp_loss,
            diag.fp_loss,
            diag.tp_weight,
            diag.fp_weight,
            now - t0,
            sel,
        )
        t0 = now
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep)
        log.debug("epoch %d loss %.5f val %.5f", epoch, mean_loss, sel)
        score = -math.inf if math.isnan(sel) else sel
        if best_params is None or score > best_score:
            best_score, best_epoch, best_params = score, epoch, model.copy_params()
            since = 0
        else:
            since += 1
            if since >= config.patience:
                stopped = True
                break
    if model is None:
        model = build_model(
            config.model,
            split.train.num_users,
            split.train.num_items,
            config.embedding_dim,
            rng=rng_for(config.seed, Purpose.INIT),
            train=split.train,
        )
    else:
        model = copy.copy(model)
        model.params = best_params
    return TrainResult(model, reports, best_epoch, best_score, stopped)


def param_trajectory(split: DataSplit, config: TrainConfig, weighted=True):
    """Parameter snapshots after each epoch (no validation); for equivalence checks."""
    return [model.copy_params() for _, model, *_ in _weighted_epochs(split, config, weighted)]


ABLATION_ROWS = (
    Components(False, False, False),
    Components(True, False, False),
    Components(True, True, False),
    Components(True, False, True),
    Components(True, True, True),
)


@dataclass
class AblationRow:
    components: Components
    per_seed: list  # MetricsReport per seed

    def mean(self, metric, k) -> float:
        return float(np.mean([r.mean(metric, k) for r in self.per_seed]))


def ablate(split: DataSplit, config: TrainConfig, grid=ABLATION_ROWS, seeds=(0,), ks=(50, 100)) -> list:
    """One training run per (toggle row, seed); seeds shared across rows."""
    rows = []
    for comp in grid:
        per_seed = []
        for seed in seeds:
            res = train(split, config.with_(components=comp, seed=seed))
            per_seed.append(evaluate_test(res.model, split, ks))
        rows.append(AblationRow(comp, per_seed))
    return rows


def ablation_to_csv(rows, ks=(50, 100)) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bw", "if", "uf"] + [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")])
    for row in rows:
        c = row.components
        w.writerow([int(c.bw), int(c.item), int(c.user)] + [repr(row.mean(m, k)) for k in ks for m in ("recall", "ndcg")])
    return buf.getvalue()
