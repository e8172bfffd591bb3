"""Per-epoch sample weights: base strategies, entity reputation and fusion.

All strategies take raw nonnegative losses and give lower losses higher
weights; negation happens inside each strategy.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

STRATEGIES = ("ecdf", "uniform", "gmm", "topk", "linear")


@dataclass
class LossRecordSet:
    users: np.ndarray
    items: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if not (self.users.shape == self.items.shape == self.losses.shape):
            raise ValueError("record arrays must have equal length")

    def __len__(self) -> int:
        return len(self.losses)

    @classmethod
    def empty(cls) -> LossRecordSet:
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))

    @classmethod
    def concat(cls, parts) -> LossRecordSet:
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.losses for p in parts]),
        )


@dataclass
class EntityLossStats:
    user_loss_sum: np.ndarray
    user_count: np.ndarray
    item_loss_sum: np.ndarray
    item_count: np.ndarray

    @classmethod
    def zeros(cls, num_users: int, num_items: int) -> EntityLossStats:
        return cls(
            np.zeros(num_users),
            np.zeros(num_users, dtype=np.int64),
            np.zeros(num_items),
            np.zeros(num_items, dtype=np.int64),
        )


@dataclass
class ReputationVector:
    scores: np.ndarray
    alpha: float
    beta: float


@dataclass
class WeightStrategyConfig:
    strategy: str = "ecdf"
    remember_rate: float = 0.7
    gmm_components: int = 2
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown weighting strategy {self.strategy!r}")
        if not 0.0 < self.remember_rate <= 1.0:
            raise ValueError("remember_rate must lie in (0, 1]")
        if self.gmm_components != 2:
            raise ValueError("only a 2-component mixture is supported")


@dataclass(frozen=True)
class Components:
    """Which weight factors are active: base weight, item and user reputation."""

    bw: bool = True
    item: bool = True
    user: bool = True

    def __post_init__(self):
        if (self.item or self.user) and not self.bw:
            raise ValueError("entity factors (IF/UF) require the base weight (BW)")

    @classmethod
    def parse(cls, text: str) -> Components:
        toks = {t.strip().lower() for t in text.split(",") if t.strip()}
        unknown = toks - {"bw", "if", "uf"}
        if unknown:
            raise ValueError(f"unknown components: {sorted(unknown)}")
        return cls("bw" in toks, "if" in toks, "uf" in toks)

    def label(self) -> str:
        return ",".join(n for n, on in (("bw", self.bw), ("if", self.item), ("uf", self.user)) if on)


class WeightTable:
    """Sparse (user, item) -> weight lookup; pairs not in the table weigh 1."""

    def __init__(self, num_items: int, keys=None, weights=None):
        self.num_items = num_items
        self.keys = np.empty(0, np.int64) if keys is None else np.asarray(keys, dtype=np.int64)
        self.weights = np.empty(0) if weights is None else np.asarray(weights, dtype=np.float64)

    @classmethod
    def ones(cls, num_items: int) -> WeightTable:
        return cls(num_items)

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        out = np.ones(q.shape)
        if len(self.keys):
            pos = np.searchsorted(self.keys, q)
            pos_c = np.minimum(pos, len(self.keys) - 1)
            hit = self.keys[pos_c] == q
            out[hit] = self.weights[pos_c[hit]]
        return out

    def entries(self):
        return self.keys // self.num_items, self.keys % self.num_items, self.weights

    def to_text(self) -> str:
        u, i, w = self.entries()
        return "".join(f"{a}\t{b}\t{c:.17g}\n" for a, b, c in zip(u.tolist(), i.tolist(), w.tolist()))


def accumulate(stats: EntityLossStats, records: LossRecordSet) -> EntityLossStats:
    if len(records) == 0:
        return stats
    if np.any(records.losses < 0):
        raise ValueError("losses must be nonnegative")
    m, n = len(stats.user_count), len(stats.item_count)
    if records.users.max() >= m or records.items.max() >= n or records.users.min() < 0 or records.items.min() < 0:
        raise IndexError("record index out of range")
    stats.user_loss_sum += np.bincount(records.users, weights=records.losses, minlength=m)
    stats.user_count += np.bincount(records.users, minlength=m)
    stats.item_loss_sum += np.bincount(records.items, weights=records.losses, minlength=n)
    stats.item_count += np.bincount(records.items, minlength=n)
    return stats


def mean_entity_loss(stats: EntityLossStats):
    """Average loss per user and per item; NaN marks entities with no samples."""

    def avg(s, c):
        out = np.full(len(c), np.nan)
        seen = c > 0
        out[seen] = s[seen] / c[seen]
        return out

    return avg(stats.user_loss_sum, stats.user_count), avg(stats.item_loss_sum, stats.item_count)


def rank_map(avg_losses, alpha: float, beta: float) -> ReputationVector:
    """Map average losses linearly by rank onto [alpha, beta], lowest loss -> beta.

    NaN entries (absent entities) and the single-entity case get the midpoint.
    Tied losses are ordered by entity index.
    """
    if alpha > beta:
        raise ValueError(f"alpha ({alpha}) must not exceed beta ({beta})")
    avg = np.asarray(avg_losses, dtype=np.float64)
    scores = np.full(len(avg), (alpha + beta) / 2.0)
    present = np.flatnonzero(~np.isnan(avg))
    k = len(present)
    if k >= 2:
        order = present[np.argsort(avg[present], kind="stable")]
        t = (k - np.arange(1, k + 1)) / (k - 1)
        # convex combination hits both endpoints exactly; clip absorbs the last ulp
        scores[order] = np.clip(alpha * (1.0 - t) + beta * t, alpha, beta)
    if alpha == beta:
        scores[:] = alpha
    return ReputationVector(scores, alpha, beta)


def ecdf_base_weights(records) -> np.ndarray:
    """Hazen-position ECDF of negated losses; ties share the right-side rank."""
    losses = _losses(records)
    n = len(losses)
    if n == 0:
        return np.ones(0)
    neg = -losses
    r = np.searchsorted(np.sort(neg), neg, side="right")
    return (r - 0.5) / n


def uniform_base_weights(records) -> np.ndarray:
    return np.ones(len(_losses(records)))


def topk_base_weights(records, remember_rate: float = 0.7) -> np.ndarray:
    """Zero the floor((1 - rho) * n) largest losses, keep the rest at 1."""
    if not 0.0 < remember_rate <= 1.0:
        raise ValueError("remember_rate must lie in (0, 1]")
    losses = _losses(records)
    n = len(losses)
    # guard against (1 - rho) * n landing a hair below an integer
    discard = math.floor((1.0 - remember_rate) * n + 1e-9)
    w = np.ones(n)
    if discard == 0:
        return w
    order = np.argsort(losses, kind="stable")
    w[order[n - discard :]] = 0.0
    return w


def linear_base_weights(records) -> np.ndarray:
    losses = _losses(records)
    n = len(losses)
    if n <= 1:
        return np.ones(n)
    neg = -losses
    lo, hi = neg.min(), neg.max()
    if lo == hi:
        return np.ones(n)
    return (neg - lo) / (hi - lo)


@dataclass
class GMMFit:
    means: np.ndarray
    variances: np.ndarray
    mix: np.ndarray
    n_iter: int
    converged: bool
    log_likelihood: float = field(default=float("nan"))


VAR_FLOOR = 1e-6


def fit_gmm_1d(x, max_iters=100, tol=1e-6) -> tuple[GMMFit, np.ndarray]:
    """Two-component 1-D EM; returns the fit and the (n, 2) responsibilities."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.percentile(x, [25.0, 75.0])
    var = np.full(2, max(np.var(x), VAR_FLOOR))
    mix = np.array([0.5, 0.5])
    prev = -np.inf
    converged = False
    it = 0
    resp = np.full((len(x), 2), 0.5)
    for it in range(1, max_iters + 1):
        # E step in log space
        logp = (
            -0.5 * np.log(2 * np.pi * var)[None, :]
            - 0.5 * (x[:, None] - mu[None, :]) ** 2 / var[None, :]
            + np.log(np.maximum(mix, 1e-300))[None, :]
        )
        mx = logp.max(axis=1, keepdims=True)
        norm = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        resp = np.exp(logp - norm[:, None])
        ll = float(norm.sum())
        # M step
        nk = resp.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-300)
        mix = nk / len(x)
        mu = (resp * x[:, None]).sum(axis=0) / nk_safe
        var = np.maximum((resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk_safe, VAR_FLOOR)
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            converged = True
            break
        prev = ll
    return GMMFit(mu, var, mix, it, converged, ll), resp


def gmm_base_weights(records, max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Posterior of the component with the larger mean of negated losses."""
    losses = _losses(records)
    if len(losses) <= 1:
        return np.ones(len(losses))
    fit, resp = fit_gmm_1d(-losses, max_iters, tol)
    if not fit.converged:
        warnings.warn(f"GMM EM did not converge in {max_iters} iterations", RuntimeWarning, stacklevel=2)
    clean = int(np.argmax(fit.means))
    return resp[:, clean]


def base_weights(records, config: WeightStrategyConfig) -> np.ndarray:
    s = config.strategy
    if s == "ecdf":
        return ecdf_base_weights(records)
    if s == "uniform":
        return uniform_base_weights(records)
    if s == "topk":
        return topk_base_weights(records, config.remember_rate)
    if s == "linear":
        return linear_base_weights(records)
    return gmm_base_weights(records, config.gmm_max_iters, config.gmm_tol)


def fuse(
    base,
    user_rep: ReputationVector | np.ndarray | None,
    item_rep: ReputationVector | np.ndarray | None,
    records: LossRecordSet,
    num_items: int,
    components: Components = Components(),
) -> WeightTable:
    """weight(u, i) = base * w_u[u] * w_i[i]; disabled factors become 1.

    Repeated (u, i) records collapse to one entry, last record wins.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.shape != records.losses.shape:
        raise ValueError("base weights must align with records")
    w = base.copy() if components.bw else np.ones_like(base)
    if components.user:
        w = w * _rep_at(user_rep, records.users, "user")
    if components.item:
        w = w * _rep_at(item_rep, records.items, "item")
    keys = records.users * num_items + records.items
    # last occurrence of each key
    rev_keys = keys[::-1]
    uniq, first_in_rev = np.unique(rev_keys, return_index=True)
    last = len(keys) - 1 - first_in_rev
    return WeightTable(num_items, uniq, w[last])


def _rep_at(rep, idx, what):
    if rep is None:
        raise ValueError(f"{what} reputation vector required when the {what} factor is enabled")
    scores = rep.scores if isinstance(rep, ReputationVector) else np.asarray(rep, dtype=np.float64)
    if len(idx) and idx.max() >= len(scores):
        raise IndexError(f"{what} reputation vector is missing an entry")
    return scores[idx]


def epoch_weights(
    records: LossRecordSet,
    num_users: int,
    num_items: int,
    alpha: float,
    beta: float,
    config: WeightStrategyConfig,
    components: Components,
) -> WeightTable:
    """The end-of-epoch update: entity averages, reputations, base weights, fusion."""
    if alpha > beta:
        raise ValueError("alpha must not exceed beta")
    user_rep = item_rep = None
    if components.user or components.item:
        stats = accumulate(EntityLossStats.zeros(num_users, num_items), records)
        user_avg, item_avg = mean_entity_loss(stats)
        user_rep = rank_map(user_avg, alpha, beta) if components.user else None
        item_rep = rank_map(item_avg, alpha, beta) if components.item else None
    base = base_weights(records, config) if components.bw else np.ones(len(records))
    return fuse(base, user_rep, item_rep, records, num_items, components)


def _losses(records) -> np.ndarray:
    if isinstance(records, LossRecordSet):
        return records.losses
    return np.asarray(records, dtype=np.float64)
