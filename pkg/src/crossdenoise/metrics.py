"""Full-catalog Recall@K / NDCG@K and true/false-positive diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (50, 100)


def recall_at_k(ranked, relevant, k: int) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for it in list(ranked)[:k] if int(it) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(p + 2) for p, it in enumerate(list(ranked)[:k]) if int(it) in relevant)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(relevant), k)))
    return dcg / idcg


def top_k(scores: np.ndarray, k: int, exclude: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-row top-k item indices, score-descending, ties by ascending item index.

    `exclude` is a boolean mask of the same shape; excluded items never appear,
    so rows with fewer than k candidates return shorter lists.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[1]
    out = []
    for row in range(scores.shape[0]):
        s = scores[row]
        cand = np.arange(n) if exclude is None else np.flatnonzero(~exclude[row])
        sc = s[cand]
        kk = min(k, len(cand))
        if kk == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        if kk < len(cand):
            # kth largest value; everything strictly above is in, ties at the
            # boundary are filled by lowest item index
            thr = np.partition(sc, len(sc) - kk)[len(sc) - kk]
            above = np.flatnonzero(sc > thr)
            at = np.flatnonzero(sc == thr)[: kk - len(above)]
            sel = np.concatenate([above, at])
        else:
            sel = np.arange(len(cand))
        sel = sel[np.lexsort((cand[sel], -sc[sel]))]
        out.append(cand[sel].astype(np.int64))
    return out


@dataclass
class MetricsReport:
    ks: tuple
    users: np.ndarray
    per_user: dict = field(default_factory=dict)  # (metric, k) -> per-user array

    def mean(self, metric: str, k: int) -> float:
        v = self.per_user[(metric, k)]
        return float(v.mean()) if len(v) else float("nan")

    def summary(self) -> dict:
        return {f"{m}@{k}": self.mean(m, k) for (m, k) in sorted(self.per_user)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "K", "value"])
        for metric in ("recall", "ndcg"):
            for k in self.ks:
                w.writerow([metric, k, repr(self.mean(metric, k))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "summary": self.summary(),
            "users": self.users.tolist(),
            "per_user": {f"{m}@{k}": v.tolist() for (m, k), v in sorted(self.per_user.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_scores(scores, relevant: list, exclude=None, ks=DEFAULT_KS, users=None) -> MetricsReport:
    """Metrics for rows of `scores`; rows with empty relevance are skipped."""
    ks = tuple(int(k) for k in ks)
    kmax = max(ks)
    keep = [r for r in range(len(relevant)) if len(relevant[r])]
    users = np.arange(len(relevant)) if users is None else np.asarray(users)
    report = MetricsReport(ks, users[keep])
    if not keep:
        for k in ks:
            report.per_user[("recall", k)] = np.empty(0)
            report.per_user[("ndcg", k)] = np.empty(0)
        return report
    ex = None if exclude is None else exclude[keep]
    ranked = top_k(np.asarray(scores)[keep], kmax, ex)
    for k in ks:
        report.per_user[("recall", k)] = np.array([recall_at_k(r, relevant[u], k) for r, u in zip(ranked, keep)])
        report.per_user[("ndcg", k)] = np.array([ndcg_at_k(r, relevant[u], k) for r, u in zip(ranked, keep)])
    return report


def evaluate_model(model, target, exclude_sets, ks=DEFAULT_KS, chunk=1024) -> MetricsReport:
    """Rank all items not in `exclude_sets` for every user with relevant items in `target`."""
    m, n = target.num_users, target.num_items
    rel_lists = target.item_lists()
    users = np.array([u for u in range(m) if len(rel_lists[u])], dtype=np.int64)
    excl_keys = np.unique(np.concatenate([d.keys for d in exclude_sets])) if exclude_sets else np.empty(0, np.int64)
    ks = tuple(int(k) for k in ks)
    report = MetricsReport(ks, users)
    parts = {(mt, k): [] for mt in ("recall", "ndcg") for k in ks}
    for s in range(0, len(users), chunk):
        part = users[s : s + chunk]
        scores = model.score_users(part)
        ex = np.zeros(scores.shape, dtype=bool)
        eu, ei = excl_keys // n, excl_keys % n
        pos = np.searchsorted(part, eu)
        pos_c = np.minimum(pos, len(part) - 1)
        hit = part[pos_c] == eu
        ex[pos_c[hit], ei[hit]] = True
        sub = evaluate_scores(scores, [rel_lists[u] for u in part], ex, ks)
        for key in parts:
            parts[key].append(sub.per_user[key])
    for key, vals in parts.items():
        report.per_user[key] = np.concatenate(vals) if vals else np.empty(0)
    return report


@dataclass
class Diagnostics:
    tp_loss: float | None
    fp_loss: float | None
    tp_weight: float | None
    fp_weight: float | None


def tp_fp_diagnostics(records, table, noise_flags, positive_mask=None) -> Diagnostics:
    """Group means of loss and weight over positive samples, split by noise flag.

    `noise_flags` aligns with `records`; `positive_mask` selects the observed
    (label 1) records and defaults to all of them.
    """
    flags = np.asarray(noise_flags, dtype=bool)
    pos = np.ones(len(flags), bool) if positive_mask is None else np.asarray(positive_mask, bool)
    weights = table.lookup(records.users, records.items)

    def grp(vals, mask):
        return float(vals[mask].mean()) if mask.any() else None

    tp, fp = pos & ~flags, pos & flags
    return Diagnostics(grp(records.losses, tp), grp(records.losses, fp), grp(weights, tp), grp(weights, fp))
