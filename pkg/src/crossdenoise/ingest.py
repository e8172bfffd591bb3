"""Rating ingestion, binarization, splitting, negative sampling and synthetic data."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from crossdenoise.seeding import Purpose, rng_for


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DensityError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawRating:
    user: str
    item: str
    rating: float
    timestamp: int | None = None


@dataclass
class InteractionDataset:
    """Observed (user, item) pairs over dense indices, with false-positive flags."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    noisy: np.ndarray
    user_tokens: list[str] = field(default_factory=list)
    item_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.noisy = np.asarray(self.noisy, dtype=bool)
        if not (len(self.users) == len(self.items) == len(self.noisy)):
            raise ValueError("users, items and noisy must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item index out of range")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def keys(self) -> np.ndarray:
        return self.users * self.num_items + self.items

    def subset(self, idx) -> InteractionDataset:
        return InteractionDataset(
            self.num_users,
            self.num_items,
            self.users[idx],
            self.items[idx],
            self.noisy[idx],
            self.user_tokens,
            self.item_tokens,
        )

    def clean(self) -> InteractionDataset:
        return self.subset(~self.noisy)

    def item_lists(self) -> list[np.ndarray]:
        """Per-user item arrays (sorted by item index)."""
        order = np.lexsort((self.items, self.users))
        bounds = np.searchsorted(self.users[order], np.arange(self.num_users + 1))
        items = self.items[order]
        return [items[bounds[u] : bounds[u + 1]] for u in range(self.num_users)]

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.num_users}\t{self.num_items}\n")
        for u, i, f in zip(self.users.tolist(), self.items.tolist(), self.noisy.tolist()):
            buf.write(f"{u}\t{i}\t{int(f)}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> InteractionDataset:
        lines = text.splitlines()
        if not lines:
            raise ParseError(1, "missing header")
        try:
            m, n = (int(v) for v in lines[0].split("\t"))
        except ValueError:
            raise ParseError(1, "header must be 'M<TAB>N'") from None
        rows = []
        for no, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(no, f"expected 3 columns, got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise ParseError(no, "non-integer field") from None
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        return cls(m, n, arr[:, 0], arr[:, 1], arr[:, 2].astype(bool))


@dataclass
class DataSplit:
    train: InteractionDataset
    valid: InteractionDataset
    test: InteractionDataset
    split_seed: int
    # test partition before the true-positive filter; kept for audits
    test_unfiltered: InteractionDataset | None = None
    valid_unfiltered: InteractionDataset | None = None


@dataclass
class NegativeSet:
    users: np.ndarray
    items: np.ndarray
    ratio: int
    epoch_seed: int

    def __len__(self) -> int:
        return len(self.users)


def parse_ratings(source, delimiter: str = "\t") -> list[RawRating]:
    """Parse ``user<d>item<d>rating[<d>timestamp]`` lines.

    `source` may be bytes, str, or a binary/text file object.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    out = []
    for no, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(delimiter)
        if len(parts) not in (3, 4):
            raise ParseError(no, f"expected 3 or 4 columns, got {len(parts)}")
        try:
            rating = float(parts[2])
        except ValueError:
            raise ParseError(no, f"non-numeric rating {parts[2]!r}") from None
        if not math.isfinite(rating):
            raise ParseError(no, "rating is not finite")
        ts = None
        if len(parts) == 4 and parts[3].strip():
            try:
                ts = int(parts[3])
            except ValueError:
                raise ParseError(no, f"non-integer timestamp {parts[3]!r}") from None
        out.append(RawRating(parts[0].strip(), parts[1].strip(), rating, ts))
    return out


def binarize(ratings: Sequence[RawRating], noise_threshold: float = 3.0) -> InteractionDataset:
    """Every rating becomes an interaction; ratings <= threshold are flagged noisy.

    Duplicated (user, item) pairs keep the last occurrence.
    """
    if not ratings:
        raise ValueError("binarize needs at least one rating")
    user_idx: dict[str, int] = {}
    item_idx: dict[str, int] = {}
    pairs: dict[tuple[int, int], bool] = {}
    for r in ratings:
        u = user_idx.setdefault(r.user, len(user_idx))
        i = item_idx.setdefault(r.item, len(item_idx))
        key = (u, i)
        # re-insert so the pair takes the position of its last occurrence
        pairs.pop(key, None)
        pairs[key] = r.rating <= noise_threshold
    arr = np.array([(u, i, f) for (u, i), f in pairs.items()], dtype=np.int64)
    return InteractionDataset(
        len(user_idx),
        len(item_idx),
        arr[:, 0],
        arr[:, 1],
        arr[:, 2].astype(bool),
        list(user_idx),
        list(item_idx),
    )


def split(ds: InteractionDataset, ratios=(8, 1, 1), seed: int = 0) -> DataSplit:
    """Global seeded shuffle, then partition by count.

    Validation and test keep only true positives.
    """
    n = len(ds)
    if n < 10:
        raise ValueError("split needs at least 10 interactions")
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_valid = int(round(n * ratios[1] / total))
    perm = rng_for(seed, Purpose.SPLIT).permutation(n)
    train = ds.subset(np.sort(perm[:n_train]))
    valid = ds.subset(np.sort(perm[n_train : n_train + n_valid]))
    test = ds.subset(np.sort(perm[n_train + n_valid :]))
    return DataSplit(train, valid.clean(), test.clean(), seed, test, valid)


def sample_negatives(train: InteractionDataset, k: int, seed: int, epoch: int) -> NegativeSet:
    """Uniformly draw k * |train| unobserved pairs, with replacement."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    m, n = train.num_users, train.num_items
    want = k * len(train)
    observed = np.unique(train.keys)
    if len(observed) >= m * n:
        raise DensityError("no unobserved (user, item) pair to sample")
    rng = rng_for(seed, Purpose.NEGATIVES, epoch)
    keys = np.empty(0, dtype=np.int64)
    budget = 100 * max(want, 1)
    drawn = 0
    while len(keys) < want:
        need = want - len(keys)
        batch = max(need + need // 4 + 16, 64)
        if drawn + batch > budget:
            batch = budget - drawn
            if batch <= 0:
                raise DensityError(
                    f"rejection sampling exceeded retry budget ({budget} draws) for {want} negatives"
                )
        cand = rng.integers(0, m * n, size=batch)
        drawn += batch
        pos = np.searchsorted(observed, cand)
        pos[pos == len(observed)] = 0
        cand = cand[observed[pos] != cand]
        keys = np.concatenate([keys, cand[:need]])
    return NegativeSet(keys // n, keys % n, k, epoch)


def synth_generate(
    num_users: int,
    num_items: int,
    latent_dim: int,
    noise_fraction: float,
    seed: int,
    density: float = 0.05,
    propensity_sigma: float = 1.0,
) -> InteractionDataset:
    """Low-rank ground truth with injected false positives.

    The `density` share of pairs with the highest latent affinity become clean
    positives. Noisy positives are drawn among the remaining pairs with
    probability proportional to per-user x per-item log-normal propensities, so
    some users and items are systematically noisier than others.
    """
    if min(num_users, num_items, latent_dim) <= 0:
        raise ValueError("counts must be positive")
    if not 0.0 <= noise_fraction < 1.0:
        raise ValueError("noise_fraction must lie in [0, 1)")
    rng = rng_for(seed, Purpose.SYNTH)
    P = rng.normal(size=(num_users, latent_dim))
    Q = rng.normal(size=(num_items, latent_dim))
    affinity = (P @ Q.T).ravel()
    total = num_users * num_items
    n_clean = max(1, int(round(density * total)))
    clean_keys = np.sort(np.argsort(-affinity, kind="stable")[:n_clean])

    n_noisy = int(round(noise_fraction * n_clean / (1.0 - noise_fraction)))
    n_noisy = min(n_noisy, total - n_clean)
    noisy_keys = np.empty(0, dtype=np.int64)
    if n_noisy > 0:
        pu = rng.lognormal(0.0, propensity_sigma, size=num_users)
        pi = rng.lognormal(0.0, propensity_sigma, size=num_items)
        prob = np.outer(pu, pi).ravel()
        prob[clean_keys] = 0.0
        prob /= prob.sum()
        noisy_keys = np.sort(rng.choice(total, size=n_noisy, replace=False, p=prob))

    keys = np.concatenate([clean_keys, noisy_keys])
    flags = np.concatenate([np.zeros(len(clean_keys), bool), np.ones(len(noisy_keys), bool)])
    order = np.argsort(keys, kind="stable")
    keys, flags = keys[order], flags[order]
    return InteractionDataset(
        num_users,
        num_items,
        keys // num_items,
        keys % num_items,
        flags,
        [str(u) for u in range(num_users)],
        [str(i) for i in range(num_items)],
    )


def concat(datasets: Iterable[InteractionDataset]) -> InteractionDataset:
    ds = list(datasets)
    return InteractionDataset(
        ds[0].num_users,
        ds[0].num_items,
        np.concatenate([d.users for d in ds]),
        np.concatenate([d.items for d in ds]),
        np.concatenate([d.noisy for d in ds]),
        ds[0].user_tokens,
        ds[0].item_tokens,
    )
