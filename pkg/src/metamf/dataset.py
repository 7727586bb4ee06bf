"""Rating ingestion, splitting, user groups and privacy-budget sampling."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ContractError, IngestionError

GROUP_LABELS = ("Low", "Med", "High")
GROUP_FRACTION = 0.05
MIN_USERS_FOR_GROUPS = 60


class RatingRecord(NamedTuple):
    user_id: int
    item_id: int
    rating: float


class Ratings:
    """Column-oriented list of rating records.

    Iterating yields :class:`RatingRecord` tuples; the numpy columns are
    what the training and evaluation code actually consumes.
    """

    __slots__ = ("users", "items", "ratings")

    def __init__(self, users, items, ratings):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.ratings = np.asarray(ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ContractError("rating columns have different lengths")

    @classmethod
    def from_records(cls, records) -> "Ratings":
        records = list(records)
        if not records:
            return cls([], [], [])
        u, i, r = zip(*records)
        return cls(u, i, r)

    def __len__(self):
        return len(self.ratings)

    def __iter__(self) -> Iterator[RatingRecord]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingRecord(u, i, r)

    def __getitem__(self, idx) -> RatingRecord:
        return RatingRecord(int(self.users[idx]), int(self.items[idx]), float(self.ratings[idx]))

    def __eq__(self, other):
        if not isinstance(other, Ratings):
            return NotImplemented
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
        )

    def __repr__(self):
        return f"Ratings(n={len(self)})"

    def subset(self, index) -> "Ratings":
        index = np.asarray(index)
        return Ratings(self.users[index], self.items[index], self.ratings[index])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for col in (self.users, self.items, self.ratings):
            h.update(np.ascontiguousarray(col).tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------- ingestion


@dataclass(frozen=True)
class RatingFormat:
    """How to read one rating file: delimiter, column positions, header lines."""

    delimiter: str = "\t"
    user_col: int = 0
    item_col: int = 1
    rating_col: int = 2
    skip_header: int = 0

    @classmethod
    def parse(cls, text: str | None) -> "RatingFormat":
        """Parse a preset name or ``key=value`` list.

        Examples: ``tsv``, ``movielens``, ``csv``,
        ``delimiter=::,columns=user:item:rating,header=1``.
        """
        if not text:
            return cls()
        if text in _PRESETS:
            return _PRESETS[text]
        kwargs = {}
        for part in text.split(","):
            if "=" not in part:
                raise ContractError(f"bad format descriptor element {part!r}")
            key, value = part.split("=", 1)
            key = key.strip()
            if key == "delimiter":
                kwargs["delimiter"] = {"tab": "\t", "\\t": "\t", "space": " ", "comma": ","}.get(value, value)
            elif key == "columns":
                names = value.split(":")
                try:
                    kwargs["user_col"] = names.index("user")
                    kwargs["item_col"] = names.index("item")
                    kwargs["rating_col"] = names.index("rating")
                except ValueError as exc:
                    raise ContractError(f"columns must name user, item and rating: {value!r}") from exc
            elif key in ("header", "skip_header"):
                kwargs["skip_header"] = int(value)
            else:
                raise ContractError(f"unknown format key {key!r}")
        return cls(**kwargs)

    def describe(self) -> str:
        names = {self.user_col: "user", self.item_col: "item", self.rating_col: "rating"}
        width = max(names) + 1
        cols = ":".join(names.get(k, "_") for k in range(width))
        return f"delimiter={self.delimiter!r},columns={cols},header={self.skip_header}"


_PRESETS = {
    "tsv": RatingFormat(),
    "csv": RatingFormat(delimiter=","),
    "movielens": RatingFormat(delimiter="::"),
}


@dataclass
class IndexMaps:
    """Raw id <-> dense index maps, in order of first appearance."""

    users: dict = field(default_factory=dict)
    items: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def raw_user(self, index: int) -> str:
        return self._inverse("users")[index]

    def raw_item(self, index: int) -> str:
        return self._inverse("items")[index]

    def _inverse(self, which):
        cache = f"_{which}_inv"
        inv = self.__dict__.get(cache)
        if inv is None or len(inv) != len(getattr(self, which)):
            inv = list(getattr(self, which))
            self.__dict__[cache] = inv
        return inv


def load_ratings(path, fmt: RatingFormat | None = None) -> tuple[Ratings, IndexMaps]:
    """Read a rating file and densify raw user/item ids.

    Duplicate (user, item) pairs are kept. Record order is preserved.
    """
    fmt = fmt or RatingFormat()
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    maps = IndexMaps()
    users, items, ratings = [], [], []
    user_ids, item_ids = maps.users, maps.items
    ncols = max(fmt.user_col, fmt.item_col, fmt.rating_col) + 1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= fmt.skip_header:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) < ncols:
                raise IngestionError(
                    f"expected {ncols} fields separated by {fmt.delimiter!r}, got {len(parts)}", lineno
                )
            raw_u = parts[fmt.user_col].strip()
            raw_i = parts[fmt.item_col].strip()
            try:
                r = float(parts[fmt.rating_col])
            except ValueError:
                raise IngestionError(f"rating {parts[fmt.rating_col]!r} is not a number", lineno) from None
            if not math.isfinite(r):
                raise IngestionError(f"rating {r} is not finite", lineno)
            u = user_ids.get(raw_u)
            if u is None:
                u = user_ids[raw_u] = len(user_ids)
            i = item_ids.get(raw_i)
            if i is None:
                i = item_ids[raw_i] = len(item_ids)
            users.append(u)
            items.append(i)
            ratings.append(r)
    if not ratings:
        raise ContractError(f"{path} contains no rating records")
    return Ratings(users, items, ratings), maps


def rescale_ratings(records: Ratings, source_range) -> Ratings:
    """Linearly map ratings from ``source_range`` onto [1, 5]."""
    lo, hi = (float(x) for x in source_range)
    if not lo < hi:
        raise ContractError(f"source range must satisfy lo < hi, got [{lo}, {hi}]")
    r = records.ratings
    bad = np.flatnonzero((r < lo) | (r > hi))
    if bad.size:
        raise ContractError(f"record {records[int(bad[0])]} lies outside [{lo}, {hi}]")
    scaled = 1.0 + 4.0 * (r - lo) / (hi - lo)
    scaled[r == lo] = 1.0
    scaled[r == hi] = 5.0
    return Ratings(records.users, records.items, scaled)


def dataset_stats(records: Ratings, n_users: int | None = None, n_items: int | None = None) -> dict:
    n_users = n_users if n_users is not None else len(np.unique(records.users))
    n_items = n_items if n_items is not None else len(np.unique(records.items))
    n = len(records)
    return {
        "n_users": n_users,
        "n_items": n_items,
        "n_ratings": n,
        "ratings_per_user": n / n_users,
        "ratings_per_item": n / n_items,
    }


# ------------------------------------------------------------------ splitting


@dataclass
class DatasetSplit:
    train: Ratings
    validation: Ratings
    test: Ratings
    n_users: int
    n_items: int
    seed: int
    train_index: np.ndarray
    val_index: np.ndarray
    test_index: np.ndarray


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    b1 = math.floor(n * ratios[0] + 0.5)
    b2 = math.floor(n * (ratios[0] + ratios[1]) + 0.5)
    return b1, b2 - b1, n - b2


def split_dataset(records: Ratings, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  n_users: int | None = None, n_items: int | None = None) -> DatasetSplit:
    """Seeded permutation followed by contiguous cuts at the ratio boundaries."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(records)
    if n < 10:
        raise ContractError(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = _split_sizes(n, ratios)
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return DatasetSplit(
        train=records.subset(tr),
        validation=records.subset(va),
        test=records.subset(te),
        n_users=n_users if n_users is not None else int(records.users.max()) + 1,
        n_items=n_items if n_items is not None else int(records.items.max()) + 1,
        seed=seed,
        train_index=tr,
        val_index=va,
        test_index=te,
    )


def split_from_indices(records: Ratings, train_index, val_index, test_index, seed: int,
                       n_users: int, n_items: int) -> DatasetSplit:
    tr, va, te = (np.asarray(x, dtype=np.int64) for x in (train_index, val_index, test_index))
    return DatasetSplit(records.subset(tr), records.subset(va), records.subset(te),
                        n_users, n_items, seed, tr, va, te)


MANIFEST_HEADER = "split-v1"


def write_split_manifest(split: DatasetSplit, path, n_records: int) -> None:
    """Write record-index lists so a split can be rebuilt from the source file."""
    lines = [
        MANIFEST_HEADER,
        f"seed {split.seed}",
        f"n_records {n_records}",
        f"n_users {split.n_users}",
        f"n_items {split.n_items}",
    ]
    for name, idx in (("train", split.train_index), ("val", split.val_index), ("test", split.test_index)):
        lines.append(f"{name} {len(idx)} " + " ".join(map(str, idx.tolist())))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path) -> dict:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise IngestionError(f"{path}: missing {MANIFEST_HEADER!r} header", 1)
    out = {}
    for lineno, line in enumerate(text[1:], start=2):
        key, _, rest = line.partition(" ")
        if key in ("train", "val", "test"):
            count, _, body = rest.partition(" ")
            idx = np.array(body.split(), dtype=np.int64)
            if len(idx) != int(count):
                raise IngestionError(f"{path}: {key} lists {len(idx)} indices, header says {count}", lineno)
            out[key] = idx
        elif key:
            out[key] = int(rest)
    for key in ("seed", "n_records", "n_users", "n_items", "train", "val", "test"):
        if key not in out:
            raise IngestionError(f"{path}: manifest lacks {key!r}")
    return out


# ---------------------------------------------------------------- user groups


@dataclass
class UserGroup:
    label: str
    user_ids: frozenset

    def __len__(self):
        return len(self.user_ids)

    def __contains__(self, u):
        return u in self.user_ids


def group_size(n_users: int) -> int:
    return math.floor(GROUP_FRACTION * n_users + 0.5)


def identify_user_groups(train: Ratings, n_users: int) -> tuple[UserGroup, UserGroup, UserGroup]:
    """Low / Med / High groups of 5% of users each, by training-rating count.

    Users with no training ratings are not eligible. Ties go to the lower
    user id. Med is drawn from users outside Low and High.
    """
    if n_users < MIN_USERS_FOR_GROUPS:
        raise ContractError(f"need at least {MIN_USERS_FOR_GROUPS} users for 5% groups, got {n_users}")
    counts = np.bincount(train.users, minlength=n_users)
    eligible = np.flatnonzero(counts > 0)
    k = group_size(n_users)
    if len(eligible) < 3 * k:
        raise ContractError(f"only {len(eligible)} users have training ratings; need {3 * k}")
    c = counts[eligible]

    low = eligible[np.lexsort((eligible, c))][:k]
    rest = np.setdiff1d(eligible, low)
    rc = counts[rest]
    high = rest[np.lexsort((rest, -rc))][:k]
    rest = np.setdiff1d(rest, high)

    median = float(np.median(c))
    dist = np.abs(counts[rest] - median)
    med = rest[np.lexsort((rest, dist))][:k]
    return (
        UserGroup("Low", frozenset(low.tolist())),
        UserGroup("Med", frozenset(med.tolist())),
        UserGroup("High", frozenset(high.tolist())),
    )


# ------------------------------------------------------------ privacy budget


@dataclass
class PrivacyBudgetSample:
    beta: float
    records: Ratings
    per_user_counts: dict
    index: np.ndarray  # positions of the kept records in the source list


def shared_count(n: int, beta: float) -> int:
    """max(1, round_half_up(beta * n)), computed on the decimal value of beta."""
    k = (Decimal(repr(float(beta))) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(k))


def _check_beta(beta):
    if not (0.0 < beta <= 1.0):
        raise ContractError(f"privacy budget beta must lie in (0, 1], got {beta}")


def sample_privacy_budget(train: Ratings, beta: float, seed: int) -> PrivacyBudgetSample:
    """Keep a beta-fraction of every user's ratings (at least one each).

    Each user's ratings are shuffled once per seed and the first ``k_u``
    are kept, so for a fixed seed smaller budgets are subsets of larger ones.
    """
    _check_beta(beta)
    n = len(train)
    keys = np.random.default_rng(seed).random(n)
    order = np.lexsort((keys, train.users))
    sorted_users = train.users[order]
    users, starts, sizes = np.unique(sorted_users, return_index=True, return_counts=True)
    ks = np.array([shared_count(int(s), beta) for s in sizes], dtype=np.int64)
    rank = np.arange(n) - np.repeat(starts, sizes)
    keep = rank < np.repeat(ks, sizes)
    index = np.sort(order[keep])
    return PrivacyBudgetSample(
        beta=beta,
        records=train.subset(index),
        per_user_counts=dict(zip(users.tolist(), ks.tolist())),
        index=index,
    )


# ------------------------------------------------------------------ synthetic


def synthetic_ratings(n_users: int, n_items: int, *, rank: int = 1, density: float = 0.2,
                      profile_skew: float = 0.0, noise: float = 0.0, seed: int = 0) -> Ratings:
    """Ratings ``clip(a_u . b_i, 1, 5)`` with a known low-rank structure.

    ``profile_skew > 0`` draws per-user profile sizes from a lognormal so
    that light and heavy users both occur. Every user and item receives at
    least one rating.
    """
    rng = np.random.default_rng(seed)
    if rank == 1:
        a = rng.uniform(1.0, 2.2, size=(n_users, 1))
        b = rng.uniform(1.0, 2.2, size=(n_items, 1))
    else:
        a = rng.normal(0, 1, size=(n_users, rank))
        b = rng.normal(0, 1, size=(n_items, rank))
        a[:, 0] = rng.uniform(1.0, 2.2, size=n_users) * np.sqrt(rank)
        b[:, 0] = rng.uniform(1.0, 2.2, size=n_items) / np.sqrt(rank)
    full = np.clip(a @ b.T + noise * rng.normal(size=(n_users, n_items)), 1.0, 5.0)

    mean_count = max(1.0, density * n_items)
    if profile_skew > 0:
        sizes = rng.lognormal(0.0, profile_skew, size=n_users)
        sizes = sizes / sizes.mean() * mean_count
    else:
        sizes = np.full(n_users, mean_count)
    sizes = np.clip(np.rint(sizes), 1, n_items).astype(int)

    us, its = [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=sizes[u], replace=False)
        us.append(np.full(sizes[u], u))
        its.append(chosen)
    users = np.concatenate(us)
    items = np.concatenate(its)
    missing = np.setdiff1d(np.arange(n_items), items)
    if missing.size:
        users = np.concatenate([users, rng.integers(0, n_users, size=missing.size)])
        items = np.concatenate([items, missing])
    order = rng.permutation(len(users))
    users, items = users[order], items[order]
    return Ratings(users, items, full[users, items])


def write_ratings(records: Ratings, path, delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in records:
            fh.write(f"{u}{delimiter}{i}{delimiter}{r:.6g}\n")


def movielens_like_ratings(n_users: int = 400, n_items: int = 300, *, mean_count: float = 40.0,
                           min_count: int = 3, profile_skew: float = 0.9, rank: int = 4, user_bias: float = 0.45,
                           item_bias: float = 0.5, interaction: float = 0.35, noise: float = 0.8,
                           seed: int = 0) -> Ratings:
    """Integer 1..5 ratings shaped like a small MovieLens sample.

    ``3.6 + b_u + b_i + interaction * <a_u, b_i> / sqrt(rank) + noise``,
    rounded and clipped. Item popularity and user profile sizes are
    lognormal, so the data has both light and heavy users and a long item
    tail. Every user has at least ``min_count`` ratings; every item at least
    one.
    """
    rng = np.random.default_rng(seed)
    bu = rng.normal(0, user_bias, n_users)
    bi = rng.normal(0, item_bias, n_items)
    a = rng.normal(0, 1, (n_users, rank))
    b = rng.normal(0, 1, (n_items, rank))
    popularity = rng.lognormal(0, 1.0, n_items)
    popularity /= popularity.sum()
    sizes = rng.lognormal(0, profile_skew, n_users)
    sizes = np.clip(np.rint(sizes / sizes.mean() * mean_count), min_count, n_items).astype(int)

    users = np.repeat(np.arange(n_users), sizes)
    items = np.concatenate([rng.choice(n_items, size=k, replace=False, p=popularity) for k in sizes])
    missing = np.setdiff1d(np.arange(n_items), items)
    users = np.concatenate([users, rng.integers(0, n_users, missing.size)])
    items = np.concatenate([items, missing])

    raw = (3.6 + bu[users] + bi[items]
           + interaction * np.einsum("nk,nk->n", a[users], b[items]) / np.sqrt(rank)
           + noise * rng.normal(size=len(users)))
    order = rng.permutation(len(users))
    return Ratings(users[order], items[order], np.clip(np.rint(raw), 1, 5)[order])
