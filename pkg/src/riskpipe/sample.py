"""Resampling for class imbalance: SMOTE, Tomek links, random over/under sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .core import ConfigError, DataError

METRICS = {"euclidean": "euclidean", "manhattan": "cityblock", "chebyshev": "chebyshev"}
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Fully observed feature matrix with binary labels.

    ``origin`` records row provenance: the index of the source row for
    original samples and -1 for synthetic ones.
    """

    X: np.ndarray
    y: np.ndarray
    metric: str = "euclidean"
    origin: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y).reshape(-1).astype(np.int8)
        if X.shape[0] != y.shape[0]:
            raise DataError("X and y lengths differ")
        if not np.isfinite(X).all():
            raise DataError("LabeledSet requires finite values (no missing cells)")
        if y.size and not np.isin(y, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; choose from {sorted(METRICS)}")
        origin = np.arange(len(y)) if self.origin is None else np.asarray(self.origin, dtype=np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "origin", origin)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows) -> "LabeledSet":
        return LabeledSet(self.X[rows], self.y[rows], self.metric, self.origin[rows])

    def counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self.y) - n1, n1

    def minority_label(self) -> int:
        n0, n1 = self.counts()
        return 1 if n1 <= n0 else 0


class TomekPair(NamedTuple):
    i: int
    j: int
    distance: float


def _dist(A, B, metric):
    return cdist(A, B, metric=METRICS[metric])


def _check_ratio(ratio: float) -> None:
    if not (math.isfinite(ratio) and ratio > 0):
        raise ConfigError(f"ratio must be positive, got {ratio}")


def _minority_target(n_maj: int, ratio: float) -> int:
    # tolerance guards ratios like 1/3 whose product lands just above an integer
    return int(math.ceil(ratio * n_maj - 1e-9))


def smote(data: LabeledSet, ratio: float = 1 / 3, k: int = 5, seed: int = 0) -> LabeledSet:
    """Oversample the minority class to a minority:majority ratio of at least ``ratio``.

    Each synthetic point lies on the segment between a uniformly drawn minority
    sample and one of its ``k`` nearest minority neighbours (ties broken by
    lowest index). Originals are kept unchanged and first in the output.
    """
    _check_ratio(ratio)
    minority = data.minority_label()
    min_idx = np.flatnonzero(data.y == minority)
    n_min = len(min_idx)
    n_maj = len(data) - n_min
    if n_min < 2:
        raise DataError(f"SMOTE needs at least 2 minority samples, got {n_min}")
    if not 1 <= k < n_min:
        raise ConfigError(f"k must satisfy 1 <= k < minority count ({n_min}), got {k}")
    n_new = _minority_target(n_maj, ratio) - n_min
    if n_new <= 0:
        return data
    rng = np.random.default_rng(seed)
    P = data.X[min_idx]
    D = _dist(P, P, data.metric)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    base = rng.integers(0, n_min, n_new)
    which = rng.integers(0, k, n_new)
    u = rng.random(n_new)[:, None]
    xi = P[base]
    synth = xi + u * (P[nn[base, which]] - xi)
    X = np.vstack([data.X, synth])
    y = np.concatenate([data.y, np.full(n_new, minority, dtype=np.int8)])
    origin = np.concatenate([data.origin, np.full(n_new, -1, dtype=np.int64)])
    return LabeledSet(X, y, data.metric, origin)


def _nearest(X: np.ndarray, metric: str):
    """Nearest neighbour of every row, and whether it is strictly closer than all others."""
    n = len(X)
    nn = np.empty(n, dtype=np.int64)
    d1 = np.empty(n)
    unique = np.empty(n, dtype=bool)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        D = _dist(X[s:e], X, metric)
        D[np.arange(e - s), np.arange(s, e)] = np.inf
        j = np.argmin(D, axis=1)
        best = D[np.arange(e - s), j]
        D[np.arange(e - s), j] = np.inf
        second = D.min(axis=1) if n > 2 else np.full(e - s, np.inf)
        nn[s:e] = j
        d1[s:e] = best
        unique[s:e] = second > best
    return nn, d1, unique


def tomek_links(data: LabeledSet) -> list[TomekPair]:
    """Cross-class pairs that are each other's strictly unique nearest neighbour."""
    n = len(data)
    if n < 2:
        return []
    nn, d1, unique = _nearest(data.X, data.metric)
    out = []
    for i in range(n):
        j = int(nn[i])
        if i < j and unique[i] and unique[j] and nn[j] == i and data.y[i] != data.y[j]:
            out.append(TomekPair(i, j, float(d1[i])))
    return out


def tomek_removal(data: LabeledSet) -> LabeledSet:
    """Detect all links once, then drop the majority-class member of each."""
    links = tomek_links(data)
    if not links:
        return data
    majority = 1 - data.minority_label()
    drop = {p.i if data.y[p.i] == majority else p.j for p in links}
    keep = np.setdiff1d(np.arange(len(data)), np.fromiter(drop, dtype=np.int64))
    return data.subset(keep)


def smote_tomek(data: LabeledSet, ratio: float = 1 / 3, k: int = 5, seed: int = 0) -> LabeledSet:
    return tomek_removal(smote(data, ratio, k, seed))


def random_over(data: LabeledSet, ratio: float = 1.0, seed: int = 0) -> LabeledSet:
    """Append uniformly drawn copies of minority rows until the ratio is met."""
    _check_ratio(ratio)
    minority = data.minority_label()
    min_idx = np.flatnonzero(data.y == minority)
    n_maj = len(data) - len(min_idx)
    n_new = _minority_target(n_maj, ratio) - len(min_idx)
    if n_new <= 0:
        return data
    if len(min_idx) == 0:
        raise DataError("no minority rows to duplicate")
    rng = np.random.default_rng(seed)
    picks = min_idx[rng.integers(0, len(min_idx), n_new)]
    return data.subset(np.concatenate([np.arange(len(data)), picks]))


def random_under(data: LabeledSet, ratio: float = 1.0, seed: int = 0) -> LabeledSet:
    """Drop uniformly chosen majority rows until minority:majority >= ratio."""
    _check_ratio(ratio)
    minority = data.minority_label()
    maj_idx = np.flatnonzero(data.y != minority)
    n_min = len(data) - len(maj_idx)
    n_keep = int(math.floor(n_min / ratio + 1e-9))
    if n_keep >= len(maj_idx):
        return data
    if n_keep <= 0:
        raise DataError("under-sampling would remove every majority row")
    rng = np.random.default_rng(seed)
    kept = rng.choice(maj_idx, size=n_keep, replace=False)
    rows = np.sort(np.concatenate([np.flatnonzero(data.y == minority), kept]))
    return data.subset(rows)


SAMPLERS = ("none", "smote", "tomek", "smote+tomek", "over", "under")


def resample(data: LabeledSet, method: str, ratio: float = 1 / 3, k: int = 5, seed: int = 0) -> LabeledSet:
    if method == "none":
        return data
    if method == "smote":
        return smote(data, ratio, k, seed)
    if method == "tomek":
        return tomek_removal(data)
    if method == "smote+tomek":
        return smote_tomek(data, ratio, k, seed)
    if method == "over":
        return random_over(data, ratio, seed)
    if method == "under":
        return random_under(data, ratio, seed)
    raise ConfigError(f"unknown sampling method {method!r}; choose from {SAMPLERS}")


def save_labeled_csv(data: LabeledSet, path, columns=None, origin_ids=None) -> None:
    """Write ``origin,<features...>,label``; ``origin`` is empty for synthetic rows.

    ``origin_ids`` optionally maps source row indices to ids (e.g. driver ids).
    """
    names = list(columns) if columns is not None else [f"x{i}" for i in range(data.X.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", *names, "label"])
        for o, x, y in zip(data.origin, data.X, data.y):
            oid = "" if o < 0 else str(int(o if origin_ids is None else origin_ids[o]))
            w.writerow([oid, *(repr(float(v)) for v in x), int(y)])


def load_labeled_csv(path, metric: str = "euclidean") -> tuple[LabeledSet, list[str]]:
    """Read ``save_labeled_csv`` output; origins come back as ids (-1 for synthetic rows)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "origin" or rows[0][-1] != "label":
        raise DataError(f"{path}: expected header origin,<features...>,label")
    names = rows[0][1:-1]
    body = rows[1:]
    try:
        X = np.array([[float(v) for v in r[1:-1]] for r in body], dtype=np.float64).reshape(len(body), len(names))
        y = np.array([int(r[-1]) for r in body], dtype=np.int8)
        origin = np.array([int(r[0]) if r[0] else -1 for r in body], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    return LabeledSet(X, y, metric, origin), names
