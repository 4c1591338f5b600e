"""Grouped stratified cross-validation, ROC/AUROC, and gain-based feature selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import ConfigError, DataError, TabularSet
from .gbt import FeatureMatrix, GbtParams, fit

log = logging.getLogger(__name__)

FPR_GRID = np.linspace(0.0, 1.0, 101)


class FoldError(DataError):
    def __init__(self, fold: int, error: Exception):
        super().__init__(f"fold {fold}: {error}")
        self.fold = fold
        self.error = error


def derive_seed(seed: int, *keys) -> int:
    """Independent 63-bit seed for a (seed, key...) path."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode())
        else:
            words.append(int(k))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# ---------------------------------------------------------------- folds

@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index per group id (``groups`` sorted ascending)."""

    groups: np.ndarray
    fold: np.ndarray
    k: int

    def fold_of(self, row_groups) -> np.ndarray:
        row_groups = np.asarray(row_groups)
        pos = np.searchsorted(self.groups, row_groups)
        pos = np.minimum(pos, len(self.groups) - 1)
        if len(row_groups) and not np.array_equal(self.groups[pos], row_groups):
            raise DataError("row group id missing from the fold assignment")
        return self.fold[pos]

    def split(self, row_groups, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(train rows, test rows) of fold ``i``."""
        f = self.fold_of(row_groups)
        return np.flatnonzero(f != i), np.flatnonzero(f == i)

    def to_dict(self) -> dict:
        return {"k": self.k, "groups": [int(g) for g in self.groups], "fold": [int(f) for f in self.fold]}


def group_labels(groups, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique groups, 1 if the group has any positive row, and rows per group."""
    uniq, inv, counts = np.unique(np.asarray(groups), return_inverse=True, return_counts=True)
    pos = np.zeros(len(uniq), dtype=np.int8)
    np.maximum.at(pos, inv, np.asarray(labels, dtype=np.int8))
    return uniq, pos, counts


def grouped_stratified_kfold(groups, labels, k: int = 10, seed: int = 0, balance: str = "rows") -> FoldAssignment:
    """Assign whole groups to ``k`` folds, stratified on group labels.

    ``groups`` and ``labels`` are per row; a group is positive when any of its
    rows is. Positive groups are shuffled and dealt round-robin, so per-fold
    positive counts differ by at most one. Negative groups, shuffled and then
    taken largest first, go to the fold that is currently smallest (by row
    count, or by group count with ``balance="groups"``), lowest index on ties.
    """
    if int(k) != k or k < 2:
        raise ConfigError(f"k must be an integer >= 2, got {k}")
    if balance not in ("rows", "groups"):
        raise ConfigError("balance must be 'rows' or 'groups'")
    uniq, pos, counts = group_labels(groups, labels)
    if len(uniq) < k:
        raise DataError(f"{len(uniq)} groups cannot fill {k} folds")
    if pos.sum() < 1:
        raise DataError("no positive group to stratify on")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(uniq), dtype=np.int64)
    size = np.zeros(k, dtype=np.int64)
    pos_idx = rng.permutation(np.flatnonzero(pos == 1))
    fold[pos_idx] = np.arange(len(pos_idx)) % k
    np.add.at(size, fold[pos_idx], counts[pos_idx] if balance == "rows" else 1)
    neg_idx = rng.permutation(np.flatnonzero(pos == 0))
    if balance == "rows":
        neg_idx = neg_idx[np.argsort(-counts[neg_idx], kind="stable")]
    for g in neg_idx:
        f = int(np.argmin(size))
        fold[g] = f
        size[f] += counts[g] if balance == "rows" else 1
    return FoldAssignment(uniq, fold, int(k))


# ---------------------------------------------------------------- ROC

def _check_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError("scores and labels lengths differ")
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise DataError("AUROC needs both classes")
    return s, y.astype(np.int8)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + P(s+ = s-) / 2, via midranks."""
    s, y = _check_scores(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    r = rankdata(s)  # midranks; sums are exact half-integers
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


class RocCurve(NamedTuple):
    fpr: np.ndarray
    tpr: np.ndarray
    threshold: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1])) / 2.0)


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every distinct score, highest first, starting at (0, 0).

    A point at threshold ``t`` classifies ``score >= t`` as positive; the
    leading point has threshold +inf.
    """
    s, y = _check_scores(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n1, n0 = tp[-1], fp[-1]
    return RocCurve(np.r_[0.0, fp / n0], np.r_[0.0, tp / n1], np.r_[np.inf, s[last]])


def interpolate_roc(curve: RocCurve, grid=FPR_GRID) -> np.ndarray:
    """TPR on ``grid``; at an FPR with a vertical step the highest TPR is used."""
    fpr, idx = np.unique(curve.fpr, return_index=True)
    tpr = np.maximum.reduceat(curve.tpr, idx)
    return np.interp(grid, fpr, tpr)


def mean_roc(curves: Sequence[RocCurve], grid=FPR_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Vertical mean and population standard deviation of TPR on ``grid``."""
    T = np.array([interpolate_roc(c, grid) for c in curves])
    return T.mean(axis=0), T.std(axis=0)


# ---------------------------------------------------------------- feature selection

def select_features(data, params: GbtParams, n: int, labels=None, feature_names=None) -> list[str]:
    """Names of the ``n`` features with highest mean split gain.

    Ties in gain, and features never split on, keep column order. A column
    identical to one already chosen (same values and missing cells) is
    skipped, so exact copies do not take two slots. Asking for ``n`` at or
    above the feature count returns every column in original order (with a
    warning when it exceeds the count).
    """
    if not params.colsample < 1:
        raise ConfigError("feature selection needs a per-tree feature fraction below 1")
    if n < 1:
        raise ConfigError("n must be >= 1")
    fm = data if isinstance(data, FeatureMatrix) else FeatureMatrix(data, feature_names=feature_names)
    names = list(feature_names or fm.feature_names or [f"x{i}" for i in range(fm.shape[1])])
    if labels is None:
        if not isinstance(data, TabularSet):
            raise DataError("labels required")
        labels = data.labels
    F = len(names)
    if n >= F:
        if n > F:
            warnings.warn(f"requested {n} features but only {F} exist; returning all", stacklevel=2)
        return names
    model = fit(fm, labels, params)
    gain = np.zeros(F)
    for f, v in model.importance("gain").items():
        gain[f] = v
    ranked = np.argsort(-gain, kind="stable")
    chosen: list[int] = []
    for i in ranked:
        if not any(np.array_equal(fm.X[:, i], fm.X[:, j], equal_nan=True) for j in chosen):
            chosen.append(int(i))
            if len(chosen) == n:
                break
    return [names[i] for i in chosen]


# ---------------------------------------------------------------- reports

@dataclass(eq=False)
class CvReport:
    pipeline: str
    k: int
    seed: int
    fold_auroc: list[float]
    fold_roc: list[RocCurve]
    base_auroc: dict[str, list[float]] = field(default_factory=dict)
    fold_sizes: list[tuple[int, int]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_auroc))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_auroc))

    def mean_curve(self, grid=FPR_GRID):
        return mean_roc(self.fold_roc, grid)

    def base_mean(self, name: str) -> float:
        return float(np.mean(self.base_auroc[name]))

    def to_dict(self) -> dict:
        mt, st = self.mean_curve()
        thr = lambda a: [None if not math.isfinite(v) else float(v) for v in a]
        return {
            "format": "riskpipe.cv_report",
            "version": 1,
            "pipeline": self.pipeline,
            "k": self.k,
            "seed": self.seed,
            "config": self.config,
            "fold_auroc": [float(v) for v in self.fold_auroc],
            "mean_auroc": self.mean,
            "std_auroc": self.std,
            "base_auroc": {k: [float(v) for v in vs] for k, vs in sorted(self.base_auroc.items())},
            "fold_sizes": [[int(a), int(b)] for a, b in self.fold_sizes],
            "mean_roc": {"fpr": [float(v) for v in FPR_GRID], "tpr": [float(v) for v in mt],
                         "std": [float(v) for v in st]},
            "fold_roc": [{"fpr": [float(v) for v in c.fpr], "tpr": [float(v) for v in c.tpr],
                          "threshold": thr(c.threshold)} for c in self.fold_roc],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "CvReport":
        if d.get("format") != "riskpipe.cv_report":
            raise DataError("not a cv report")
        curves = [RocCurve(np.array(c["fpr"]), np.array(c["tpr"]),
                           np.array([np.inf if v is None else v for v in c["threshold"]], dtype=np.float64))
                  for c in d["fold_roc"]]
        return cls(d["pipeline"], int(d["k"]), int(d["seed"]), list(d["fold_auroc"]), curves,
                   {k: list(v) for k, v in d["base_auroc"].items()}, [tuple(s) for s in d["fold_sizes"]],
                   d.get("config", {}))

    @classmethod
    def load(cls, path) -> "CvReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save_roc_csv(self, path) -> None:
        """Per-fold points followed by the mean curve (fold column ``mean``, empty threshold)."""
        mt, _ = self.mean_curve()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "fpr", "tpr", "threshold"])
            for i, c in enumerate(self.fold_roc):
                for f, t, th in zip(c.fpr, c.tpr, c.threshold):
                    w.writerow([i, repr(float(f)), repr(float(t)), "inf" if np.isinf(th) else repr(float(th))])
            for f, t in zip(FPR_GRID, mt):
                w.writerow(["mean", repr(float(f)), repr(float(t)), ""])


def load_roc_csv(path) -> tuple[dict[int, RocCurve], tuple[np.ndarray, np.ndarray]]:
    folds: dict[int, list] = {}
    mean_f, mean_t = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != ["fold", "fpr", "tpr", "threshold"]:
            raise DataError(f"unexpected ROC header {header}")
        for r in rows:
            if r[0] == "mean":
                mean_f.append(float(r[1]))
                mean_t.append(float(r[2]))
            else:
                folds.setdefault(int(r[0]), []).append((float(r[1]), float(r[2]), float(r[3])))
    curves = {i: RocCurve(*(np.array(c) for c in zip(*pts))) for i, pts in folds.items()}
    return curves, (np.array(mean_f), np.array(mean_t))


# ---------------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class AuditEvent:
    """A fitting step touching rows: ``stage`` names it, ``groups`` are the group ids it saw."""

    fold: int
    stage: str
    groups: frozenset


def audit_hook(sink: list | None, fold: int) -> Callable[[str, np.ndarray], None] | None:
    if sink is None:
        return None

    def record(stage: str, groups) -> None:
        sink.append(AuditEvent(fold, stage, frozenset(int(g) for g in np.unique(groups))))

    return record


def cv_run(pipeline, data, k: int = 10, seed: int = 0, threads: int = 1,
           audit: list | None = None) -> CvReport:
    """Grouped stratified k-fold evaluation of a pipeline.

    ``pipeline`` is a name accepted by ``riskpipe.stack.make_pipeline`` or a
    pipeline object. ``data`` is a driver TabularSet for driver tasks; journey
    tasks take an object with ``journeys`` and ``drivers`` tables (or just
    the journeys when drivers are unused). Every fitting step sees the
    training partition only; pass a list as ``audit`` to collect the group ids
    each step touched.
    """
    from .stack import make_pipeline, split_data

    if isinstance(pipeline, str):
        pipeline = make_pipeline(pipeline)
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    rows = data if isinstance(data, TabularSet) else data.journeys if pipeline.task == "journey" else data.drivers
    folds = grouped_stratified_kfold(rows.groups, rows.labels, k, seed)

    def run(i: int):
        train, test = split_data(data, pipeline.task, folds, i)
        events: list | None = [] if audit is not None else None
        try:
            model = pipeline.fit(train, derive_seed(seed, "fold", i), audit_hook(events, i))
            scores = model.predict(test)
            base = model.base_predict(test) if hasattr(model, "base_predict") else {}
            test_rows = test if isinstance(test, TabularSet) else (
                test.journeys if pipeline.task == "journey" else test.drivers)
            y = test_rows.labels
            a = auroc(scores, y)
            return a, roc_curve(scores, y), {n: auroc(s, y) for n, s in base.items()}, events, \
                (len(test_rows), int(y.sum()))
        except FoldError:
            raise
        except DataError as exc:
            raise FoldError(i, exc) from exc

    if threads == 1:
        results = [run(i) for i in range(k)]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, k)) as pool:
            results = list(pool.map(run, range(k)))
    base: dict[str, list[float]] = {}
    for r in results:
        for n, v in r[2].items():
            base.setdefault(n, []).append(v)
        if audit is not None:
            audit.extend(r[3])
    report = CvReport(pipeline.name, int(k), int(seed), [r[0] for r in results], [r[1] for r in results],
                      base, [r[4] for r in results], pipeline.describe())
    log.info("cv %s: mean AUROC %.4f (sd %.4f) over %d folds", pipeline.name, report.mean, report.std, k)
    return report
