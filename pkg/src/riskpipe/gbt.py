"""Second-order gradient-boosted trees for binary classification.

Trees are grown by exact greedy enumeration over sorted feature values with
logistic-loss gradients ``g = w (p - y)`` and hessians ``h = w p (1 - p)``.
Leaf weights are ``-G / (H + lambda)`` scaled by the learning rate and a split
is kept when ``0.5 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)] - gamma > 0``.
Missing cells are routed by a per-node default direction chosen to maximise
that gain.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import _gbt_kernels as K
from .core import ConfigError, DataError, TabularSet


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    colsample: float = 0.8
    pos_weight: float = 1.0
    min_child_weight: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must be in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ConfigError("reg_lambda, gamma and min_child_weight must be >= 0")
        if not 0 < self.colsample <= 1:
            raise ConfigError("colsample must be in (0, 1]")
        if not self.pos_weight > 0:
            raise ConfigError("pos_weight must be positive")

    def replace(self, **kw) -> "GbtParams":
        return GbtParams(**{**asdict(self), **kw})


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def internal(self) -> np.ndarray:
        return self.left >= 0

    def to_dict(self) -> dict:
        return {
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "default_left": [bool(v) for v in self.default_left],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [float(v) for v in self.value],
            "gain": [float(v) for v in self.gain],
            "cover": [float(v) for v in self.cover],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["default_left"], dtype=np.bool_), np.array(d["left"], dtype=np.int64),
                   np.array(d["right"], dtype=np.int64), np.array(d["value"], dtype=np.float64),
                   np.array(d["gain"], dtype=np.float64), np.array(d["cover"], dtype=np.float64))


@dataclass(eq=False)
class GbtModel:
    trees: list[Tree]
    base_score: float
    n_features: int
    feature_names: tuple[str, ...] = ()
    params: GbtParams = field(default_factory=GbtParams)
    _flat: tuple | None = field(default=None, repr=False)

    def _flatten(self):
        if self._flat is None:
            offsets = np.zeros(len(self.trees) + 1, dtype=np.int64)
            for i, t in enumerate(self.trees):
                offsets[i + 1] = offsets[i] + len(t.value)

            def cat(attr, dtype):
                if not self.trees:
                    return np.zeros(0, dtype=dtype)
                return np.ascontiguousarray(np.concatenate([getattr(t, attr) for t in self.trees]), dtype=dtype)
            self._flat = (offsets, cat("feature", np.int64), cat("threshold", np.float64),
                          cat("default_left", np.bool_), cat("left", np.int64), cat("right", np.int64),
                          cat("value", np.float64))
        return self._flat

    def predict_margin(self, X, mask=None) -> np.ndarray:
        X = _as_matrix(X, mask, allow_missing=True)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        return K.predict_margin(X, float(self.base_score), *self._flatten())

    def predict_proba(self, X, mask=None) -> np.ndarray:
        return expit(self.predict_margin(X, mask))

    def importance(self, kind: str = "gain") -> dict[int, float]:
        """Per-feature importance over all internal nodes of all trees.

        ``gain``: mean split gain; ``weight``: number of splits; ``cover``:
        mean hessian sum at the splitting nodes. Unused features are absent.
        """
        if kind not in ("gain", "weight", "cover"):
            raise ConfigError(f"unknown importance kind {kind!r}")
        sums: dict[int, float] = {}
        counts: dict[int, int] = {}
        for t in self.trees:
            for node in np.flatnonzero(t.internal):
                f = int(t.feature[node])
                counts[f] = counts.get(f, 0) + 1
                if kind == "gain":
                    sums[f] = sums.get(f, 0.0) + float(t.gain[node])
                elif kind == "cover":
                    sums[f] = sums.get(f, 0.0) + float(t.cover[node])
        if kind == "weight":
            return {f: float(c) for f, c in sorted(counts.items())}
        return {f: sums[f] / counts[f] for f in sorted(counts)}

    def named_importance(self, kind: str = "gain") -> dict[str, float]:
        names = self.feature_names or tuple(f"f{i}" for i in range(self.n_features))
        return {names[f]: v for f, v in self.importance(kind).items()}

    def to_dict(self) -> dict:
        return {
            "kind": "gbt",
            "params": asdict(self.params),
            "base_score": float(self.base_score),
            "n_features": int(self.n_features),
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("kind") != "gbt":
            raise DataError(f"not a gbt model: kind={d.get('kind')!r}")
        return cls([Tree.from_dict(t) for t in d["trees"]], float(d["base_score"]), int(d["n_features"]),
                   tuple(d["feature_names"]), GbtParams(**d["params"]))


def _as_matrix(X, mask=None, allow_missing=True) -> np.ndarray:
    if isinstance(X, TabularSet):
        mask = X.mask if mask is None else mask
        X = X.values
    X = np.array(X, dtype=np.float64, copy=True)
    if X.ndim == 1:
        X = X[:, None]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != X.shape:
            raise DataError("mask shape does not match feature matrix")
        X[mask] = 0.0
        if not np.isfinite(X).all():
            raise DataError("non-finite feature value outside the missing mask")
        X[mask] = np.nan
    elif not allow_missing and not np.isfinite(X).all():
        raise DataError("non-finite feature value")
    elif np.isinf(X).any():
        raise DataError("infinite feature value")
    return np.ascontiguousarray(X)


class FeatureMatrix:
    """Feature matrix (NaN = missing) with cached per-feature sort orders.

    Row and column subsets derive their sort orders by filtering the parent's,
    so a matrix is sorted at most once however many folds are cut from it.
    """

    def __init__(self, X, mask=None, feature_names: Sequence[str] | None = None):
        if isinstance(X, TabularSet):
            feature_names = X.columns if feature_names is None else feature_names
        self.X = _as_matrix(X, mask)
        self.feature_names = tuple(feature_names) if feature_names is not None else ()
        self._sorted = None

    @property
    def shape(self):
        return self.X.shape

    def _build(self):
        X = self.X
        n, F = X.shape
        miss = np.isnan(X)
        n_present = n - miss.sum(axis=0)
        order = np.argsort(np.ascontiguousarray(X.T), axis=1, kind="stable")  # NaN sort last
        srows = [order[f, : n_present[f]] for f in range(F)]
        svals = [X[srows[f], f] for f in range(F)]
        mrows = [np.flatnonzero(miss[:, f]) for f in range(F)]
        self._set(srows, svals, mrows)

    def _set(self, srows, svals, mrows):
        ns = np.array([len(a) for a in srows], dtype=np.int64)
        nm = np.array([len(a) for a in mrows], dtype=np.int64)
        self.sstart = np.concatenate([[0], np.cumsum(ns)[:-1]]).astype(np.int64)
        self.sstop = self.sstart + ns
        self.mstart = np.concatenate([[0], np.cumsum(nm)[:-1]]).astype(np.int64)
        self.mstop = self.mstart + nm
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
        self.srows = cat(srows, np.int64)
        self.svals = cat(svals, np.float64)
        self.mrows = cat(mrows, np.int64)
        self._sorted = True

    def _segments(self):
        F = self.X.shape[1]
        return ([self.srows[self.sstart[f]:self.sstop[f]] for f in range(F)],
                [self.svals[self.sstart[f]:self.sstop[f]] for f in range(F)],
                [self.mrows[self.mstart[f]:self.mstop[f]] for f in range(F)])

    def presorted(self):
        if self._sorted is None:
            self._build()
        return (self.srows, self.svals, self.sstart, self.sstop, self.mrows, self.mstart, self.mstop)

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        out = FeatureMatrix.__new__(FeatureMatrix)
        out.X = np.ascontiguousarray(self.X[rows])
        out.feature_names = self.feature_names
        out._sorted = None
        if self._sorted is not None and len(np.unique(rows)) == len(rows):
            newid = np.full(self.X.shape[0], -1, dtype=np.int64)
            newid[rows] = np.arange(len(rows))
            srows, svals, mrows = self._segments()
            keep_s = [newid[s] >= 0 for s in srows]
            out._set([newid[s[k]] for s, k in zip(srows, keep_s)],
                     [v[k] for v, k in zip(svals, keep_s)],
                     [np.sort(newid[m[newid[m] >= 0]]) for m in mrows])
        return out

    def select(self, columns) -> "FeatureMatrix":
        """Column subset by index or by name."""
        idx = [self.feature_names.index(c) if isinstance(c, str) else int(c) for c in columns]
        out = FeatureMatrix.__new__(FeatureMatrix)
        out.X = np.ascontiguousarray(self.X[:, idx])
        out.feature_names = tuple(self.feature_names[i] for i in idx) if self.feature_names else ()
        out._sorted = None
        if self._sorted is not None:
            srows, svals, mrows = self._segments()
            out._set([srows[i] for i in idx], [svals[i] for i in idx], [mrows[i] for i in idx])
        return out


def logistic_grad_hess(margin, y, weight):
    p = expit(margin)
    return weight * (p - y), weight * p * (1.0 - p)


def fit(X, y, params: GbtParams = GbtParams(), mask=None,
        feature_names: Sequence[str] | None = None, callback=None) -> GbtModel:
    """Fit a boosted ensemble.

    ``X`` may be a FeatureMatrix, a TabularSet (its mask is used) or an
    array; masked cells (``mask`` True, or NaN when no mask is given) are
    treated as missing.
    ``callback(round, margin)`` is called after each tree with the training
    margins.
    """
    params.validate()
    if isinstance(X, TabularSet):
        y = X.labels if y is None else y
    fm = X if isinstance(X, FeatureMatrix) else FeatureMatrix(X, mask, feature_names)
    if feature_names is None:
        feature_names = fm.feature_names or None
    X = fm.X
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != X.shape[0]:
        raise DataError("X and y lengths differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    n_pos = y.sum()
    if n_pos == 0 or n_pos == len(y):
        raise DataError("training labels contain a single class")
    n, F = X.shape
    if F == 0:
        raise DataError("no feature columns")
    prior = n_pos / n
    base = math.log(prior / (1.0 - prior))
    weight = np.where(y == 1.0, params.pos_weight, 1.0)
    presorted = fm.presorted()
    rng = np.random.default_rng(params.seed)
    m = max(1, int(round(params.colsample * F)))
    margin = np.full(n, base)
    trees = []
    for t in range(params.n_trees):
        if m < F:
            feats = np.sort(rng.choice(F, size=m, replace=False)).astype(np.int64)
        else:
            feats = np.arange(F, dtype=np.int64)
        g, h = logistic_grad_hess(margin, y, weight)
        out = K.grow_tree(X, g, h, feats, *presorted, int(params.max_depth), float(params.reg_lambda),
                          float(params.gamma), float(params.min_child_weight), float(params.learning_rate))
        trees.append(Tree(*out[:8]))
        margin = margin + out[8]
        if callback is not None:
            callback(t, margin)
    names = tuple(feature_names) if feature_names is not None else ()
    return GbtModel(trees, base, F, names, params)


def training_loss(margin, y, weight=None) -> float:
    """Weighted logistic loss (sum) at the given margins."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if weight is None else weight
    return float(np.sum(w * (np.logaddexp(0.0, margin) - y * margin)))
