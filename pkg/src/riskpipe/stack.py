"""Stacked models: the driver stack, the journey model and the combined classifier.

The driver stack trains one GBT per driver feature set (exposure, behavior)
and a logistic meta-model on their out-of-fold scores. The combined
classifier feeds a journey score and a driver score to a small meta GBT,
again on out-of-fold scores. Both refit their base models on all training
data for prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logit

from .core import (BEHAVIOR_COLUMNS, EXPOSURE_COLUMNS, ConfigError, DataError, TabularSet,
                   from_plain, to_plain)
from .evaluate import FoldAssignment, derive_seed, grouped_stratified_kfold, select_features
from .gbt import FeatureMatrix, GbtModel, GbtParams, fit
from .linear import LinearModel, fit_logistic
from .sample import SAMPLERS, LabeledSet, resample
from .widen import WidenConfig, widen

log = logging.getLogger(__name__)

Audit = Callable[[str, np.ndarray], None]

DRIVER_GBT = GbtParams(n_trees=30, max_depth=1, learning_rate=0.1, reg_lambda=5.0, colsample=1.0, min_child_weight=3.0)
JOURNEY_SELECT_GBT = GbtParams(n_trees=10, max_depth=2, learning_rate=0.3, colsample=0.2, min_child_weight=1.0)
JOURNEY_GBT = GbtParams(n_trees=40, max_depth=3, learning_rate=0.1, colsample=0.8, min_child_weight=1.0)
META_GBT = GbtParams(n_trees=20, max_depth=2, learning_rate=0.1, colsample=1.0, min_child_weight=5.0)


def _note(audit: Audit | None, stage: str, groups) -> None:
    if audit is not None:
        audit(stage, groups)


def _both_classes(y, where: str) -> None:
    n1 = int(np.sum(y))
    if n1 == 0 or n1 == len(y):
        raise DataError(f"{where}: training labels contain a single class; use fewer folds or more data "
                        "so every training partition holds both classes")


@dataclass(frozen=True)
class FeatureSplit:
    """Driver feature sets; ``journey`` lists raw journey columns (empty = all)."""

    exposure: tuple[str, ...] = EXPOSURE_COLUMNS
    behavior: tuple[str, ...] = BEHAVIOR_COLUMNS
    journey: tuple[str, ...] = ()

    def validate(self, driver_columns=None) -> None:
        overlap = set(self.exposure) & set(self.behavior)
        if overlap:
            raise ConfigError(f"exposure and behavior sets overlap: {sorted(overlap)}")
        if driver_columns is not None:
            missing = set(self.exposure) | set(self.behavior)
            missing -= set(driver_columns)
            if missing:
                raise DataError(f"driver table lacks columns {sorted(missing)}")
            uncovered = set(driver_columns) - set(self.exposure) - set(self.behavior)
            if uncovered:
                raise ConfigError(f"columns in neither feature set: {sorted(uncovered)}")


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "smote+tomek"
    ratio: float = 1 / 3
    k: int = 5
    metric: str = "euclidean"

    def validate(self) -> None:
        if self.method not in SAMPLERS:
            raise ConfigError(f"unknown sampling method {self.method!r}; choose from {SAMPLERS}")

    def apply(self, X: np.ndarray, y: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Resampled (X, y, origin); origin is the source row or -1 for synthetic rows."""
        if self.method == "none":
            return X, y, np.arange(len(y))
        data = LabeledSet(X, y, self.metric)
        k = self.k
        n_min = min(data.counts())
        if "smote" in self.method and n_min <= k:
            # small training partitions: use every other minority point as a neighbour
            k = max(1, n_min - 1)
            log.warning("SMOTE k reduced from %d to %d: only %d minority rows", self.k, k, n_min)
        out = resample(data, self.method, self.ratio, k, seed)
        return out.X, out.y, out.origin


NO_SAMPLER = SamplerConfig(method="none")


@dataclass(frozen=True)
class BaseSpec:
    """A base GBT: its name, driver columns, parameters and training-set sampler."""

    name: str
    columns: tuple[str, ...]
    params: GbtParams = DRIVER_GBT
    sampler: SamplerConfig = NO_SAMPLER


def default_bases(split: FeatureSplit = FeatureSplit()) -> tuple[BaseSpec, ...]:
    return (BaseSpec("exposure", tuple(split.exposure), DRIVER_GBT, NO_SAMPLER),
            BaseSpec("behavior", tuple(split.behavior), DRIVER_GBT, SamplerConfig()))


@dataclass(frozen=True)
class DriverStackConfig:
    """``meta_input`` is ``logit`` (log-odds of base scores) or ``rank`` (their empirical CDF)."""

    bases: tuple[BaseSpec, ...] = field(default_factory=default_bases)
    meta_l2: float = 1.0
    inner_k: int = 5
    meta_input: str = "logit"

    def validate(self) -> None:
        if not self.bases:
            raise ConfigError("a stack needs at least one base model")
        names = [b.name for b in self.bases]
        if len(set(names)) != len(names):
            raise ConfigError("base model names must be unique")
        for b in self.bases:
            b.params.validate()
            b.sampler.validate()
        if self.meta_input not in ("logit", "rank"):
            raise ConfigError("meta_input must be 'logit' or 'rank'")
        if self.inner_k < 2:
            raise ConfigError("inner_k must be >= 2")
        if self.meta_l2 < 0:
            raise ConfigError("meta_l2 must be >= 0")

    @classmethod
    def from_split(cls, split: FeatureSplit, params: GbtParams = DRIVER_GBT, sampler: SamplerConfig = SamplerConfig(),
                   **kw) -> "DriverStackConfig":
        split.validate()
        return cls((BaseSpec("exposure", tuple(split.exposure), params, NO_SAMPLER),
                    BaseSpec("behavior", tuple(split.behavior), params, sampler)), **kw)


# ---------------------------------------------------------------- base models

@dataclass(eq=False)
class BaseModel:
    spec: BaseSpec
    model: GbtModel

    def predict(self, drivers: TabularSet) -> np.ndarray:
        return self.model.predict_proba(drivers.matrix(self.spec.columns))


def fit_base(spec: BaseSpec, drivers: TabularSet, seed: int, audit: Audit | None = None) -> BaseModel:
    """Resample the training rows (if configured) and fit the base GBT."""
    seed = derive_seed(seed, "base", spec.name)
    X = drivers.matrix(spec.columns)
    y = drivers.labels
    _both_classes(y, f"base {spec.name!r}")
    if spec.sampler.method != "none":
        if np.isnan(X).any():
            raise DataError(f"base {spec.name!r}: resampling needs fully observed columns")
        X, y, origin = spec.sampler.apply(X, y, derive_seed(seed, "sampler"))
        _note(audit, f"resample:{spec.name}", drivers.groups)
        groups_seen = drivers.groups[origin[origin >= 0]]
    else:
        groups_seen = drivers.groups
    _note(audit, f"fit:{spec.name}", groups_seen)
    model = fit(X, y, spec.params.replace(seed=derive_seed(seed, "gbt")), feature_names=spec.columns)
    return BaseModel(spec, model)


# ---------------------------------------------------------------- driver stack

def _to_meta(S: np.ndarray, mode: str, reference: np.ndarray | None) -> np.ndarray:
    if mode == "rank":
        return np.column_stack([np.searchsorted(reference[:, j], S[:, j], side="right") / len(reference)
                                for j in range(S.shape[1])])
    return logit(np.clip(S, 1e-12, 1 - 1e-12))


@dataclass(eq=False)
class StackModel:
    """Base models plus a logistic meta-model over their scores."""

    config: DriverStackConfig
    bases: list[BaseModel]
    meta: LinearModel
    reference: np.ndarray | None = None
    oof: np.ndarray | None = None

    @property
    def base_names(self) -> list[str]:
        return [b.spec.name for b in self.bases]

    @property
    def input_columns(self) -> tuple[str, ...]:
        cols: list[str] = []
        for b in self.bases:
            cols += [c for c in b.spec.columns if c not in cols]
        return tuple(cols)

    def _table(self, rows) -> TabularSet:
        if isinstance(rows, TabularSet):
            return rows
        X = np.asarray(rows, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        cols = self.input_columns
        if X.ndim != 2 or X.shape[1] != len(cols):
            raise DataError(f"expected {len(cols)} columns {cols}, got shape {X.shape}")
        n = len(X)
        return TabularSet(cols, np.nan_to_num(X), np.isnan(X), np.arange(n), np.zeros(n, np.int64),
                          np.zeros(n, np.int8))

    def base_scores(self, rows) -> np.ndarray:
        data = self._table(rows)
        return np.column_stack([b.predict(data) for b in self.bases])

    def base_predict(self, rows) -> dict[str, np.ndarray]:
        S = self.base_scores(rows)
        return {n: S[:, j] for j, n in enumerate(self.base_names)}

    def predict(self, rows) -> np.ndarray:
        return self.meta.predict_proba(_to_meta(self.base_scores(rows), self.config.meta_input, self.reference))

    def to_dict(self) -> dict:
        return {
            "kind": "driver-stack",
            "config": to_plain(self.config),
            "bases": [b.model.to_dict() for b in self.bases],
            "meta": self.meta.to_dict(),
            "reference": None if self.reference is None else to_plain(self.reference),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackModel":
        if d.get("kind") != "driver-stack":
            raise DataError(f"not a driver stack: kind={d.get('kind')!r}")
        cfg = from_plain(DriverStackConfig, d["config"])
        bases = [BaseModel(s, GbtModel.from_dict(m)) for s, m in zip(cfg.bases, d["bases"])]
        ref = None if d["reference"] is None else np.array(d["reference"], dtype=np.float64)
        return cls(cfg, bases, LinearModel.from_dict(d["meta"]), ref)


def fit_driver_stack(drivers: TabularSet, config: DriverStackConfig = DriverStackConfig(), seed: int = 0,
                     audit: Audit | None = None) -> StackModel:
    """Fit the driver stack on one row per driver.

    Meta features are out-of-fold base scores from an inner grouped
    stratified split; resampling happens inside each inner training
    partition only. Bases are then refit on every row.
    """
    config.validate()
    _both_classes(drivers.labels, "driver stack")
    for b in config.bases:
        for c in b.columns:
            drivers.col_index(c)
    folds = grouped_stratified_kfold(drivers.groups, drivers.labels, config.inner_k, derive_seed(seed, "inner"))
    S = np.empty((drivers.n_rows, len(config.bases)))
    for i in range(config.inner_k):
        tr, te = folds.split(drivers.groups, i)
        train = drivers.take(tr)
        try:
            _both_classes(train.labels, f"inner fold {i}")
        except DataError as exc:
            raise DataError(f"driver stack {exc}") from None
        test = drivers.take(te)
        for j, spec in enumerate(config.bases):
            S[te, j] = fit_base(spec, train, derive_seed(seed, "inner", i), audit).predict(test)
    reference = np.sort(S, axis=0) if config.meta_input == "rank" else None
    M = _to_meta(S, config.meta_input, reference)
    _note(audit, "fit:meta", drivers.groups)
    meta = fit_logistic(M, drivers.labels, l2=config.meta_l2, feature_names=[b.name for b in config.bases])
    bases = [fit_base(spec, drivers, seed, audit) for spec in config.bases]
    return StackModel(config, bases, meta, reference, S)


# ---------------------------------------------------------------- journey model

@dataclass(frozen=True)
class JourneyConfig:
    """Widen raw journey columns, keep the ``top_n`` by mean gain (0 keeps all), fit a GBT."""

    widen: WidenConfig = WidenConfig()
    columns: tuple[str, ...] = ()
    select_params: GbtParams = JOURNEY_SELECT_GBT
    top_n: int = 24
    params: GbtParams = JOURNEY_GBT

    def validate(self) -> None:
        self.widen.validate()
        self.params.validate()
        if self.top_n < 0:
            raise ConfigError("top_n must be >= 0")
        if self.top_n:
            self.select_params.validate()


def widen_journeys(journeys: TabularSet, config: JourneyConfig) -> TabularSet:
    raw = journeys.select(config.columns) if config.columns else journeys
    return widen(raw, config.widen)


@dataclass(eq=False)
class JourneyModel:
    config: JourneyConfig
    features: tuple[str, ...]
    model: GbtModel

    def predict(self, journeys) -> np.ndarray:
        if not isinstance(journeys, TabularSet):
            journeys = journeys.journeys
        return self.predict_wide(widen_journeys(journeys, self.config))

    def predict_wide(self, wide) -> np.ndarray:
        if isinstance(wide, FeatureMatrix):
            return self.model.predict_proba(wide.select(self.features).X)
        return self.model.predict_proba(wide.matrix(self.features))

    def to_dict(self) -> dict:
        return {"kind": "journey", "config": to_plain(self.config), "features": list(self.features),
                "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "JourneyModel":
        if d.get("kind") != "journey":
            raise DataError(f"not a journey model: kind={d.get('kind')!r}")
        return cls(from_plain(JourneyConfig, d["config"]), tuple(d["features"]), GbtModel.from_dict(d["model"]))


def fit_journey_model(journeys: TabularSet, config: JourneyConfig = JourneyConfig(), seed: int = 0,
                      wide: FeatureMatrix | None = None, audit: Audit | None = None) -> JourneyModel:
    """Fit on ``journeys``; ``wide`` may carry their already widened features (same row order)."""
    config.validate()
    seed = derive_seed(seed, "journey")
    y = journeys.labels
    _both_classes(y, "journey model")
    _note(audit, "widen", journeys.groups)
    if wide is None:
        wide = FeatureMatrix(widen_journeys(journeys, config))
    if wide.shape[0] != journeys.n_rows:
        raise DataError("widened matrix does not match the journey rows")
    names = wide.feature_names
    if config.top_n and config.top_n < len(names):
        _note(audit, "select", journeys.groups)
        keep = select_features(wide, config.select_params.replace(seed=derive_seed(seed, "select")),
                               config.top_n, labels=y)
        keep = [n for n in names if n in set(keep)]
    else:
        keep = list(names)
    _note(audit, "fit:journey", journeys.groups)
    model = fit(wide.select(keep), y, config.params.replace(seed=derive_seed(seed, "gbt")))
    return JourneyModel(config, tuple(keep), model)


# ---------------------------------------------------------------- combined

@dataclass(frozen=True)
class CombinedConfig:
    journey: JourneyConfig = JourneyConfig()
    driver: DriverStackConfig = DriverStackConfig()
    meta_params: GbtParams = META_GBT
    inner_k: int = 3

    def validate(self) -> None:
        self.journey.validate()
        self.driver.validate()
        self.meta_params.validate()
        if self.inner_k < 2:
            raise ConfigError("inner_k must be >= 2")


META_FEATURES = ("driver_score", "journey_score")


def _driver_lookup(drivers: TabularSet, scores: np.ndarray, groups: np.ndarray) -> np.ndarray:
    order = np.argsort(drivers.groups, kind="stable")
    sg = drivers.groups[order]
    pos = np.minimum(np.searchsorted(sg, groups), len(sg) - 1)
    if len(groups) and (len(sg) == 0 or not np.array_equal(sg[pos], groups)):
        bad = sorted(set(np.unique(groups).tolist()) - set(sg.tolist()))
        raise DataError(f"journey group ids without a driver row: {bad[:10]}")
    return scores[order][pos]


@dataclass(eq=False)
class CombinedModel:
    """Meta GBT over (driver stack score, journey score) for every journey."""

    config: CombinedConfig
    journey: JourneyModel
    driver: StackModel
    meta: GbtModel

    def _scores(self, data, wide=None) -> tuple[np.ndarray, np.ndarray]:
        journeys, drivers = data.journeys, data.drivers
        js = self.journey.predict(journeys) if wide is None else self.journey.predict_wide(wide)
        ds = _driver_lookup(drivers, self.driver.predict(drivers), journeys.groups)
        return ds, js

    def base_predict(self, data) -> dict[str, np.ndarray]:
        ds, js = self._scores(data)
        return {"driver": ds, "journey": js}

    def predict(self, data) -> np.ndarray:
        ds, js = self._scores(data)
        return self.meta.predict_proba(np.column_stack([ds, js]))

    def to_dict(self) -> dict:
        return {"kind": "combined", "config": to_plain(self.config), "journey": self.journey.to_dict(),
                "driver": self.driver.to_dict(), "meta": self.meta.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CombinedModel":
        if d.get("kind") != "combined":
            raise DataError(f"not a combined model: kind={d.get('kind')!r}")
        return cls(from_plain(CombinedConfig, d["config"]), JourneyModel.from_dict(d["journey"]),
                   StackModel.from_dict(d["driver"]), GbtModel.from_dict(d["meta"]))


@dataclass(frozen=True, eq=False)
class TelematicsData:
    journeys: TabularSet
    drivers: TabularSet | None = None


def fit_combined(journeys: TabularSet, drivers: TabularSet, config: CombinedConfig = CombinedConfig(),
                 seed: int = 0, audit: Audit | None = None) -> CombinedModel:
    """Fit the combined journey classifier.

    Meta-training scores are out-of-fold: inner folds group journeys by
    driver, and for each inner fold both the journey model and the driver
    stack are trained on the other folds' drivers only.
    """
    config.validate()
    _both_classes(journeys.labels, "combined model")
    wide = FeatureMatrix(widen_journeys(journeys, config.journey))
    _note(audit, "widen", journeys.groups)
    folds = grouped_stratified_kfold(journeys.groups, journeys.labels, config.inner_k, derive_seed(seed, "inner"))
    d_fold = folds.fold_of(drivers.groups) if drivers.n_rows else np.zeros(0, np.int64)
    js = np.empty(journeys.n_rows)
    ds = np.empty(journeys.n_rows)
    for i in range(config.inner_k):
        tr, te = folds.split(journeys.groups, i)
        inner_seed = derive_seed(seed, "inner", i)
        try:
            jm = fit_journey_model(journeys.take(tr), config.journey, inner_seed, wide.take(tr), audit)
            d_train = drivers.take(np.flatnonzero(d_fold != i))
            sm = fit_driver_stack(d_train, config.driver, derive_seed(inner_seed, "driver"), audit)
        except DataError as exc:
            raise DataError(f"combined inner fold {i}: {exc}") from None
        js[te] = jm.predict_wide(wide.take(te))
        test_drivers = drivers.take(np.flatnonzero(d_fold == i))
        ds[te] = _driver_lookup(test_drivers, sm.predict(test_drivers), journeys.groups[te])
    _note(audit, "fit:meta", journeys.groups)
    meta = fit(np.column_stack([ds, js]), journeys.labels,
               config.meta_params.replace(seed=derive_seed(seed, "meta")), feature_names=META_FEATURES)
    jm = fit_journey_model(journeys, config.journey, seed, wide, audit)
    sm = fit_driver_stack(drivers, config.driver, derive_seed(seed, "driver"), audit)
    return CombinedModel(config, jm, sm, meta)


# ---------------------------------------------------------------- pipelines

@dataclass(eq=False)
class ColumnModel:
    """A single model bound to named driver columns."""

    columns: tuple[str, ...]
    model: object

    def predict(self, drivers: TabularSet) -> np.ndarray:
        return self.model.predict_proba(drivers.matrix(self.columns))


@dataclass(frozen=True)
class LogisticPipeline:
    columns: tuple[str, ...] = BEHAVIOR_COLUMNS + EXPOSURE_COLUMNS
    l2: float = 1.0
    class_weights: str = "balanced"
    name: str = "logistic"
    task = "driver"

    def fit(self, train: TabularSet, seed: int, audit: Audit | None = None) -> ColumnModel:
        _both_classes(train.labels, self.name)
        _note(audit, "fit:logistic", train.groups)
        return ColumnModel(self.columns, fit_logistic(train.matrix(self.columns), train.labels, l2=self.l2,
                                                      class_weights=self.class_weights,
                                                      feature_names=self.columns))

    def describe(self) -> dict:
        return {"pipeline": self.name, **to_plain(self)}


@dataclass(frozen=True)
class GbtPipeline:
    base: BaseSpec = BaseSpec("all", BEHAVIOR_COLUMNS + EXPOSURE_COLUMNS)
    name: str = "gbt"
    task = "driver"

    def fit(self, train: TabularSet, seed: int, audit: Audit | None = None) -> BaseModel:
        return fit_base(self.base, train, seed, audit)

    def describe(self) -> dict:
        return {"pipeline": self.name, **to_plain(self)}


@dataclass(frozen=True)
class DriverStackPipeline:
    config: DriverStackConfig = DriverStackConfig()
    name: str = "driver-stack"
    task = "driver"

    def fit(self, train: TabularSet, seed: int, audit: Audit | None = None) -> StackModel:
        return fit_driver_stack(train, self.config, seed, audit)

    def describe(self) -> dict:
        return {"pipeline": self.name, **to_plain(self)}


@dataclass(frozen=True)
class JourneyPipeline:
    config: JourneyConfig = JourneyConfig()
    name: str = "journey-gbt"
    task = "journey"

    def fit(self, train, seed: int, audit: Audit | None = None) -> JourneyModel:
        journeys = train if isinstance(train, TabularSet) else train.journeys
        return fit_journey_model(journeys, self.config, seed, audit=audit)

    def describe(self) -> dict:
        return {"pipeline": self.name, **to_plain(self)}


@dataclass(frozen=True)
class CombinedPipeline:
    config: CombinedConfig = CombinedConfig()
    name: str = "combined"
    task = "journey"

    def fit(self, train, seed: int, audit: Audit | None = None) -> CombinedModel:
        if isinstance(train, TabularSet) or train.drivers is None:
            raise DataError("the combined pipeline needs both journey and driver tables")
        return fit_combined(train.journeys, train.drivers, self.config, seed, audit)

    def describe(self) -> dict:
        return {"pipeline": self.name, **to_plain(self)}


PIPELINES = ("logistic", "gbt", "gbt-exposure", "gbt-behavior", "driver-stack", "journey-gbt", "combined")


def make_pipeline(name: str, gbt: GbtParams | None = None, sampler: SamplerConfig | None = None,
                  split: FeatureSplit = FeatureSplit(), journey: JourneyConfig | None = None,
                  meta_l2: float = 1.0, inner_k: int | None = None):
    """Build a pipeline by name; ``gbt`` and ``sampler`` override the driver-level defaults."""
    params = gbt or DRIVER_GBT
    smp = sampler or SamplerConfig()
    driver_cols = tuple(split.behavior) + tuple(split.exposure)
    if name == "logistic":
        return LogisticPipeline(driver_cols, meta_l2)
    if name == "gbt":
        return GbtPipeline(BaseSpec("all", driver_cols, params, NO_SAMPLER), name)
    if name == "gbt-exposure":
        return GbtPipeline(BaseSpec("exposure", tuple(split.exposure), params, NO_SAMPLER), name)
    if name == "gbt-behavior":
        return GbtPipeline(BaseSpec("behavior", tuple(split.behavior), params, smp), name)
    stack_kw = {"meta_l2": meta_l2} if inner_k is None else {"meta_l2": meta_l2, "inner_k": inner_k}
    if name in ("driver-stack", "stack"):
        return DriverStackPipeline(DriverStackConfig.from_split(split, params, smp, **stack_kw))
    jcfg = journey or JourneyConfig(columns=tuple(split.journey))
    if name == "journey-gbt":
        return JourneyPipeline(jcfg)
    if name == "combined":
        kw = {} if inner_k is None else {"inner_k": inner_k}
        return CombinedPipeline(CombinedConfig(jcfg, DriverStackConfig.from_split(split, params, smp,
                                                                                  meta_l2=meta_l2), **kw))
    raise ConfigError(f"unknown pipeline {name!r}; choose from {PIPELINES}")


def split_data(data, task: str, folds: FoldAssignment, i: int):
    """(train, test) views of ``data`` for fold ``i``."""
    if task == "driver" and not isinstance(data, TabularSet):
        data = data.drivers
    if isinstance(data, TabularSet):
        tr, te = folds.split(data.groups, i)
        return data.take(tr), data.take(te)
    tr, te = folds.split(data.journeys.groups, i)
    if data.drivers is None:
        return TelematicsData(data.journeys.take(tr)), TelematicsData(data.journeys.take(te))
    dtr, dte = folds.split(data.drivers.groups, i)
    return (TelematicsData(data.journeys.take(tr), data.drivers.take(dtr)),
            TelematicsData(data.journeys.take(te), data.drivers.take(dte)))
