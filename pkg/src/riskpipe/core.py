"""Dataset representation, CSV ingestion, labels and synthetic generators."""

from __future__ import annotations

import csv
import math
from collections import abc
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, get_args, get_origin, get_type_hints

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit


class DataError(ValueError):
    """Input data violates a dataset contract."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class IntegrityError(DataError):
    pass


class ConfigError(ValueError):
    """Invalid configuration value (a usage error rather than a data error)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularSet:
    """Columnar numeric table with an explicit missing mask.

    ``mask[i, j]`` is True when cell ``(i, j)`` is missing. Masked cells are
    stored as 0.0 and must never be read as data. Every row carries a group id
    (driver), an order key (journey index within the driver) and a binary label.
    """

    columns: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    groups: np.ndarray
    order: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        columns = tuple(str(c) for c in self.columns)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(0, len(columns))
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise DataError(f"mask shape {mask.shape} != values shape {values.shape}")
        if values.ndim != 2 or values.shape[1] != len(columns):
            raise DataError(f"values shape {values.shape} does not match {len(columns)} columns")
        if len(set(columns)) != len(columns):
            raise DataError("duplicate column names")
        n = values.shape[0]
        groups = np.asarray(self.groups, dtype=np.int64).reshape(-1)
        order = np.asarray(self.order, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if not (len(groups) == len(order) == len(labels) == n):
            raise DataError("groups, order and labels must have one entry per row")
        if n and not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        values = np.where(mask, 0.0, values)
        if not np.isfinite(values).all():
            raise DataError("unmasked cells must be finite")
        if n:
            idx = np.argsort(groups, kind="stable")
            same = groups[idx][1:] == groups[idx][:-1]
            step = np.diff(order[idx])
            bad = same & (step <= 0)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                g = int(groups[idx][k])
                if step[k] == 0:
                    raise IntegrityError(f"duplicate order key {int(order[idx][k])} for group {g}")
                raise IntegrityError(f"order keys not strictly increasing for group {g}")
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "groups", _frozen(groups))
        object.__setattr__(self, "order", _frozen(order))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int8)))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    def col_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise DataError(f"unknown column {name!r}") from None

    def matrix(self, columns: Sequence[str] | None = None) -> np.ndarray:
        """Feature matrix with NaN in masked cells."""
        if columns is None:
            v, m = self.values, self.mask
        else:
            idx = [self.col_index(c) for c in columns]
            v, m = self.values[:, idx], self.mask[:, idx]
        return np.where(m, np.nan, v)

    def select(self, columns: Sequence[str]) -> "TabularSet":
        idx = [self.col_index(c) for c in columns]
        return TabularSet(tuple(columns), self.values[:, idx], self.mask[:, idx],
                          self.groups, self.order, self.labels)

    def take(self, rows) -> "TabularSet":
        rows = np.asarray(rows)
        return TabularSet(self.columns, self.values[rows], self.mask[rows],
                          self.groups[rows], self.order[rows], self.labels[rows])

    def with_labels(self, labels) -> "TabularSet":
        return TabularSet(self.columns, self.values, self.mask, self.groups, self.order, labels)

    def with_columns(self, names: Sequence[str], values, mask) -> "TabularSet":
        values = np.asarray(values, dtype=np.float64).reshape(self.n_rows, len(names))
        mask = np.asarray(mask, dtype=bool).reshape(self.n_rows, len(names))
        return TabularSet(self.columns + tuple(names),
                          np.hstack([self.values, values]), np.hstack([self.mask, mask]),
                          self.groups, self.order, self.labels)

    def group_ids(self) -> np.ndarray:
        return np.unique(self.groups)

    def predecessor(self, lag: int = 1) -> np.ndarray:
        """Row index of the ``lag``-th preceding journey of the same group, -1 if none."""
        idx = np.lexsort((self.order, self.groups))
        g = self.groups[idx]
        prev = np.full(self.n_rows, -1, dtype=np.int64)
        if lag <= 0:
            return np.arange(self.n_rows)
        if self.n_rows > lag:
            ok = g[lag:] == g[:-lag]
            prev[idx[lag:][ok]] = idx[:-lag][ok]
        return prev

    def successor(self) -> np.ndarray:
        idx = np.lexsort((self.order, self.groups))
        g = self.groups[idx]
        nxt = np.full(self.n_rows, -1, dtype=np.int64)
        if self.n_rows > 1:
            ok = g[1:] == g[:-1]
            nxt[idx[:-1][ok]] = idx[1:][ok]
        return nxt

    def equals(self, other: "TabularSet") -> bool:
        return (self.columns == other.columns
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.groups, other.groups)
                and np.array_equal(self.order, other.order)
                and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class Schema:
    """Column roles of a CSV file. ``order=None`` means one row per group."""

    group: str = "driver_id"
    order: str | None = "journey_seq"
    label: str = "claim"
    features: tuple[str, ...] | None = None


JOURNEY_SCHEMA = Schema()
DRIVER_SCHEMA = Schema(order=None)


def _parse_int(text: str, row: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"expected integer, got {text!r}", row, column) from None


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"malformed numeric field {text!r}", row, column) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite field {text!r}; use an empty field for missing", row, column)
    return v


def load_csv(path, schema: Schema = JOURNEY_SCHEMA) -> TabularSet:
    """Read a CSV into a TabularSet. Empty fields become masked cells."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("missing header row") from None
        required = [schema.group, schema.label] + ([schema.order] if schema.order else [])
        for name in required:
            if name not in header:
                raise ParseError(f"required column {name!r} not in header")
        roles = set(required)
        if schema.features is None:
            features = [h for h in header if h not in roles]
        else:
            features = list(schema.features)
            missing = [f for f in features if f not in header]
            if missing:
                raise ParseError(f"feature columns {missing} not in header")
        pos = {h: i for i, h in enumerate(header)}
        fidx = [pos[f] for f in features]
        groups, order, labels, vals, mask = [], [], [], [], []
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", rownum)
            groups.append(_parse_int(rec[pos[schema.group]], rownum, schema.group))
            if schema.order:
                order.append(_parse_int(rec[pos[schema.order]], rownum, schema.order))
            lab = _parse_int(rec[pos[schema.label]], rownum, schema.label)
            if lab not in (0, 1):
                raise ParseError(f"label must be 0 or 1, got {lab}", rownum, schema.label)
            labels.append(lab)
            row_v, row_m = [], []
            for i, name in zip(fidx, features):
                text = rec[i].strip()
                if text == "":
                    row_v.append(0.0)
                    row_m.append(True)
                else:
                    row_v.append(_parse_float(text, rownum, name))
                    row_m.append(False)
            vals.append(row_v)
            mask.append(row_m)
    n = len(groups)
    if not schema.order:
        order = [0] * n
    shape = (n, len(features))
    return TabularSet(tuple(features),
                      np.array(vals, dtype=np.float64).reshape(shape),
                      np.array(mask, dtype=bool).reshape(shape),
                      np.array(groups, dtype=np.int64),
                      np.array(order, dtype=np.int64),
                      np.array(labels, dtype=np.int8))


def save_csv(data: TabularSet, path, schema: Schema = JOURNEY_SCHEMA) -> None:
    header = [schema.group] + ([schema.order] if schema.order else []) + list(data.columns) + [schema.label]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n_rows):
            rec = [str(int(data.groups[i]))]
            if schema.order:
                rec.append(str(int(data.order[i])))
            rec.extend("" if m else repr(float(v)) for v, m in zip(data.values[i], data.mask[i]))
            rec.append(str(int(data.labels[i])))
            w.writerow(rec)


def load_claims(path) -> list[tuple[int, int]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"driver_id", "journey_seq"} <= set(reader.fieldnames):
            raise ParseError("claims file needs columns driver_id,journey_seq")
        return [(_parse_int(r["driver_id"], n, "driver_id"), _parse_int(r["journey_seq"], n, "journey_seq"))
                for n, r in enumerate(reader, start=2)]


def save_claims(claims: Iterable[tuple[int, int]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["driver_id", "journey_seq"])
        for g, t in claims:
            w.writerow([int(g), int(t)])


# ---------------------------------------------------------------------------
# labels


def _claim_rows(data: TabularSet, claims) -> np.ndarray:
    index = {(int(g), int(t)): i for i, (g, t) in enumerate(zip(data.groups, data.order))}
    rows = []
    for g, t in claims:
        key = (int(g), int(t))
        if key not in index:
            raise DataError(f"claim event {key} does not reference an existing journey")
        rows.append(index[key])
    return np.array(rows, dtype=np.int64)


def label_journeys(data: TabularSet, claims) -> np.ndarray:
    """Label a journey 1 iff the driver's next recorded journey had a claim."""
    claimed = np.zeros(data.n_rows, dtype=bool)
    claimed[_claim_rows(data, claims)] = True
    nxt = data.successor()
    labels = np.zeros(data.n_rows, dtype=np.int8)
    has_next = nxt >= 0
    labels[has_next] = claimed[nxt[has_next]]
    return labels


def label_drivers(data: TabularSet, claims) -> dict[int, int]:
    rows = _claim_rows(data, claims)
    out = {int(g): 0 for g in data.group_ids()}
    for g in data.groups[rows]:
        out[int(g)] = 1
    return out


# ---------------------------------------------------------------------------
# synthetic telematics

# (mean, stdev) of driver level scores and journey level scores/exposures
DRIVER_SCORES = {
    "overall": (80.61, 5.28),
    "smooth_driving": (71.30, 8.54),
    "mobile_distraction": (86.33, 9.14),
    "time_of_day": (75.53, 3.41),
    "fatigue": (83.59, 9.17),
    "speed": (79.90, 5.18),
}
JOURNEY_SCORES = {
    "journey": (80.04, 9.19),
    "smooth_driving": (68.92, 12.85),
    "mobile_distraction": (86.53, 14.99),
    "time_of_day": (76.22, 6.72),
    "fatigue": (93.81, 6.66),
    "speed": (81.78, 10.05),
}
DURATION_MIN = (18.02, 25.33)
DURATION_FLOOR = 3.0
DISTANCE_MI = (9.71, 19.43)
EVENT_RATES = {"braking_events": 0.4, "acceleration_events": 0.3, "cornering_events": 0.5}

EXPOSURE_COLUMNS = ("driven_journeys", "miles_driven", "heartbeat_days_elapsed")
BEHAVIOR_COLUMNS = tuple(DRIVER_SCORES)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the telematics generator.

    ``signal`` scales every planted effect: driver riskiness and journey count
    on the probability that a driver claims, and journey score dips on which
    journey precedes the claim. With ``signal=0`` claims are independent of
    every generated column.
    """

    n_drivers: int = 1000
    mean_journeys: float = 50.0
    driver_scores: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DRIVER_SCORES))
    journey_scores: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(JOURNEY_SCORES))
    duration: tuple[float, float] = DURATION_MIN
    distance: tuple[float, float] = DISTANCE_MI
    event_columns: tuple[str, ...] = tuple(EVENT_RATES)
    claim_rate: float = 181 / 5649
    signal: float = 1.0
    risk_weight: float = 1.0
    exposure_weight: float = 1.0
    journey_weight: float = 1.0
    driver_loading: float = 0.6
    journey_loading: float = 0.3
    heartbeat_mean: float = 3.0
    claims_per_driver: int = 1
    seed: int = 0

    def validate(self) -> None:
        if int(self.n_drivers) < 1:
            raise ConfigError(f"n_drivers must be >= 1, got {self.n_drivers}")
        if int(self.claims_per_driver) < 1:
            raise ConfigError("claims_per_driver must be >= 1")
        scalars = {f.name: getattr(self, f.name) for f in fields(self)
                   if isinstance(getattr(self, f.name), (int, float))}
        for name, v in scalars.items():
            if not math.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
        for table in (self.driver_scores, self.journey_scores, {"duration": self.duration, "distance": self.distance}):
            for name, (mu, sd) in table.items():
                if not (math.isfinite(mu) and math.isfinite(sd)):
                    raise ConfigError(f"{name}: mean/stdev must be finite")
                if sd < 0:
                    raise ConfigError(f"{name}: stdev must be >= 0")
        if not self.mean_journeys > 0:
            raise ConfigError("mean_journeys must be positive")
        if not 0 < self.claim_rate < 1:
            raise ConfigError("claim_rate must be in (0, 1)")
        if self.signal < 0:
            raise ConfigError("signal must be non-negative")
        for name in ("driver_loading", "journey_loading"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.heartbeat_mean <= 0:
            raise ConfigError("heartbeat_mean must be positive")
        unknown = set(self.event_columns) - set(EVENT_RATES)
        if unknown:
            raise ConfigError(f"unknown event columns {sorted(unknown)}")
        dur_mu = self.duration[0] - DURATION_FLOOR
        if dur_mu <= 0 or self.distance[0] <= 0:
            raise ConfigError("duration/distance means must exceed their floors")


@dataclass(frozen=True, eq=False)
class SyntheticTelematics:
    journeys: TabularSet
    drivers: TabularSet
    claims: list[tuple[int, int]]
    config: SynthConfig


def synth_telematics(config: SynthConfig | None = None) -> SyntheticTelematics:
    """Generate drivers, journeys and claim events with planted signal."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = int(cfg.n_drivers)
    driver_ids = np.arange(1, n + 1, dtype=np.int64)

    riskiness = rng.standard_normal(n)
    n_journeys = np.maximum(1, rng.poisson(cfg.mean_journeys, n))

    # driver-level standardized score deviations; riskier drivers score lower
    rho = cfg.driver_loading
    dscore_names = list(cfg.driver_scores)
    n_scores = max(len(dscore_names), len(cfg.journey_scores))
    dev_driver = -rho * riskiness[:, None] + math.sqrt(1 - rho * rho) * rng.standard_normal((n, n_scores))

    d_vals = [np.round(np.clip(mu + sd * dev_driver[:, i], 0.0, 100.0), 2)
              for i, (mu, sd) in enumerate(cfg.driver_scores.values())]

    # journeys
    total = int(n_journeys.sum())
    owner = np.repeat(np.arange(n), n_journeys)
    seq = np.arange(total) - np.repeat(np.cumsum(n_journeys) - n_journeys, n_journeys) + 1
    jscore_names = list(cfg.journey_scores)
    eps = rng.standard_normal((total, len(jscore_names)))
    lam = cfg.journey_loading
    j_vals = {}
    for i, (name, (mu, sd)) in enumerate(cfg.journey_scores.items()):
        z = lam * dev_driver[owner, i] + math.sqrt(1 - lam * lam) * eps[:, i]
        j_vals[name] = np.round(np.clip(mu + sd * z, 0.0, 100.0), 2)
    trip_dev = eps.sum(axis=1) / math.sqrt(max(1, eps.shape[1]))

    base = rng.standard_normal(total)
    other = rng.standard_normal(total)
    dur_mu, dur_sd = cfg.duration
    dist_mu, dist_sd = cfg.distance

    def _ln(z, mean, sd):
        if sd == 0:
            return np.full(total, float(mean))
        s2 = math.log1p((sd / mean) ** 2)
        return np.exp(math.log(mean) - s2 / 2 + math.sqrt(s2) * z)

    distance = np.round(_ln(base, dist_mu, dist_sd), 2)
    duration = np.round(DURATION_FLOOR + _ln(0.8 * base + 0.6 * other, dur_mu - DURATION_FLOOR, dur_sd), 2)
    events = {name: rng.poisson(EVENT_RATES[name] * distance).astype(np.float64)
              for name in cfg.event_columns}

    # which drivers claim: logistic link on riskiness and exposure, calibrated to claim_rate
    exposure = (n_journeys - cfg.mean_journeys) / math.sqrt(cfg.mean_journeys)
    eta = cfg.signal * (cfg.risk_weight * riskiness + cfg.exposure_weight * exposure)
    if np.ptp(eta) == 0:
        intercept = math.log(cfg.claim_rate / (1 - cfg.claim_rate)) - float(eta[0])
    else:
        # every driver's rate is at most (least) claim_rate at the lower (upper) end
        target = math.log(cfg.claim_rate / (1 - cfg.claim_rate))
        intercept = brentq(lambda b: expit(b + eta).mean() - cfg.claim_rate,
                           target - float(eta.max()), target - float(eta.min()), xtol=1e-12)
    claimant = rng.random(n) < expit(intercept + eta)

    # which journey: the journey preceding the claim is more likely to be a poor one
    starts = np.cumsum(n_journeys) - n_journeys
    claims: list[tuple[int, int]] = []
    for d in np.flatnonzero(claimant):
        nj = int(n_journeys[d])
        if nj == 1:
            claims.append((int(driver_ids[d]), 1))
            continue
        prev_dev = trip_dev[starts[d]:starts[d] + nj - 1]
        logits = -cfg.signal * cfg.journey_weight * prev_dev
        w = np.exp(logits - logits.max())
        m = min(int(cfg.claims_per_driver), nj - 1)
        picks = rng.choice(nj - 1, size=m, replace=False, p=w / w.sum())
        for p in sorted(picks):
            claims.append((int(driver_ids[d]), int(p) + 2))
    claims.sort()

    j_cols = list(j_vals) + list(events) + ["distance_mi", "duration_min"]
    j_matrix = np.column_stack([j_vals[c] for c in j_vals] + [events[c] for c in events] + [distance, duration])
    journeys = TabularSet(tuple(j_cols), j_matrix, np.zeros(j_matrix.shape, dtype=bool),
                          driver_ids[owner], seq, np.zeros(total, dtype=np.int8))
    journeys = journeys.with_labels(label_journeys(journeys, claims))

    miles = np.round(np.bincount(owner, weights=distance, minlength=n), 2)
    heartbeat = np.round(rng.exponential(cfg.heartbeat_mean, n), 2)
    d_cols = dscore_names + list(EXPOSURE_COLUMNS)
    d_matrix = np.column_stack(d_vals + [n_journeys.astype(np.float64), miles, heartbeat])
    d_labels = label_drivers(journeys, claims)
    drivers = TabularSet(tuple(d_cols), d_matrix, np.zeros(d_matrix.shape, dtype=bool),
                         driver_ids, np.zeros(n, dtype=np.int64),
                         np.array([d_labels[int(g)] for g in driver_ids], dtype=np.int8))
    return SyntheticTelematics(journeys, drivers, claims, cfg)


def synth_overlap_2d(n: int, ratio: float, overlap: float, seed: int = 0, separation: float = 12.0) -> TabularSet:
    """Two unit-variance 2-D Gaussian clusters.

    ``ratio`` is the positive-class fraction and ``overlap`` in [0, 1] shrinks
    the centroid distance linearly from ``separation`` (overlap 0) to zero
    (overlap 1, identical class distributions).
    """
    if n < 2:
        raise ConfigError("n must be >= 2")
    if not 0 < ratio <= 1:
        raise ConfigError("ratio must be in (0, 1]")
    if not 0 <= overlap <= 1:
        raise ConfigError("overlap must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * ratio))
    n_pos = min(max(n_pos, 1), n)
    labels = np.zeros(n, dtype=np.int8)
    labels[:n_pos] = 1
    half = separation * (1.0 - overlap) / 2.0
    centers = np.where(labels[:, None] == 1, [half, 0.0], [-half, 0.0])
    xy = centers + rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return TabularSet(("x1", "x2"), xy[perm], np.zeros((n, 2), dtype=bool),
                      np.arange(n), np.zeros(n, dtype=np.int64), labels[perm])


def to_plain(obj):
    """Dataclass/tuple/ndarray tree as JSON-ready lists, dicts and scalars."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def from_plain(cls, data: Mapping):
    """Rebuild a (possibly nested) frozen config dataclass from ``to_plain`` output.

    Unknown keys raise ConfigError; missing keys keep their defaults.
    """
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kw = {}
    for name, value in data.items():
        kw[name] = _coerce(hints[name], value)
    return cls(**kw)


def _coerce(tp, value):
    origin, args = get_origin(tp), get_args(tp)
    if is_dataclass(tp) and isinstance(value, Mapping):
        return from_plain(tp, value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        if args:
            return tuple(_coerce(a, v) for a, v in zip(args, value))
        return tuple(value)
    if origin in (abc.Mapping, dict) or tp is dict:
        vt = args[1] if len(args) == 2 else object
        return {k: _coerce(vt, v) for k, v in value.items()}
    if tp is float and isinstance(value, int):
        return float(value)
    return value
