"""Per-driver dataset widening: differences, lagged blocks and prior labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ConfigError, TabularSet


@dataclass(frozen=True)
class WidenConfig:
    lags: int = 4
    include_labels: bool = True
    passes: int = 2

    def validate(self) -> None:
        if self.lags < 0:
            raise ConfigError("lag depth must be >= 0")
        if self.passes not in (0, 1, 2):
            raise ConfigError("difference passes must be 0, 1 or 2")


def _diff(values: np.ndarray, mask: np.ndarray, prev: np.ndarray):
    has = prev >= 0
    p = np.where(has, prev, 0)
    d = values - values[p]
    m = mask | mask[p] | ~has[:, None]
    return np.where(m, 0.0, d), m


def first_differences(data: TabularSet, columns: Sequence[str], prefix: str = "d_") -> TabularSet:
    """Append ``d_<col>`` = value(t) - value(t-1) within each group.

    The first journey of a group, or a difference with a masked operand, is masked.
    """
    idx = [data.col_index(c) for c in columns]
    v, m = _diff(data.values[:, idx], data.mask[:, idx], data.predecessor(1))
    return data.with_columns([prefix + c for c in columns], v, m)


def feature_column_count(n_features: int, config: WidenConfig = WidenConfig()) -> int:
    """Number of widened columns derived from ``n_features`` inputs, prior labels excluded."""
    return n_features * (config.passes + 1) * (config.lags + 1)


def widen(data: TabularSet, config: WidenConfig = WidenConfig()) -> TabularSet:
    """Widen every feature column of ``data``.

    Each row gets a block of raw values plus first (``d_``) and second
    (``dd_``) differences, then copies of that block from the ``lags``
    preceding journeys (``lag<k>_`` prefix) and optionally their labels
    (``lag<k>_label``). Cells beyond a driver's history are masked. The
    current row's label is never a feature. Row order is preserved.
    """
    config.validate()
    names = list(data.columns)
    vals, mask = data.values, data.mask
    prev = data.predecessor(1)

    block_names = list(names)
    block_v, block_m = [vals], [mask]
    cur_v, cur_m = vals, mask
    for p in range(config.passes):
        cur_v, cur_m = _diff(cur_v, cur_m, prev)
        block_names += ["d" * (p + 1) + "_" + c for c in names]
        block_v.append(cur_v)
        block_m.append(cur_m)
    block_v = np.hstack(block_v)
    block_m = np.hstack(block_m)

    out_names = list(block_names)
    out_v, out_m = [block_v], [block_m]
    lag_rows = [data.predecessor(k) for k in range(1, config.lags + 1)]
    for k, pk in enumerate(lag_rows, start=1):
        has = pk >= 0
        p = np.where(has, pk, 0)
        m = block_m[p] | ~has[:, None]
        out_v.append(np.where(m, 0.0, block_v[p]))
        out_m.append(m)
        out_names += [f"lag{k}_{c}" for c in block_names]
    if config.include_labels:
        for k, pk in enumerate(lag_rows, start=1):
            has = pk >= 0
            lab = np.where(has, data.labels[np.where(has, pk, 0)], 0).astype(np.float64)
            out_v.append(lab[:, None])
            out_m.append(~has[:, None])
            out_names.append(f"lag{k}_label")
    return TabularSet(tuple(out_names), np.hstack(out_v), np.hstack(out_m),
                      data.groups, data.order, data.labels)


def is_label_column(name: str) -> bool:
    return name.endswith("_label") and name.startswith("lag")
