"""Weighted, L2-regularised logistic regression solved by damped Newton steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import ConfigError, DataError


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient max-norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


@dataclass(eq=False)
class LinearModel:
    """Coefficients live on the standardized scale of the kept columns."""

    coef: np.ndarray
    intercept: float
    l2: float
    class_weights: tuple[float, float]
    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    feature_names: tuple[str, ...] = ()
    n_iter: int = 0

    @property
    def n_features(self) -> int:
        return len(self.kept)

    def _design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.isfinite(X).all():
            raise DataError("logistic regression needs fully observed finite inputs")
        return (X[:, self.kept] - self.mean) / self.scale

    def decision_function(self, X) -> np.ndarray:
        return self._design(X) @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def full_coef(self) -> np.ndarray:
        """Standardized coefficients for every input column (0 for dropped constants)."""
        out = np.zeros(self.n_features)
        out[self.kept] = self.coef
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "coef": [float(v) for v in self.coef],
            "intercept": float(self.intercept),
            "l2": float(self.l2),
            "class_weights": [float(v) for v in self.class_weights],
            "mean": [float(v) for v in self.mean],
            "scale": [float(v) for v in self.scale],
            "kept": [bool(v) for v in self.kept],
            "feature_names": list(self.feature_names),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        if d.get("kind") != "logistic":
            raise DataError(f"not a logistic model: kind={d.get('kind')!r}")
        return cls(np.array(d["coef"], dtype=np.float64), float(d["intercept"]), float(d["l2"]),
                   tuple(d["class_weights"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["scale"], dtype=np.float64), np.array(d["kept"], dtype=bool),
                   tuple(d["feature_names"]), int(d["n_iter"]))


def sample_weights(y: np.ndarray, class_weights) -> tuple[np.ndarray, tuple[float, float]]:
    """Per-row weights from ``None`` (unweighted), ``"balanced"`` or a (w0, w1) pair."""
    y = np.asarray(y)
    if class_weights is None:
        cw = (1.0, 1.0)
    elif isinstance(class_weights, str):
        if class_weights != "balanced":
            raise ConfigError(f"unknown class weighting {class_weights!r}")
        n1 = float(y.sum())
        n0 = len(y) - n1
        cw = (len(y) / (2 * n0), len(y) / (2 * n1))
    else:
        cw = tuple(float(v) for v in class_weights)
        if len(cw) != 2 or min(cw) <= 0:
            raise ConfigError("class weights must be two positive numbers")
    return np.where(y == 1, cw[1], cw[0]), cw


def logistic_objective(theta: np.ndarray, Z: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float):
    """Weighted logistic loss (sum) + (l2/2)|coef|^2 and its gradient.

    ``theta = [intercept, coef...]``; the intercept is not penalised.
    """
    b, beta = theta[0], theta[1:]
    z = Z @ beta + b
    loss = np.sum(w * (np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * beta @ beta
    r = w * (expit(z) - y)
    grad = np.concatenate([[r.sum()], Z.T @ r + l2 * beta])
    return loss, grad


def _hessian(theta, Z, w, l2):
    p = expit(Z @ theta[1:] + theta[0])
    s = w * p * (1 - p)
    A = np.column_stack([np.ones(len(Z)), Z])
    Hm = A.T @ (A * s[:, None])
    Hm[1:, 1:] += l2 * np.eye(Z.shape[1])
    return Hm


def fit_logistic(X, y, l2: float = 1.0, class_weights=None, tol: float = 1e-8, max_iter: int = 100,
                 standardize: bool = True, feature_names: Sequence[str] | None = None) -> LinearModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != len(X):
        raise DataError("X and y lengths differ")
    if not np.isfinite(X).all():
        raise DataError("logistic regression needs fully observed finite inputs")
    if not (l2 >= 0 and np.isfinite(l2)):
        raise ConfigError("l2 must be a finite value >= 0")
    if not np.isin(y, (0.0, 1.0)).all() or y.min() == y.max():
        raise DataError("labels must contain both classes 0 and 1")
    w, cw = sample_weights(y, class_weights)

    sd = X.std(axis=0)
    kept = sd > 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
    Xk = X[:, kept]
    if standardize:
        mean, scale = Xk.mean(axis=0), sd[kept]
    else:
        mean, scale = np.zeros(Xk.shape[1]), np.ones(Xk.shape[1])
    Z = (Xk - mean) / scale

    theta = np.zeros(Z.shape[1] + 1)
    p0 = np.average(y, weights=w)
    theta[0] = np.log(p0 / (1 - p0))
    f, g = logistic_objective(theta, Z, y, w, l2)
    it = 0
    while np.max(np.abs(g)) >= tol:
        if it >= max_iter:
            raise ConvergenceError(f"no convergence within {max_iter} Newton iterations", float(np.max(np.abs(g))))
        Hm = _hessian(theta, Z, w, l2)
        try:
            step = -np.linalg.solve(Hm, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(Hm, g, rcond=None)[0]
        t, slope = 1.0, g @ step
        gmax = np.max(np.abs(g))
        while True:
            f_new, g_new = logistic_objective(theta + t * step, Z, y, w, l2)
            if f_new <= f + 1e-4 * t * slope or t < 1e-10:
                break
            # near the optimum the loss is flat to rounding; accept steps that shrink the gradient
            if f_new <= f + 1e-12 * abs(f) and np.max(np.abs(g_new)) < gmax:
                break
            t *= 0.5
        theta, f, g = theta + t * step, f_new, g_new
        it += 1
    names = tuple(feature_names) if feature_names is not None else ()
    return LinearModel(theta[1:], float(theta[0]), float(l2), cw, mean, scale, kept, names, it)


def coefficients(model: LinearModel, top: int | None = None) -> list[tuple[str, float]]:
    """(feature, signed standardized coefficient) sorted by magnitude, largest first."""
    names = model.feature_names or tuple(f"x{i}" for i in range(model.n_features))
    kept_names = [n for n, k in zip(names, model.kept) if k]
    pairs = sorted(zip(kept_names, (float(c) for c in model.coef)), key=lambda p: -abs(p[1]))
    return pairs if top is None else pairs[:top]
