"""Score-level fusion: a linear SVM stacked on per-pair provider scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, UsageError
from .similarity import DISTANCE

STD_FLOOR = 1e-12


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    lam: float
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(getattr(X, "scores", X), dtype=np.float64)
        if X.shape[-1] != self.w.size:
            raise DimensionError(f"score vector length {X.shape[-1]} != model width {self.w.size}")
        return (X - self.mean) / self.std


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    margins = y * (X @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def svm_subgradient(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float):
    """Subgradient of the objective in (w, b); exact wherever no margin equals 1."""
    active = y * (X @ w + b) < 1.0
    n = len(y)
    gw = lam * w - (y[active] @ X[active]) / n
    gb = -float(y[active].sum()) / n
    return gw, gb


def train_svm(
    X,
    y,
    lam: float = 1e-2,
    epochs: int = 500,
    rng: np.random.Generator | None = None,
    batch_size: int | None = None,
) -> SvmModel:
    """Pegasos: step 1/(lam*t) and projection onto the ball of radius 1/sqrt(lam).

    ``y`` is +1 (matching) / -1 (non-matching).  With ``batch_size=None``
    every iteration uses the full training set, so the result does not depend
    on ``rng`` and is unchanged by duplicating the data; otherwise each step
    draws a seeded minibatch.
    """
    X = np.asarray([getattr(r, "scores", r) for r in X], dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DimensionError(f"need a (n, features) matrix matching {y.size} labels, got {X.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise DataError("SVM training needs examples of both classes")
    if lam <= 0:
        raise ValueError("lam must be > 0")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    Xs = (X - mean) / std
    n, dim = Xs.shape
    w = np.zeros(dim)
    b = 0.0
    radius = 1.0 / np.sqrt(lam)
    if batch_size is not None and rng is None:
        raise ValueError("minibatch training needs an rng")
    for t in range(1, epochs + 1):
        if batch_size is None or batch_size >= n:
            Xb, yb = Xs, y
        else:
            idx = rng.choice(n, size=batch_size, replace=False)
            Xb, yb = Xs[idx], y[idx]
        eta = 1.0 / (lam * t)
        gw, gb = svm_subgradient(w, b, Xb, yb, lam)
        w = w - eta * gw
        b = b - eta * gb
        norm = np.sqrt(w @ w + b * b)
        if norm > radius:
            w *= radius / norm
            b *= radius / norm
    return SvmModel(w, float(b), lam, mean, std)


def svm_score(model: SvmModel, d) -> np.ndarray | float:
    z = model.standardize(d)
    out = z @ model.w + model.b
    return float(out) if np.ndim(out) == 0 else out


def oriented(scores: np.ndarray, orientations: Sequence[str]) -> np.ndarray:
    """Flip distance columns so every feature grows with 'matching'."""
    sign = np.array([-1.0 if o == DISTANCE else 1.0 for o in orientations])
    return np.asarray(scores, dtype=np.float64) * sign


def stack(
    feature_ids: Sequence[str],
    train_scores: Mapping[str, np.ndarray],
    train_labels,
    test_scores: Mapping[str, np.ndarray],
    orientations: Mapping[str, str],
    lam: float = 1e-2,
    epochs: int = 500,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, SvmModel]:
    """Fit an SVM on the training fold's provider scores; fused test scores (larger = matching).

    ``train_scores[pid]`` and ``test_scores[pid]`` are per-pair score arrays
    for each provider id.  Labels are 1/0.
    """
    for pid in feature_ids:
        if pid not in train_scores or pid not in test_scores or pid not in orientations:
            raise UsageError(f"unknown provider id {pid!r}")
    orient = [orientations[p] for p in feature_ids]
    Xtr = oriented(np.column_stack([train_scores[p] for p in feature_ids]), orient)
    ytr = np.where(np.asarray(train_labels) == 1, 1.0, -1.0)
    model = train_svm(Xtr, ytr, lam, epochs, rng)
    n_test = len(test_scores[feature_ids[0]]) if feature_ids else 0
    if n_test == 0:
        return np.zeros(0), model
    Xte = oriented(np.column_stack([test_scores[p] for p in feature_ids]), orient)
    return svm_score(model, Xte), model
