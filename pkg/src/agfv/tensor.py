"""Numeric core: tensors are plain row-major numpy arrays.

Helpers here cover the few primitives the rest of the package leans on:
a checked matrix product, L2 normalization with a zero floor, a seeded
counter-based RNG and a central finite-difference gradient oracle.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericalError

L2_EPS = 1e-12

DTYPES = {"float64": np.float64, "float32": np.float32}


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Return a C-contiguous array of the given dtype (copy only if needed)."""
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return a @ b


def l2_normalize(v: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("l2_normalize: empty vector")
    return v / max(float(np.linalg.norm(v)), eps)


def make_rng(seed: int) -> np.random.Generator:
    """Philox-4x64 generator: counter-based, splittable, platform independent."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time.

    ``x`` is perturbed in place and restored, so callers may pass a view
    into a parameter array and get gradients of a loss closed over it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite_diff_grad needs a contiguous array")
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: non-finite value at index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, 0 when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
