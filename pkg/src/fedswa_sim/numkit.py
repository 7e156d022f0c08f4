"""Flat parameter-vector arithmetic.

All model parameters, gradients and control variates are 1-d float64 arrays
of one fixed length per task. Reductions use a fixed order (list order, then
component order) so reruns are bit-identical no matter how the inputs were
produced.
"""
from typing import Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


def as_vec(x) -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def _same_len(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    x, y = as_vec(x), as_vec(y)
    _same_len(x, y)
    return a * x + y


def mean_vecs(vs: Sequence) -> np.ndarray:
    if len(vs) == 0:
        raise ValueError("mean_vecs of an empty list")
    rows = [as_vec(v) for v in vs]
    for r in rows[1:]:
        _same_len(rows[0], r)
    return kernels.mean_rows(np.stack(rows))


def dot(x, y) -> float:
    x, y = as_vec(x), as_vec(y)
    _same_len(x, y)
    return float(kernels.dot_kernel(x, y))


def l2_norm(x) -> float:
    x = as_vec(x)
    return float(np.sqrt(kernels.dot_kernel(x, x)))


def all_finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))
