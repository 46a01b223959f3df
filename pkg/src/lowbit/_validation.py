"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np


def check_finite(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"{name} contains a non-finite value at index {tuple(int(i) for i in bad)}")
    return x


def check_matrix(x, name: str = "input", allow_empty: bool = False) -> np.ndarray:
    """Coerce to a finite 2-D float64 array; 1-D input becomes a single row."""
    x = check_finite(x, name)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    if not allow_empty and x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "shapes") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} differ: {a.shape} vs {b.shape}")


def check_probability_vector(p, name: str = "distribution", atol: float = 1e-12) -> np.ndarray:
    p = check_finite(p, name)
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    s = p.sum(axis=-1)
    if not np.allclose(s, 1.0, rtol=0, atol=atol):
        raise ValueError(f"{name} rows must sum to 1 within {atol}")
    return p
