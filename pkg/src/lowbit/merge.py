"""Sliding-window checkpoint averaging.

Minus-sqrt coefficients emulate an annealing phase over a horizon that ends
at the newest checkpoint: the emulated learning rate is

    eta(tau) = min_lr + (peak_lr - min_lr) * (1 - sqrt(progress(tau)))

and checkpoint ``i`` receives the drop of ``eta`` over the interval since the
previous checkpoint (the first interval starts at the horizon's start).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CheckpointMeta", "MergeSchedule", "select_window", "coefficients", "merge", "emulated_lr"]

SUM_TOL = 1e-12


@dataclass(frozen=True)
class CheckpointMeta:
    token_count: float
    ref: str | None = None


@dataclass(frozen=True)
class MergeSchedule:
    """``scheme`` is ``uniform`` or ``minus_sqrt``; ``horizon`` defaults to the window."""

    window_tokens: float
    scheme: str = "minus_sqrt"
    peak_lr: float = 1.0
    min_lr: float = 0.0
    horizon: float | None = None

    def __post_init__(self):
        if self.scheme not in ("uniform", "minus_sqrt"):
            raise ValueError(f"scheme must be 'uniform' or 'minus_sqrt', got {self.scheme!r}")
        if not self.window_tokens > 0:
            raise ValueError("window_tokens must be positive")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.scheme == "minus_sqrt" and not self.peak_lr > self.min_lr:
            raise ValueError("minus_sqrt needs peak_lr > min_lr")

    @property
    def decay_horizon(self) -> float:
        return self.window_tokens if self.horizon is None else self.horizon

    def to_dict(self) -> dict:
        return {"window_tokens": self.window_tokens, "scheme": self.scheme, "peak_lr": self.peak_lr,
                "min_lr": self.min_lr, "horizon": self.decay_horizon}


def _tokens(metas) -> np.ndarray:
    t = np.array([m.token_count if isinstance(m, CheckpointMeta) else m for m in metas], dtype=np.float64)
    if t.size and np.any(np.diff(t) <= 0):
        raise ValueError("checkpoint token counts must be strictly increasing")
    return t


def select_window(metas, window_tokens: float, latest: float | None = None) -> list:
    """Checkpoints with ``latest - window_tokens < token_count <= latest``."""
    t = _tokens(metas)
    if t.size == 0:
        return []
    latest = t[-1] if latest is None else latest
    return [m for m, tok in zip(metas, t) if latest - window_tokens < tok <= latest]


def emulated_lr(schedule: MergeSchedule, tau, end: float) -> np.ndarray:
    h = schedule.decay_horizon
    progress = np.clip((np.asarray(tau, dtype=np.float64) - (end - h)) / h, 0.0, 1.0)
    return schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * (1.0 - np.sqrt(progress))


def coefficients(schedule: MergeSchedule, metas) -> np.ndarray:
    """Non-negative merge weights summing to 1, ordered like ``metas``."""
    t = _tokens(metas)
    if t.size == 0:
        raise ValueError("coefficients need at least one checkpoint in the window")
    if t.size == 1:
        return np.ones(1)
    if schedule.scheme == "uniform":
        return np.full(t.size, 1.0 / t.size)
    end = t[-1]
    start = end - schedule.decay_horizon
    if t[0] < start:
        raise ValueError(f"checkpoint at {t[0]} precedes the decay horizon start {start}")
    eta = emulated_lr(schedule, np.concatenate([[start], t]), end)
    drops = eta[:-1] - eta[1:]
    w = drops / drops.sum()
    return w


def merge(checkpoints, weights):
    """Elementwise ``sum_i w_i theta_i`` over arrays or dicts of arrays."""
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if len(checkpoints) != weights.size:
        raise ValueError(f"{len(checkpoints)} checkpoints but {weights.size} weights")
    if weights.size == 0:
        raise ValueError("merge needs at least one checkpoint")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > SUM_TOL:
        raise ValueError("weights must be non-negative and sum to 1")
    if all(isinstance(c, dict) for c in checkpoints):
        keys = list(checkpoints[0])
        for i, c in enumerate(checkpoints[1:], 1):
            if list(c) != keys:
                raise ValueError(f"checkpoint {i} has parameter names {sorted(c)}, expected {sorted(keys)}")
        return {k: _merge_arrays([c[k] for c in checkpoints], weights, k) for k in keys}
    return _merge_arrays(checkpoints, weights, "parameter")


def _merge_arrays(arrays, weights, name):
    stack = [np.asarray(a, dtype=np.float64) for a in arrays]
    for i, a in enumerate(stack[1:], 1):
        if a.shape != stack[0].shape:
            raise ValueError(f"{name}: checkpoint {i} has shape {a.shape}, expected {stack[0].shape}")
    s = np.stack(stack)
    out = np.tensordot(weights, s, axes=1)
    # rounding can step an ulp outside the convex hull
    return np.clip(out, s.min(axis=0), s.max(axis=0))
