"""Recurrent-state cache quantization.

The update ``h_t = A_t h_{t-1} + B_t x_t`` runs in binary64. After every step
the stored state is re-quantized by a cache recipe and the additive error
``e_t = stored - pre`` is recorded, so the quantized trajectory obeys

    h_q,t - h_t = sum_{i<=t} (A_t ... A_{i+1}) e_i

which :func:`predict_error` evaluates term by term. Steps are numbered from 0;
``h0`` is the exact state before step 0.

Every update also captures its own binary64 rounding residual with
error-free transforms: the exact trajectory is carried as an unevaluated sum
``hi + lo`` and ``pre`` means the exact pre-state. The identity above then
holds to working precision relative to the deviation itself, not merely to a
few ulps of the state. The drive ``B_t x_t`` is evaluated once in binary64 and
shared by both trajectories.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import BINARY16, derive_key, philox_uniform, round_to
from .tensorio import read_tensor, write_tensor

__all__ = [
    "RecurrenceSpec",
    "CacheRecipe",
    "RecurrenceTrace",
    "DriftStats",
    "NonFiniteStateError",
    "int16_block_quantize",
    "simulate",
    "predict_error",
    "drift_stats",
    "save_spec",
    "load_spec",
    "save_trace",
]

INT16_MAX = 32767
STABILITY_EPS = 1e-12


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, detail: str = "non-finite state"):
        super().__init__(f"step {step}: {detail}")
        self.step = step


@dataclass
class RecurrenceSpec:
    """Coefficients and inputs of a linear recurrence.

    ``A`` is ``(T,)`` (scalar per step), ``(T, n)`` (diagonal) or ``(T, n, n)``.
    ``B`` is ``None`` (``x`` is the drive itself, ``(T, n)``), ``(T, n)``
    (elementwise with ``x``) or ``(T, n, p)`` with ``x`` of shape ``(T, p)``.
    """

    A: np.ndarray
    x: np.ndarray
    B: np.ndarray | None = None
    h0: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.B is not None:
            self.B = np.asarray(self.B, dtype=np.float64)
        T = self.x.shape[0]
        if self.A.ndim not in (1, 2, 3) or self.A.shape[0] != T:
            raise ValueError(f"A must have leading dimension T={T}, got shape {self.A.shape}")
        n = self.drive().shape[1]
        if self.A.ndim == 2 and self.A.shape[1] != n:
            raise ValueError(f"diagonal A must be (T, {n}), got {self.A.shape}")
        if self.A.ndim == 3 and self.A.shape[1:] != (n, n):
            raise ValueError(f"full A must be (T, {n}, {n}), got {self.A.shape}")
        self.h0 = np.zeros(n) if self.h0 is None else np.broadcast_to(np.asarray(self.h0, dtype=np.float64), (n,)).copy()
        for name in ("A", "x", "B", "h0"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def state_dim(self) -> int:
        return self.h0.shape[0]

    @property
    def full(self) -> bool:
        return self.A.ndim == 3

    def drive(self) -> np.ndarray:
        """``B_t x_t`` for all steps, shape ``(T, n)``."""
        if self.B is None:
            return self.x
        if self.B.ndim == 2:
            if self.B.shape != self.x.shape:
                raise ValueError(f"elementwise B must match x shape {self.x.shape}, got {self.B.shape}")
            return self.B * self.x
        if self.B.ndim != 3 or self.B.shape[0] != self.x.shape[0] or self.B.shape[2] != self.x.shape[1]:
            raise ValueError(f"B must be (T, n, {self.x.shape[1]}), got {self.B.shape}")
        return np.einsum("tnp,tp->tn", self.B, self.x)

    def A_at(self, t: int) -> np.ndarray:
        a = self.A[t]
        return np.full(self.state_dim, a) if self.A.ndim == 1 else a

    def apply_A(self, t: int, h: np.ndarray) -> np.ndarray:
        """``A_t h`` for a state or a batch of states (trailing dim n)."""
        if self.full:
            return h @ self.A[t].T
        return self.A_at(t) * h

    def unstable_steps(self) -> list[int]:
        """Steps whose coefficient magnitude (operator norm for full A) exceeds 1."""
        if self.full:
            norms = np.linalg.norm(self.A, ord=2, axis=(1, 2))
        else:
            norms = np.abs(self.A.reshape(self.T, -1)).max(axis=1)
        return [int(t) for t in np.flatnonzero(norms > 1 + STABILITY_EPS)]

    @classmethod
    def accumulation(cls, T: int, c: float, h0: float = 0.0, state_dim: int = 1) -> "RecurrenceSpec":
        """``h_t = h_{t-1} + c``."""
        return cls(A=np.ones(T), x=np.full((T, state_dim), float(c)), h0=np.full(state_dim, float(h0)))

    @classmethod
    def random(cls, rng: np.random.Generator, T: int, state_dim: int, input_dim: int | None = None,
               decay: tuple[float, float] = (0.5, 1.0), input_scale: float = 1.0) -> "RecurrenceSpec":
        """Diagonal decays in ``decay`` with Gaussian input maps and inputs."""
        p = input_dim or state_dim
        A = rng.uniform(*decay, size=(T, state_dim))
        B = rng.standard_normal((T, state_dim, p)) / np.sqrt(p)
        x = input_scale * rng.standard_normal((T, p))
        h0 = rng.standard_normal(state_dim)
        return cls(A=A, x=x, B=B, h0=h0)


@dataclass(frozen=True)
class CacheRecipe:
    """How the stored state is quantized after each step.

    ``variant`` is ``exact``, ``binary16_rtne``, ``binary16_sr`` or
    ``int16_block`` (symmetric, scale ``float32(amax / 32767)`` per block of
    ``block_len`` state elements, round half away from zero).
    """

    variant: str = "exact"
    philox_rounds: int = 5
    block_len: int = 128

    VARIANTS = ("exact", "binary16_rtne", "binary16_sr", "int16_block")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown cache recipe {self.variant!r}; choose from {self.VARIANTS}")
        if self.philox_rounds < 1:
            raise ValueError("philox_rounds must be >= 1")
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")

    @property
    def stochastic(self) -> bool:
        return self.variant == "binary16_sr"

    def to_dict(self) -> dict:
        return {"variant": self.variant, "philox_rounds": self.philox_rounds, "block_len": self.block_len}

    @classmethod
    def from_dict(cls, d) -> "CacheRecipe":
        if isinstance(d, str):
            return cls(d)
        return cls(d["variant"], int(d.get("philox_rounds", 5)), int(d.get("block_len", 128)))


def int16_block_quantize(h, block_len: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Quantize along the last axis; return (reconstruction, per-block scales)."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    nb = -(-n // block_len)
    pad = nb * block_len - n
    hp = np.pad(h, [(0, 0)] * (h.ndim - 1) + [(0, pad)])
    blocks = hp.reshape(*h.shape[:-1], nb, block_len)
    amax = np.abs(blocks).max(axis=-1)
    scale = (amax / INT16_MAX).astype(np.float32).astype(np.float64)
    safe = np.where(scale > 0, scale, 1.0)
    r = blocks / safe[..., None]
    q = np.clip(np.sign(r) * np.floor(np.abs(r) + 0.5), -INT16_MAX, INT16_MAX)
    out = np.where(scale[..., None] > 0, q * scale[..., None], 0.0)
    return out.reshape(*h.shape[:-1], nb * block_len)[..., :n], scale


def _check_binary16_range(pre, t):
    if np.any(np.abs(pre) > BINARY16.max_value):
        raise NonFiniteStateError(t, f"state magnitude {np.abs(pre).max():g} overflows binary16")


def _quantize_state(pre, recipe: CacheRecipe, t: int, keys) -> np.ndarray:
    if recipe.variant == "exact":
        return pre.copy()
    if recipe.variant == "int16_block":
        return int16_block_quantize(pre, recipe.block_len)[0]
    _check_binary16_range(pre, t)
    if recipe.variant == "binary16_rtne":
        return round_to(pre, BINARY16)
    idx = np.arange(pre.shape[-1], dtype=np.uint64)
    u = philox_uniform(keys[:, None, :], t, idx, recipe.philox_rounds)
    return round_to(pre, BINARY16, uniforms=u)


def _trial_keys(seed: int, trials) -> np.ndarray:
    return np.array([derive_key(seed, int(k)) for k in trials], dtype=np.uint64).reshape(-1, 2)


_SPLIT = 134217729.0  # 2^27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _two_prod(a, b):
    """``a * b = p + e`` exactly (Dekker product, no fused multiply-add needed)."""
    p = a * b
    ca, cb = _SPLIT * a, _SPLIT * b
    a_hi = ca - (ca - a)
    b_hi = cb - (cb - b)
    a_lo, b_lo = a - a_hi, b - b_hi
    return p, ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo


def _step(spec: RecurrenceSpec, t: int, hi: np.ndarray, lo: np.ndarray, u: np.ndarray):
    """``A_t (hi + lo) + u`` as a renormalized pair (trailing dim n)."""
    if spec.full:
        A = spec.A[t]
        acc, err = _two_sum(*_two_prod(A[:, 0], hi[..., 0:1]))
        for j in range(1, spec.state_dim):
            p, pe = _two_prod(A[:, j], hi[..., j:j + 1])
            acc, se = _two_sum(acc, p)
            err = err + pe + se
        err = err + lo @ A.T
    else:
        a = spec.A_at(t)
        acc, err = _two_prod(a, hi)
        err = err + a * lo
    s, se = _two_sum(acc, u)
    return _two_sum(s, se + err)


def _exact_states(spec: RecurrenceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact trajectory as ``(hi, lo)`` arrays of shape ``(T, n)``."""
    u = spec.drive()
    hi, lo = spec.h0.copy(), np.zeros(spec.state_dim)
    out_hi = np.empty((spec.T, spec.state_dim))
    out_lo = np.empty_like(out_hi)
    for t in range(spec.T):
        # overflow is reported below with its step index
        with np.errstate(over="ignore", invalid="ignore"):
            hi, lo = _step(spec, t, hi, lo, u[t])
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise NonFiniteStateError(t)
        out_hi[t], out_lo[t] = hi, lo
    return out_hi, out_lo


def _iterate(spec: RecurrenceSpec, recipe: CacheRecipe, keys: np.ndarray):
    """Yield (t, pre, post, post_residual, error) for a batch of trials; arrays have shape (trials, n).

    ``pre`` is the binary64 pre-state the cache sees and ``error`` is
    ``post`` minus the exact pre-state. Only the exact recipe keeps a nonzero
    residual, so its trajectory coincides with the reference.
    """
    u = spec.drive()
    hq = np.broadcast_to(spec.h0, (keys.shape[0], spec.state_dim)).copy()
    lo = np.zeros_like(hq)
    for t in range(spec.T):
        with np.errstate(over="ignore", invalid="ignore"):
            pre, pre_lo = _step(spec, t, hq, lo, u[t])
        if not (np.all(np.isfinite(pre)) and np.all(np.isfinite(pre_lo))):
            raise NonFiniteStateError(t)
        if recipe.variant == "exact":
            hq, lo = pre, pre_lo
            yield t, pre, hq, lo, np.zeros_like(pre)
            continue
        hq = _quantize_state(pre, recipe, t, keys)
        yield t, pre, hq, lo, (hq - pre) - pre_lo


@dataclass
class RecurrenceTrace:
    """States as binary64 values plus residuals; ``pre_states`` are rounded to binary64.

    ``exact_states + exact_residual`` is the exact trajectory. The quantized
    residual is nonzero only for the exact recipe.
    """

    exact_states: np.ndarray
    quantized_states: np.ndarray
    pre_states: np.ndarray
    errors: np.ndarray
    recipe: CacheRecipe
    seed: int = 0
    trial: int = 0
    unstable_steps: list = field(default_factory=list)
    exact_residual: np.ndarray | None = None
    quantized_residual: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.errors.shape[0]

    def deviation(self) -> np.ndarray:
        d = self.quantized_states - self.exact_states
        if self.exact_residual is not None:
            r = self.exact_residual if self.quantized_residual is None else self.exact_residual - self.quantized_residual
            d = d - r
        return d


def simulate(spec: RecurrenceSpec, recipe: CacheRecipe = CacheRecipe(), seed: int = 0, trial: int = 0) -> RecurrenceTrace:
    """Run exact and cached trajectories side by side.

    Stochastic rounding at step ``t`` draws element ``j`` from the Philox
    stream keyed by ``derive_key(seed, trial)`` with counter ``(j, t)``.
    """
    keys = _trial_keys(seed, [trial])
    exact, residual = _exact_states(spec)
    q = np.empty_like(exact)
    pre = np.empty_like(exact)
    err = np.empty_like(exact)
    q_res = np.empty_like(exact)
    for t, p, hq, lo, e in _iterate(spec, recipe, keys):
        pre[t], q[t], q_res[t], err[t] = p[0], hq[0], lo[0], e[0]
    return RecurrenceTrace(exact, q, pre, err, recipe, seed, trial, spec.unstable_steps(), residual, q_res)


def predict_error(trace: RecurrenceTrace, spec: RecurrenceSpec, t: int) -> np.ndarray:
    """Evaluate the unrolled sum of propagated per-step errors at step ``t``."""
    if not 0 <= t < trace.T:
        raise IndexError(f"step {t} outside 0..{trace.T - 1}")
    n = spec.state_dim
    prod = np.eye(n) if spec.full else np.ones(n)
    total = trace.errors[t].copy()
    for i in range(t - 1, -1, -1):
        # prod holds A_t ... A_{i+1}
        prod = prod @ spec.A[i + 1] if spec.full else prod * spec.A_at(i + 1)
        total += prod @ trace.errors[i] if spec.full else prod * trace.errors[i]
    return total


@dataclass
class DriftStats:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    trials: int
    recipe: CacheRecipe

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "dim", "mean", "std"])
        for k, s in enumerate(self.steps):
            for j in range(self.mean.shape[1]):
                w.writerow([int(s), j, repr(float(self.mean[k, j])), repr(float(self.std[k, j]))])
        return buf.getvalue()


def drift_stats(spec: RecurrenceSpec, recipe: CacheRecipe, trials: int = 1, seed: int = 0,
                steps=None) -> DriftStats:
    """Ensemble mean and standard deviation of ``h_q,t - h_t``.

    Deterministic recipes run once whatever ``trials`` is. ``steps`` selects
    the recorded step indices (default: all). The standard deviation uses
    ``ddof=1`` when more than one trial runs.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    steps = np.arange(spec.T) if steps is None else np.unique(np.asarray(steps, dtype=np.int64))
    if steps.size and (steps[0] < 0 or steps[-1] >= spec.T):
        raise IndexError(f"steps must lie in 0..{spec.T - 1}")
    n_runs = trials if recipe.stochastic else 1
    keys = _trial_keys(seed, range(n_runs))
    exact, residual = _exact_states(spec)
    want = set(steps.tolist())
    mean = np.empty((steps.size, spec.state_dim))
    std = np.zeros_like(mean)
    k = 0
    for t, _, hq, lo, _ in _iterate(spec, recipe, keys):
        if t in want:
            dev = (hq - exact[t]) - (residual[t] - lo)
            mean[k] = dev.mean(axis=0)
            if n_runs > 1:
                std[k] = dev.std(axis=0, ddof=1)
            k += 1
    return DriftStats(steps, mean, std, n_runs, recipe)


def save_spec(spec: RecurrenceSpec, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_tensor(spec.A, os.path.join(directory, "A.lbit"))
    write_tensor(spec.x, os.path.join(directory, "x.lbit"))
    write_tensor(spec.h0, os.path.join(directory, "h0.lbit"))
    if spec.B is not None:
        write_tensor(spec.B, os.path.join(directory, "B.lbit"))
    meta = {"T": spec.T, "state_dim": spec.state_dim, "has_B": spec.B is not None}
    with open(os.path.join(directory, "spec.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_spec(directory) -> RecurrenceSpec:
    with open(os.path.join(directory, "spec.json")) as fh:
        meta = json.load(fh)
    B = read_tensor(os.path.join(directory, "B.lbit")) if meta.get("has_B") else None
    return RecurrenceSpec(
        A=read_tensor(os.path.join(directory, "A.lbit")),
        x=read_tensor(os.path.join(directory, "x.lbit")),
        B=B,
        h0=read_tensor(os.path.join(directory, "h0.lbit")),
    )


def save_trace(trace: RecurrenceTrace, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_tensor(trace.exact_states, os.path.join(directory, "exact_states.lbit"))
    if trace.exact_residual is not None:
        write_tensor(trace.exact_residual, os.path.join(directory, "exact_residual.lbit"))
    write_tensor(trace.quantized_states, os.path.join(directory, "quantized_states.lbit"))
    write_tensor(trace.errors, os.path.join(directory, "errors.lbit"))
    meta = {"recipe": trace.recipe.to_dict(), "seed": trace.seed, "trial": trace.trial,
            "T": trace.T, "unstable_steps": trace.unstable_steps}
    with open(os.path.join(directory, "trace.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
