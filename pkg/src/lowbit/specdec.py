"""Speculative decoding with toy language models.

A verification step drafts ``D`` tokens with the drafter, checks them against
the target, and always emits one more token from the target (the correction at
the first rejection, or a bonus token after a full accept). The acceptance
length metric counts that extra token by default.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "ToyLm",
    "AcceptanceEvents",
    "Generation",
    "verify_greedy",
    "acceptance_length",
    "acceptance_by_index",
    "simulate_generation",
    "exact_prefix_distribution",
    "rates_csv",
]

SUM_TOL = 1e-12


@dataclass
class ToyLm:
    """Next-token table over a context window of the last ``window`` tokens.

    Row ``sum(c_k * V**(window-1-k))`` of ``probs`` is the distribution after
    context ``(c_0, ..., c_{window-1})``. Histories shorter than the window
    are left-padded with token 0.
    """

    probs: np.ndarray
    window: int = 1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.probs.ndim != 2:
            raise ValueError("probs must be a 2-D table")
        V = self.probs.shape[1]
        if V < 1 or self.probs.shape[0] != V**self.window:
            raise ValueError(f"probs must have shape ({V}**{self.window}, {V}), got {self.probs.shape}")
        if np.any(self.probs < 0) or not np.all(np.isfinite(self.probs)):
            raise ValueError("probabilities must be finite and non-negative")
        err = np.abs(self.probs.sum(axis=1) - 1.0)
        if np.any(err > SUM_TOL):
            row = int(np.argmax(err))
            raise ValueError(f"row {row} sums to {self.probs[row].sum()!r}, not 1 within {SUM_TOL}")
        self._cdf = np.cumsum(self.probs, axis=1)

    @property
    def vocab(self) -> int:
        return self.probs.shape[1]

    def row(self, history) -> int:
        ctx = list(history)[-self.window:] if self.window else []
        ctx = [0] * (self.window - len(ctx)) + ctx
        r = 0
        for tok in ctx:
            r = r * self.vocab + int(tok)
        return r

    def dist(self, history) -> np.ndarray:
        return self.probs[self.row(history)]

    def argmax(self, history) -> int:
        return int(np.argmax(self.dist(history)))

    def sample(self, history, u: float) -> int:
        cdf = self._cdf[self.row(history)]
        return min(int(np.searchsorted(cdf, u, side="right")), self.vocab - 1)

    def mix_uniform(self, lam: float) -> "ToyLm":
        """``(1 - lam) * p + lam / V``."""
        if not 0 <= lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        mixed = (1 - lam) * self.probs + lam / self.vocab
        return ToyLm(mixed / mixed.sum(axis=1, keepdims=True), self.window)

    @classmethod
    def uniform(cls, vocab: int, window: int = 0) -> "ToyLm":
        return cls(np.full((vocab**window, vocab), 1.0 / vocab), window)

    @classmethod
    def random(cls, rng: np.random.Generator, vocab: int, window: int = 1, concentration: float = 1.0) -> "ToyLm":
        p = rng.dirichlet(np.full(vocab, concentration), size=vocab**window)
        return cls(p / p.sum(axis=1, keepdims=True), window)

    @classmethod
    def deterministic(cls, rng: np.random.Generator, vocab: int, window: int = 1) -> "ToyLm":
        p = np.zeros((vocab**window, vocab))
        p[np.arange(vocab**window), rng.integers(0, vocab, vocab**window)] = 1.0
        return cls(p, window)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "window": self.window, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyLm":
        lm = cls(np.asarray(d["probs"], dtype=np.float64), int(d.get("window", 1)))
        if "vocab" in d and int(d["vocab"]) != lm.vocab:
            raise ValueError(f"vocab {d['vocab']} disagrees with table width {lm.vocab}")
        return lm

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyLm":
        return cls.from_dict(json.loads(text))


@dataclass
class AcceptanceEvents:
    """Per verification step: draft length and accepted draft prefix."""

    draft_lengths: np.ndarray
    accepted: np.ndarray

    def __post_init__(self):
        self.draft_lengths = np.asarray(self.draft_lengths, dtype=np.int64).ravel()
        self.accepted = np.asarray(self.accepted, dtype=np.int64).ravel()
        if self.draft_lengths.shape != self.accepted.shape:
            raise ValueError("draft_lengths and accepted differ in length")
        if np.any(self.draft_lengths < 0) or np.any(self.accepted < 0):
            raise ValueError("draft lengths and accepted prefixes must be >= 0")
        bad = np.flatnonzero(self.accepted > self.draft_lengths)
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"event {i}: accepted prefix {self.accepted[i]} exceeds draft length {self.draft_lengths[i]}")

    @classmethod
    def uniform(cls, D: int, accepted) -> "AcceptanceEvents":
        accepted = np.asarray(accepted, dtype=np.int64).ravel()
        return cls(np.full(accepted.size, D), accepted)

    def __len__(self) -> int:
        return int(self.accepted.size)

    def to_dict(self) -> dict:
        return {"draft_lengths": self.draft_lengths.tolist(), "accepted": self.accepted.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AcceptanceEvents":
        return cls(d["draft_lengths"], d["accepted"])


def verify_greedy(draft, target_argmax) -> int:
    """Length of the longest common prefix."""
    draft = list(draft)
    target_argmax = list(target_argmax)
    if len(draft) != len(target_argmax):
        raise ValueError(f"draft has {len(draft)} tokens but target_argmax has {len(target_argmax)}")
    n = 0
    for a, b in zip(draft, target_argmax):
        if a != b:
            break
        n += 1
    return n


def acceptance_length(events: AcceptanceEvents, include_verifier_token: bool = True, exact: bool = False):
    """Mean tokens per verification step.

    With ``include_verifier_token`` (the default) each step counts its
    accepted prefix plus the token the verifier always emits. The float result
    is the correctly rounded ratio of integer totals; ``exact`` returns it as
    a :class:`~fractions.Fraction`.
    """
    n = len(events)
    if n == 0:
        raise ValueError("acceptance_length needs at least one event")
    total = int(events.accepted.sum()) + (n if include_verifier_token else 0)
    return Fraction(total, n) if exact else total / n


def acceptance_by_index(events: AcceptanceEvents, exact: bool = False):
    """Fraction of steps whose draft token ``k`` was accepted, for k < D.

    Floats are correctly rounded count ratios; ``exact`` returns a list of
    :class:`~fractions.Fraction`.
    """
    n = len(events)
    if n == 0:
        raise ValueError("acceptance_by_index needs at least one event")
    D = np.unique(events.draft_lengths)
    if D.size != 1:
        raise ValueError(f"events mix draft lengths {D.tolist()}")
    k = np.arange(int(D[0]))
    counts = (events.accepted[:, None] >= k[None, :] + 1).sum(axis=0)
    return [Fraction(int(c), n) for c in counts] if exact else counts / n


def rates_csv(rates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "rate"])
    for k, r in enumerate(rates):
        w.writerow([k, repr(float(r))])
    return buf.getvalue()


@dataclass
class Generation:
    tokens: list
    events: AcceptanceEvents
    mode: str
    emitted_per_step: list = field(default_factory=list)


def _greedy_draft(lm: ToyLm, history, rng) -> int:
    # ties among maximal entries are broken uniformly at random
    p = lm.dist(history)
    best = np.flatnonzero(p == p.max())
    return int(best[0]) if best.size == 1 else int(best[int(rng.integers(best.size))])


def _residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    r = np.maximum(p - q, 0.0)
    s = r.sum()
    return p if s <= 0 else r / s


def _sample(p: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right")), p.size - 1)


def simulate_generation(target: ToyLm, drafter: ToyLm, D: int, steps: int, mode: str = "greedy",
                        rng: np.random.Generator | None = None, prompt=()) -> Generation:
    """Run ``steps`` verification steps.

    ``greedy``: the drafter proposes its argmax tokens (random tie-break) and
    the verifier keeps the prefix matching the target argmax, then emits the
    target argmax at the next position. ``lossless``: the drafter samples,
    token ``k`` is kept with probability ``min(1, p/q)``, a rejection is
    replaced by a draw from ``max(p - q, 0)`` normalized, and a full accept
    earns a bonus draw from the target.
    """
    if target.vocab != drafter.vocab:
        raise ValueError(f"vocab mismatch: target {target.vocab}, drafter {drafter.vocab}")
    if D < 0 or steps < 0:
        raise ValueError("D and steps must be >= 0")
    if mode not in ("greedy", "lossless"):
        raise ValueError(f"mode must be 'greedy' or 'lossless', got {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    history = list(prompt)
    start = len(history)
    accepted = []
    emitted = []
    for _ in range(steps):
        drafts = []
        qs = []
        for _k in range(D):
            if mode == "greedy":
                tok = _greedy_draft(drafter, history + drafts, rng)
            else:
                q = drafter.dist(history + drafts)
                tok = _sample(q, rng.random())
                qs.append(q)
            drafts.append(tok)
        if mode == "greedy":
            targets = [target.argmax(history + drafts[:k]) for k in range(D)]
            n = verify_greedy(drafts, targets)
            extra = targets[n] if n < D else target.argmax(history + drafts)
        else:
            n = 0
            extra = None
            for k in range(D):
                p = target.dist(history + drafts[:k])
                pk, qk = p[drafts[k]], qs[k][drafts[k]]
                if rng.random() * qk < pk:
                    n += 1
                    continue
                extra = _sample(_residual(p, qs[k]), rng.random())
                break
            if extra is None:
                extra = _sample(target.dist(history + drafts), rng.random())
        history.extend(drafts[:n])
        history.append(extra)
        accepted.append(n)
        emitted.append(n + 1)
    return Generation(history[start:], AcceptanceEvents.uniform(D, accepted), mode, emitted)


def exact_prefix_distribution(target: ToyLm, length: int, prompt=()) -> np.ndarray:
    """Joint probability of the first ``length`` target tokens, shape ``(V,)*length``."""
    V = target.vocab
    out = np.zeros((V,) * length)
    for seq in np.ndindex(*out.shape):
        prob = 1.0
        hist = list(prompt)
        for tok in seq:
            prob *= target.dist(hist)[tok]
            hist.append(tok)
        out[seq] = prob
    return out
