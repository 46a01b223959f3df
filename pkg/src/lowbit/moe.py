"""Reference MoE / LatentMoE forward passes, sigmoid routing and the cost model.

Shapes: a token ``x`` has length ``d``. Routed experts act in dimension
``latent`` (equal to ``d`` for a standard MoE). Expert ``e`` holds
``expert_in[e]`` (m, latent) and ``expert_out[e]`` (latent, m), plus
``expert_gate[e]`` (m, latent) for the three-matrix gated form. The router
gate is (N, d) and always reads the full-dimension token, as do the shared
expert and the down/up projections' surroundings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from ._validation import check_finite

__all__ = [
    "MoeConfig",
    "CostReport",
    "RouterState",
    "MoeParams",
    "Routing",
    "cost_report",
    "route",
    "route_scores",
    "routing_statistics",
    "forward_standard",
    "forward_latent",
    "update_bias_auxfree",
    "load_balance_loss",
    "sigmoid",
]


@dataclass(frozen=True)
class MoeConfig:
    d: int
    latent: int
    n_experts: int
    top_k: int
    m: int
    shared_intermediate: int = 0
    matrices_per_expert: int = 2

    def __post_init__(self):
        for name in ("d", "latent", "n_experts", "top_k", "m"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.latent > self.d:
            raise ValueError("latent dimension cannot exceed the hidden dimension")
        if self.matrices_per_expert not in (2, 3):
            raise ValueError("matrices_per_expert must be 2 or 3")
        if self.shared_intermediate < 0:
            raise ValueError("shared_intermediate must be non-negative")

    @classmethod
    def standard(cls, d, n_experts, top_k, m, **kw) -> "MoeConfig":
        return cls(d=d, latent=d, n_experts=n_experts, top_k=top_k, m=m, **kw)

    @property
    def alpha(self) -> float:
        return self.d / self.latent

    @property
    def is_latent(self) -> bool:
        return self.latent < self.d

    def latent_variant(self, alpha: int) -> "MoeConfig":
        """Shrink the expert dimension by ``alpha`` and grow N and K by it."""
        if self.is_latent:
            raise ValueError("latent variants are built from a standard config")
        if not isinstance(alpha, (int, np.integer)) or alpha < 1:
            raise ValueError(f"alpha must be an integer >= 1, got {alpha!r}")
        if self.d % alpha:
            raise ValueError(f"alpha={alpha} does not divide d={self.d}")
        return replace(self, latent=self.d // alpha, n_experts=self.n_experts * alpha,
                       top_k=self.top_k * alpha)

    def standard_counterpart(self) -> "MoeConfig":
        """The standard MoE with the same routed cost: N/alpha experts, K/alpha active."""
        a, rem = divmod(self.d, self.latent)
        if rem:
            raise ValueError(f"d/latent = {self.d}/{self.latent} is not an integer")
        for name, v in (("n_experts", self.n_experts), ("top_k", self.top_k)):
            if v % a:
                raise ValueError(f"{name}={v} is not divisible by alpha={a} "
                                 f"(counterpart would need {name}={v / a})")
        return replace(self, latent=self.d, n_experts=self.n_experts // a, top_k=self.top_k // a)

    def to_dict(self) -> dict:
        return {
            "d": self.d, "latent": self.latent, "n_experts": self.n_experts, "top_k": self.top_k,
            "m": self.m, "shared_intermediate": self.shared_intermediate,
            "matrices_per_expert": self.matrices_per_expert,
        }


@dataclass(frozen=True)
class CostReport:
    routed_weight_elements_per_token: int
    alltoall_elements_per_token: int
    dense_latent_projection_flops_per_token: int
    log10_combinations: float
    nonlinear_budget: int

    UNITS = {
        "routed_weight_elements_per_token": "elements/token",
        "alltoall_elements_per_token": "elements/token",
        "dense_latent_projection_flops_per_token": "flops/token",
        "log10_combinations": "log10(count)",
        "nonlinear_budget": "intermediate units (K*m)",
    }

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.UNITS}


def cost_report(cfg: MoeConfig) -> CostReport:
    """Closed-form per-token loads of one MoE layer."""
    return CostReport(
        routed_weight_elements_per_token=cfg.top_k * cfg.matrices_per_expert * cfg.latent * cfg.m,
        # dispatch + combine
        alltoall_elements_per_token=2 * cfg.top_k * cfg.latent,
        dense_latent_projection_flops_per_token=(2 * cfg.d * cfg.latent * 2) if cfg.is_latent else 0,
        log10_combinations=math.log10(math.comb(cfg.n_experts, cfg.top_k)),
        nonlinear_budget=cfg.top_k * cfg.m,
    )


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


@dataclass
class RouterState:
    """Sigmoid router with selection-only expert biases.

    ``gamma`` is the aux-loss-free bias update rate and ``balance_coefficient``
    scales the load-balance loss.
    """

    gate: np.ndarray
    bias: np.ndarray
    top_k: int
    gamma: float = 1e-3
    balance_coefficient: float = 1e-4

    def __post_init__(self):
        self.gate = check_finite(self.gate, "router gate")
        self.bias = check_finite(self.bias, "router bias")
        if self.gate.ndim != 2 or self.bias.shape != (self.gate.shape[0],):
            raise ValueError("router gate must be (N, d) and bias length N")
        if not 1 <= self.top_k <= self.gate.shape[0]:
            raise ValueError(f"top_k={self.top_k} must lie in [1, N={self.gate.shape[0]}]")

    @property
    def n_experts(self) -> int:
        return self.gate.shape[0]

    @classmethod
    def random(cls, n_experts: int, d: int, top_k: int, rng: np.random.Generator, scale: float = 1.0,
               **kw) -> "RouterState":
        gate = rng.normal(scale=scale / np.sqrt(d), size=(n_experts, d))
        return cls(gate, np.zeros(n_experts), top_k, **kw)


@dataclass(frozen=True)
class Routing:
    selected: np.ndarray
    combine_weights: np.ndarray
    scores: np.ndarray


def route_scores(scores, bias, top_k: int) -> Routing:
    """Top-K selection on ``scores + bias``; weights from the raw scores only.

    Ties break toward the lowest expert id. Selected experts are returned in
    decreasing biased-score order.
    """
    scores = check_finite(scores, "scores")
    bias = check_finite(bias, "bias")
    n = scores.shape[0]
    if top_k > n or top_k < 1:
        raise ValueError(f"top_k={top_k} must lie in [1, N={n}]")
    adjusted = scores + bias
    order = np.lexsort((np.arange(n), -adjusted))
    selected = order[:top_k]
    raw = scores[selected]
    total = raw.sum()
    weights = raw / total if total > 0 else np.full(top_k, 1.0 / top_k)
    return Routing(selected, weights, scores)


def route(x_routing, router: RouterState) -> Routing:
    x = check_finite(x_routing, "routing input")
    if x.shape != (router.gate.shape[1],):
        raise ValueError(f"routing input has length {x.shape}, router expects {router.gate.shape[1]}")
    return route_scores(sigmoid(router.gate @ x), router.bias, router.top_k)


def routing_statistics(tokens, router: RouterState) -> dict:
    """Per-expert loads, routed fractions ``f`` (sum K) and mean scores ``P``."""
    tokens = np.atleast_2d(check_finite(tokens, "tokens"))
    loads = np.zeros(router.n_experts, dtype=np.int64)
    score_sum = np.zeros(router.n_experts)
    for x in tokens:
        r = route(x, router)
        loads[r.selected] += 1
        score_sum += r.scores
    t = tokens.shape[0]
    return {"loads": loads, "f": loads / t, "P": score_sum / t}


def update_bias_auxfree(router: RouterState, loads) -> RouterState:
    """``bias_i += gamma * sign(mean(loads) - loads_i)``; returns a new state."""
    loads = check_finite(loads, "loads")
    if loads.shape != (router.n_experts,):
        raise ValueError(f"loads must have length {router.n_experts}")
    if np.any(loads < 0):
        raise ValueError("loads must be non-negative")
    bias = router.bias + router.gamma * np.sign(loads.mean() - loads)
    return replace(router, bias=bias)


def load_balance_loss(f, P, coefficient: float = 1e-4) -> float:
    """``coefficient * sum_i f_i * P_i``.

    ``f_i`` is the fraction of tokens routed to expert ``i`` (so ``sum f = K``)
    and ``P_i`` the mean router score of expert ``i``. Uniform routing with
    ``P_i = p`` gives ``coefficient * K * p``.
    """
    f = check_finite(f, "f")
    P = check_finite(P, "P")
    if f.shape != P.shape:
        raise ValueError(f"f and P lengths differ: {f.shape} vs {P.shape}")
    return float(coefficient * np.sum(f * P))


@dataclass
class MoeParams:
    expert_in: np.ndarray
    expert_out: np.ndarray
    shared_in: np.ndarray
    shared_out: np.ndarray
    expert_gate: np.ndarray | None = None
    shared_gate: np.ndarray | None = None
    w_down: np.ndarray | None = None
    w_up: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return self.expert_in.shape[0]

    @property
    def expert_dim(self) -> int:
        return self.expert_in.shape[2]

    @classmethod
    def random(cls, cfg: MoeConfig, rng: np.random.Generator) -> "MoeParams":
        n, l, m, d, s = cfg.n_experts, cfg.latent, cfg.m, cfg.d, cfg.shared_intermediate
        gated = cfg.matrices_per_expert == 3
        p = cls(
            expert_in=rng.normal(scale=l**-0.5, size=(n, m, l)),
            expert_out=rng.normal(scale=m**-0.5, size=(n, l, m)),
            shared_in=rng.normal(scale=d**-0.5, size=(s, d)),
            shared_out=rng.normal(scale=max(s, 1) ** -0.5, size=(d, s)),
            expert_gate=rng.normal(scale=l**-0.5, size=(n, m, l)) if gated else None,
            shared_gate=rng.normal(scale=d**-0.5, size=(s, d)) if gated else None,
        )
        if cfg.is_latent:
            p.w_down = rng.normal(scale=d**-0.5, size=(l, d))
            p.w_up = rng.normal(scale=l**-0.5, size=(d, l))
        return p


def _ffn(z, w_in, w_out, w_gate=None):
    a = w_in @ z
    if w_gate is None:
        h = np.square(np.maximum(a, 0.0))
    else:
        g = w_gate @ z
        h = g * sigmoid(g) * a
    return w_out @ h


def _shared(x, params: MoeParams):
    if params.shared_in.shape[0] == 0:
        return np.zeros_like(x)
    return _ffn(x, params.shared_in, params.shared_out, params.shared_gate)


def _routed(z, params: MoeParams, routing: Routing):
    out = np.zeros(params.expert_out.shape[1])
    for e, wgt in zip(routing.selected, routing.combine_weights):
        gate = None if params.expert_gate is None else params.expert_gate[e]
        out += wgt * _ffn(z, params.expert_in[e], params.expert_out[e], gate)
    return out


def _check_router(router: RouterState, params: MoeParams, d: int):
    if router.n_experts != params.n_experts:
        raise ValueError(f"router has {router.n_experts} experts, params have {params.n_experts}")
    if router.gate.shape[1] != d:
        raise ValueError(f"router gate width {router.gate.shape[1]} != token dim {d}")


def forward_standard(x, params: MoeParams, router: RouterState) -> np.ndarray:
    """Experts in the hidden dimension: ``sum_e w_e Expert_e(x) + Shared(x)``."""
    x = check_finite(x, "token")
    _check_router(router, params, x.shape[0])
    if params.expert_dim != x.shape[0]:
        raise ValueError(f"expert dimension {params.expert_dim} != token dimension {x.shape[0]}")
    return _routed(x, params, route(x, router)) + _shared(x, params)


def forward_latent(x, params: MoeParams, router: RouterState) -> np.ndarray:
    """Experts in the latent space: ``W_up sum_e w_e Expert_e(W_down x) + Shared(x)``."""
    x = check_finite(x, "token")
    _check_router(router, params, x.shape[0])
    if params.w_down is None or params.w_up is None:
        raise ValueError("latent forward needs w_down and w_up")
    l, d = params.w_down.shape
    if d != x.shape[0] or params.w_up.shape != (d, l) or params.expert_dim != l:
        raise ValueError("projection or expert shapes do not match the latent dimension")
    z = params.w_down @ x
    return params.w_up @ _routed(z, params, route(x, router)) + _shared(x, params)
