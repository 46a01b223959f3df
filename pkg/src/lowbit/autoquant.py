"""Mixed-precision format assignment as an exact multiple-choice knapsack.

Each decision unit (an ungrouped operator, or a fusion / MoE sparse-expert
group collapsed into one operator) picks exactly one format. The objective is
the summed sensitivity; the constraint is the summed cost against a budget.

:func:`solve` runs a dynamic program over the Pareto frontier of (cost,
sensitivity) partial sums. Partial sums are accumulated in unit order, the
same order :func:`brute_force` uses, so both routes produce bit-identical
totals on the same instance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FORMAT_BITS",
    "Candidate",
    "OperatorNode",
    "GroupConstraint",
    "AssignmentProblem",
    "Solution",
    "InfeasibleBudgetError",
    "sensitivity",
    "aggregate_fusion",
    "decision_units",
    "solve",
    "brute_force",
    "effective_bits",
    "prune_dominated",
    "synthetic_hybrid_problem",
]

FORMAT_BITS = {"NVFP4": 4, "FP8": 8, "BF16": 16}


def format_bits(label: str) -> int:
    try:
        return FORMAT_BITS[label.upper()]
    except KeyError:
        raise ValueError(f"unknown format label {label!r}; known: {sorted(FORMAT_BITS)}") from None


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget: float, min_cost: float):
        super().__init__(f"budget {budget} is below the minimal achievable cost {min_cost}")
        self.budget = budget
        self.min_cost = min_cost


def sensitivity(delta_y, grad_y) -> float:
    """Diagonal-Fisher proxy ``sum_k (dY_k)^2 (g_k)^2``."""
    dy = np.asarray(delta_y, dtype=np.float64).ravel()
    g = np.asarray(grad_y, dtype=np.float64).ravel()
    if dy.shape != g.shape:
        raise ValueError(f"delta_y and grad_y lengths differ: {dy.size} vs {g.size}")
    return float(np.sum(np.square(dy) * np.square(g)))


@dataclass(frozen=True)
class Candidate:
    label: str
    sensitivity: float
    cost: float | None = None

    def __post_init__(self):
        if not self.sensitivity >= 0:
            raise ValueError(f"sensitivity must be >= 0, got {self.sensitivity}")
        if self.cost is not None and not self.cost >= 0:
            raise ValueError(f"cost must be >= 0, got {self.cost}")


@dataclass
class OperatorNode:
    id: str
    candidates: list
    params: int | None = None
    group: str | None = None

    def __post_init__(self):
        self.candidates = [c if isinstance(c, Candidate) else Candidate(*c) for c in self.candidates]
        if not self.candidates:
            raise ValueError(f"node {self.id!r} has no candidates")
        labels = [c.label for c in self.candidates]
        if len(set(labels)) != len(labels):
            raise ValueError(f"node {self.id!r} repeats a format label")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.candidates]


@dataclass
class GroupConstraint:
    """Members share one format.

    For ``fusion`` groups sensitivity and cost add over members. For
    ``moe`` groups cost adds over members while sensitivity is the single
    block-output measurement in ``sensitivity`` (label -> S); without it the
    member sum is used.
    """

    id: str
    kind: str
    members: list
    sensitivity: dict | None = None

    def __post_init__(self):
        if self.kind not in ("fusion", "moe"):
            raise ValueError(f"group kind must be 'fusion' or 'moe', got {self.kind!r}")
        if not self.members:
            raise ValueError(f"group {self.id!r} has no members")


@dataclass
class AssignmentProblem:
    nodes: list
    budget: float
    groups: list = field(default_factory=list)
    cost_unit: str = "flops"

    def __post_init__(self):
        if self.cost_unit not in ("flops", "bits"):
            raise ValueError(f"cost_unit must be 'flops' or 'bits', got {self.cost_unit!r}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        for n in self.nodes:
            explicit = [c.cost is not None for c in n.candidates]
            if self.cost_unit == "flops" and not all(explicit):
                raise ValueError(f"node {n.id!r}: flops problems need an explicit cost per candidate")
            if self.cost_unit == "bits":
                if any(explicit):
                    raise ValueError(f"node {n.id!r}: explicit costs cannot be mixed into a bits problem")
                if n.params is None or n.params <= 0:
                    raise ValueError(f"node {n.id!r}: bits problems need a positive params count")
        seen = set()
        for g in self.groups:
            for m in g.members:
                if m not in ids:
                    raise ValueError(f"group {g.id!r} references unknown node {m!r}")
                if m in seen:
                    raise ValueError(f"node {m!r} belongs to more than one group")
                seen.add(m)

    @property
    def total_params(self) -> int:
        return sum(n.params or 0 for n in self.nodes)

    def cost_of(self, node: OperatorNode, cand: Candidate) -> float:
        if self.cost_unit == "bits":
            return float(format_bits(cand.label) * node.params)
        return float(cand.cost)

    # JSON ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "cost_unit": self.cost_unit,
            "budget": self.budget,
            "nodes": [
                {
                    "id": n.id,
                    **({"params": n.params} if n.params is not None else {}),
                    "candidates": [
                        {"format": c.label, "sensitivity": c.sensitivity,
                         **({"cost": c.cost} if c.cost is not None else {})}
                        for c in n.candidates
                    ],
                }
                for n in self.nodes
            ],
            "groups": [
                {"id": g.id, "kind": g.kind, "members": list(g.members),
                 **({"sensitivity": g.sensitivity} if g.sensitivity else {})}
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssignmentProblem":
        unit = d.get("cost_unit", "flops")
        nodes = [
            OperatorNode(
                id=str(n["id"]),
                candidates=[Candidate(c["format"], float(c["sensitivity"]),
                                      None if c.get("cost") is None else float(c["cost"]))
                            for c in n["candidates"]],
                params=n.get("params"),
            )
            for n in d["nodes"]
        ]
        groups = [GroupConstraint(str(g["id"]), g["kind"], [str(m) for m in g["members"]], g.get("sensitivity"))
                  for g in d.get("groups", [])]
        budget = d.get("budget")
        if budget is None and "budget_bits" in d:
            total = sum(n.params or 0 for n in nodes)
            budget = float(d["budget_bits"]) * total
        if budget is None:
            raise ValueError("problem needs 'budget' (or 'budget_bits' for bits problems)")
        return cls(nodes=nodes, budget=float(budget), groups=groups, cost_unit=unit)

    @classmethod
    def from_json(cls, text: str) -> "AssignmentProblem":
        return cls.from_dict(json.loads(text))


def aggregate_fusion(members: list[OperatorNode], costs: list[list[float]] | None = None) -> list[Candidate]:
    """Per format, sum member sensitivities and costs.

    ``costs`` overrides the member candidates' own costs (used for bits
    problems where cost derives from parameter counts).
    """
    if not members:
        raise ValueError("fusion needs at least one member")
    labels = members[0].labels
    for m in members[1:]:
        if sorted(m.labels) != sorted(labels):
            raise ValueError(f"fusion members disagree on formats: {labels} vs {m.labels}")
    out = []
    for label in labels:
        s = 0.0
        c = 0.0
        for i, m in enumerate(members):
            cand = next(x for x in m.candidates if x.label == label)
            s += cand.sensitivity
            c += costs[i][m.labels.index(label)] if costs is not None else (cand.cost or 0.0)
        out.append(Candidate(label, s, c))
    return out


@dataclass(frozen=True)
class Unit:
    id: str
    members: tuple
    labels: tuple
    sensitivity: tuple
    cost: tuple


def decision_units(problem: AssignmentProblem) -> list[Unit]:
    """Collapse groups; return units sorted by id with labels sorted."""
    by_id = {n.id: n for n in problem.nodes}
    grouped = {m for g in problem.groups for m in g.members}
    units = []
    for g in problem.groups:
        members = [by_id[m] for m in g.members]
        costs = [[problem.cost_of(m, c) for c in m.candidates] for m in members]
        agg = aggregate_fusion(members, costs)
        if g.kind == "moe" and g.sensitivity:
            missing = set(a.label for a in agg) - set(g.sensitivity)
            if missing:
                raise ValueError(f"group {g.id!r} lacks block-output sensitivity for {sorted(missing)}")
            agg = [Candidate(a.label, float(g.sensitivity[a.label]), a.cost) for a in agg]
        units.append(_unit(g.id, tuple(g.members), agg))
    for n in problem.nodes:
        if n.id not in grouped:
            cands = [Candidate(c.label, c.sensitivity, problem.cost_of(n, c)) for c in n.candidates]
            units.append(_unit(n.id, (n.id,), cands))
    return sorted(units, key=lambda u: u.id)


def _unit(uid, members, cands) -> Unit:
    cands = sorted(cands, key=lambda c: c.label)
    return Unit(uid, members, tuple(c.label for c in cands), tuple(c.sensitivity for c in cands),
                tuple(c.cost for c in cands))


def prune_dominated(cands: list[Candidate]) -> list[Candidate]:
    """Drop candidates another candidate beats or ties in both S and C (keeping one of exact ties)."""
    keep = []
    for i, a in enumerate(cands):
        dominated = False
        for j, b in enumerate(cands):
            if i == j:
                continue
            if b.sensitivity <= a.sensitivity and b.cost <= a.cost:
                strict = b.sensitivity < a.sensitivity or b.cost < a.cost
                if strict or j < i:
                    dominated = True
                    break
        if not dominated:
            keep.append(a)
    return keep


@dataclass
class Solution:
    assignment: dict
    unit_choices: dict
    total_sensitivity: float
    total_cost: float
    budget: float

    def to_dict(self) -> dict:
        return {
            "assignment": dict(sorted(self.assignment.items())),
            "units": dict(sorted(self.unit_choices.items())),
            "total_sensitivity": self.total_sensitivity,
            "total_cost": self.total_cost,
            "budget": self.budget,
        }


def _solution(problem, units, choice_idx, total_s, total_c) -> Solution:
    assignment = {}
    unit_choices = {}
    for u, k in zip(units, choice_idx):
        unit_choices[u.id] = u.labels[k]
        for m in u.members:
            assignment[m] = u.labels[k]
    return Solution(assignment, unit_choices, total_s, total_c, problem.budget)


def _min_cost(units) -> float:
    total = 0.0
    for u in units:
        total += min(u.cost)
    return total


def solve(problem: AssignmentProblem) -> Solution:
    """Provably optimal assignment.

    Among assignments with total cost <= budget the total sensitivity is
    minimal; remaining ties go to the lexicographically smallest sequence of
    format labels taken in unit-id order.
    """
    units = decision_units(problem)
    # frontier entries: (cost, sens, choice tuple); sorted by cost then sens then choices
    frontier = [(0.0, 0.0, ())]
    for u in units:
        nxt = []
        for c, s, ch in frontier:
            for k in range(len(u.labels)):
                nc = c + u.cost[k]
                if nc <= problem.budget:
                    nxt.append((nc, s + u.sensitivity[k], ch + (k,)))
        if not nxt:
            raise InfeasibleBudgetError(problem.budget, _min_cost(units))
        nxt.sort()
        frontier = []
        best_s = None
        best_ch = None
        for c, s, ch in nxt:
            # keep only entries not beaten by a cheaper (or equal-cost, earlier) one
            if best_s is None or s < best_s or (s == best_s and ch < best_ch):
                frontier.append((c, s, ch))
                best_s, best_ch = s, ch
    c, s, ch = min(frontier, key=lambda e: (e[1], e[2]))
    return _solution(problem, units, ch, s, c)


def brute_force(problem: AssignmentProblem, max_assignments: int = 20_000_000) -> Solution:
    """Exhaustive enumeration oracle, for small problems only.

    Totals accumulate unit by unit in the same order as :func:`solve`, so the
    two agree bit for bit. The first minimum in C order is the
    lexicographically smallest choice tuple.
    """
    units = decision_units(problem)
    sizes = [len(u.labels) for u in units]
    if math.prod(sizes) > max_assignments:
        raise ValueError(f"{math.prod(sizes)} assignments exceed the enumeration limit {max_assignments}")
    c = np.zeros(())
    s = np.zeros(())
    for u in units:
        c = c[..., None] + np.array(u.cost)
        s = s[..., None] + np.array(u.sensitivity)
    feasible = c <= problem.budget
    if not np.any(feasible):
        raise InfeasibleBudgetError(problem.budget, _min_cost(units))
    flat = int(np.argmin(np.where(feasible, s, np.inf), axis=None))
    ch = tuple(int(k) for k in np.unravel_index(flat, sizes)) if sizes else ()
    return _solution(problem, units, ch, float(s[ch]), float(c[ch]))


def effective_bits(assignment: dict, params: dict) -> float:
    """Parameter-weighted mean bit width of an assignment."""
    total = 0
    weighted = 0
    for node, label in assignment.items():
        if node not in params:
            raise ValueError(f"no parameter count for node {node!r}")
        weighted += format_bits(label) * params[node]
        total += params[node]
    if total <= 0:
        raise ValueError("total parameter count must be positive")
    return weighted / total


def synthetic_hybrid_problem(layers: int = 2, experts: int = 8, expert_params: int = 8_000_000,
                             budget_bits: float = 4.75, seed: int = 0) -> AssignmentProblem:
    """A hybrid-model-shaped instance in effective bits.

    Each layer has a fused QKV group, an attention output projection, Mamba
    in/out projections, a shared expert and a sparse-expert MoE group. Sparse
    experts dominate the parameter count and are the least sensitive per
    parameter; their group sensitivity is a single block-output value.
    Sensitivity per parameter scales as 1 (NVFP4), 1/16 (FP8) and 0 (BF16).
    """
    rng = np.random.default_rng(seed)
    factor = {"NVFP4": 1.0, "FP8": 1.0 / 16, "BF16": 0.0}
    nodes, groups = [], []

    def node(nid, params, per_param):
        s = per_param * params / 1e6
        return OperatorNode(nid, [Candidate(f, s * k) for f, k in factor.items()], params=params)

    for layer in range(layers):
        pre = f"L{layer}"
        qkv = [node(f"{pre}.attn.{p}", 1_000_000, rng.uniform(1.0, 3.0)) for p in "qkv"]
        nodes += qkv
        groups.append(GroupConstraint(f"{pre}.attn.qkv", "fusion", [n.id for n in qkv]))
        nodes.append(node(f"{pre}.attn.o", 1_000_000, rng.uniform(1.0, 3.0)))
        nodes.append(node(f"{pre}.mamba.in_proj", 2_000_000, rng.uniform(1.0, 3.0)))
        nodes.append(node(f"{pre}.mamba.out_proj", 1_000_000, rng.uniform(1.0, 3.0)))
        nodes.append(node(f"{pre}.moe.shared", 2_000_000, rng.uniform(1.0, 3.0)))
        members = [node(f"{pre}.moe.expert{e}", expert_params, rng.uniform(0.05, 0.1)) for e in range(experts)]
        nodes += members
        block = rng.uniform(0.05, 0.1) * experts * expert_params / 1e6
        groups.append(GroupConstraint(f"{pre}.moe.experts", "moe", [n.id for n in members],
                                      {f: block * k for f, k in factor.items()}))
    total = sum(n.params for n in nodes)
    return AssignmentProblem(nodes, budget_bits * total, groups, "bits")
