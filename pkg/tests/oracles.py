"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np
from scipy.integrate import quad

from lowbit import autoquant as aq
from lowbit import moe

LABELS = ("BF16", "FP8", "NVFP4")


def quad_coefficients(tokens, horizon, peak=1.0, low=0.0):
    """Weights from numerically integrating the schedule's rate of decay over each interval."""
    end = tokens[-1]
    start = end - horizon
    c = (peak - low) / (2 * np.sqrt(horizon))
    edges = [start, *tokens]
    drops = []
    for a, b in zip(edges[:-1], edges[1:]):
        if a == start:
            # integrable (tau - start)^(-1/2) singularity handled by the algebraic weight
            val, _ = quad(lambda _: c, a, b, weight="alg", wvar=(-0.5, 0.0), epsabs=1e-15, epsrel=1e-13)
        else:
            val, _ = quad(lambda x: c / np.sqrt(x - start), a, b, epsabs=1e-15, epsrel=1e-13)
        drops.append(val)
    drops = np.array(drops)
    return drops / drops.sum()


def random_problem(rng, units=None, integer=False, groups=True):
    """Random flops instance; some nodes are fused into groups of up to 3."""
    n_units = units or int(rng.integers(1, 13))
    nodes, gs = [], []

    def cand():
        if integer:
            s, c = rng.integers(0, 20, 3).astype(float), rng.integers(1, 20, 3).astype(float)
        else:
            s, c = rng.exponential(1.0, 3), rng.exponential(1.0, 3)
        return [aq.Candidate(lbl, float(a), float(b)) for lbl, a, b in zip(LABELS, s, c)]

    for u in range(n_units):
        size = int(rng.integers(1, 4)) if groups else 1
        ids = [f"u{u:02d}.{i}" for i in range(size)]
        nodes += [aq.OperatorNode(i, cand()) for i in ids]
        if size > 1:
            gs.append(aq.GroupConstraint(f"u{u:02d}", "fusion", ids))
    units_ = aq.decision_units(aq.AssignmentProblem(nodes, float("inf"), gs))
    lo = sum(min(u.cost) for u in units_)
    hi = sum(max(u.cost) for u in units_)
    budget = float(rng.uniform(lo, hi))
    return aq.AssignmentProblem(nodes, budget, gs)


def fold_latent_projections(p):
    """Standard-MoE parameters equal to latent experts with ``w_down``/``w_up`` folded into each expert."""
    gate = None if p.expert_gate is None else p.expert_gate @ p.w_down
    return moe.MoeParams(p.expert_in @ p.w_down, p.w_up @ p.expert_out, p.shared_in, p.shared_out, gate,
                         p.shared_gate)
