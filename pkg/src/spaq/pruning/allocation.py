"""Sensitivity-weighted distribution of a global pruning budget across layers."""
from __future__ import annotations

import logging
from typing import Dict, Optional

from .sensitivity import SensitivityProfile
from .surgery import PruningPlan

log = logging.getLogger(__name__)

P_MAX = 0.8
WEIGHTINGS = ("direct", "inverse")


class InfeasibleBudgetError(ValueError):
    pass


def layer_weights(profile: SensitivityProfile, weighting: str = "direct") -> Dict[str, float]:
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    F, S = profile.parameter_fraction, profile.relative_sensitivity
    if weighting == "direct":
        return {k: F[k] * S[k] for k in profile.layers}
    return {k: F[k] * (1.0 - S[k]) for k in profile.layers}


def allocate_budget(profile: SensitivityProfile, global_rate: float,
                    params: Optional[Dict[str, int]] = None, p_max: float = P_MAX,
                    weighting: str = "direct") -> PruningPlan:
    """Per-layer pruning fractions for a global parameter pruning rate.

    Each layer's share of the pruned-parameter budget is proportional to
    F·S (``direct``) or F·(1−S) (``inverse``), so that
    p_i = P_g · w_i / (F_i · Σw). Fractions above ``p_max`` are clamped and
    their excess is handed to the unclamped layers in proportion to their
    weights until nothing exceeds the cap.
    """
    if not 0 < global_rate < 1:
        raise ValueError(f"global rate must lie in (0, 1), got {global_rate}")
    layers = profile.layers
    if params is not None:
        missing = set(layers) - set(params)
        if missing:
            raise ValueError(f"parameter counts missing for {sorted(missing)}")
        total = sum(params[k] for k in layers)
        F = {k: params[k] / total for k in layers}
    else:
        F = dict(profile.parameter_fraction)
    if global_rate > p_max * sum(F.values()) + 1e-12:
        raise InfeasibleBudgetError(f"global rate {global_rate} exceeds what p_max={p_max} allows")

    if profile.degenerate:
        log.warning("degenerate sensitivity profile: pruning every layer uniformly")
        return PruningPlan(global_rate, {k: global_rate for k in layers})

    scaled = SensitivityProfile(profile.induced_error, profile.relative_sensitivity, F, profile.probe_rate)
    w = layer_weights(scaled, weighting)
    p: Dict[str, float] = {}
    clamped: Dict[str, float] = {}
    while True:
        free = [k for k in layers if k not in clamped]
        budget = global_rate - sum(p_max * F[k] for k in clamped)
        wsum = sum(w[k] for k in free)
        if budget > 1e-15 and wsum <= 0:
            raise InfeasibleBudgetError("remaining budget cannot be placed: unclamped layers all have zero weight")
        for k in free:
            p[k] = budget * w[k] / (F[k] * wsum) if wsum > 0 else 0.0
        over = [k for k in free if p[k] > p_max]
        if not over:
            break
        for k in over:
            clamped[k] = p_max
            p[k] = p_max
    return PruningPlan(global_rate, {k: p[k] for k in layers})
