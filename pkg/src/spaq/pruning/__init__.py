"""Structured filter pruning: saliency, sensitivity, budgets and surgery."""
from .allocation import P_MAX, WEIGHTINGS, InfeasibleBudgetError, allocate_budget, layer_weights
from .dependency import PruneUnit, prune_units, unit_params
from .pipeline import StageError, StageLog, calibrate_rate, check_schedule, default_schedule, spaq_prune
from .saliency import group_saliency, least_salient, saliency
from .sensitivity import (DegenerateSensitivityError, ProbeError, SensitivityProfile,
                          analyze_sensitivity, probe_layer)
from .surgery import PlanError, PruningPlan, apply_plan, filter_count, make_plan

__all__ = [
    "P_MAX", "WEIGHTINGS", "InfeasibleBudgetError", "allocate_budget", "layer_weights", "PruneUnit", "prune_units",
    "unit_params", "StageError", "StageLog", "calibrate_rate", "check_schedule", "default_schedule", "spaq_prune",
    "group_saliency", "least_salient", "saliency", "DegenerateSensitivityError", "ProbeError",
    "SensitivityProfile", "analyze_sensitivity", "probe_layer", "PlanError", "PruningPlan",
    "apply_plan", "filter_count", "make_plan",
]
