"""Iterative sensitivity-guided pruning with fine-tuning between steps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .. import accounting
from ..finetune import FinetuneConfig, SyntheticTask, finetune
from ..graph import ModelGraph
from .allocation import P_MAX, allocate_budget
from .dependency import prune_units, unit_params
from .sensitivity import analyze_sensitivity
from .surgery import apply_plan, make_plan

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: int, exc: Exception):
        super().__init__(f"stage {stage}: {exc}")
        self.stage = stage


@dataclass
class StageLog:
    stage: int
    cumulative_target: float
    incremental_rate: float
    nominal_rate: float
    profile: object
    plan: object
    params_before: int
    params_after: int
    loss_trace: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "cumulative_target": self.cumulative_target,
            "incremental_rate": self.incremental_rate,
            "nominal_rate": self.nominal_rate,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "profile": self.profile.to_dict(),
            "plan": self.plan.to_dict(),
            "loss_trace": list(self.loss_trace),
        }


def default_schedule(global_rate: float) -> List[float]:
    return [] if global_rate == 0 else [global_rate / 2, global_rate]


def check_schedule(schedule: Sequence[float], global_rate: float) -> List[float]:
    schedule = [float(s) for s in schedule]
    if global_rate == 0:
        if schedule:
            raise ValueError("a zero global rate takes an empty schedule")
        return schedule
    if not schedule or abs(schedule[-1] - global_rate) > 1e-12:
        raise ValueError(f"schedule must end at the global rate {global_rate}")
    prev = 0.0
    for s in schedule:
        if not prev < s < 1:
            raise ValueError(f"schedule must be strictly increasing within (0, 1): {schedule}")
        prev = s
    return schedule


def _total_params(graph: ModelGraph) -> int:
    return sum(accounting.count_params(graph).values())


def calibrate_rate(graph: ModelGraph, profile, n_remove: int, p_max: float = P_MAX,
                   weighting: str = "direct", iterations: int = 40):
    """Nominal allocation rate whose applied plan removes ``n_remove`` parameters.

    Removing a filter also removes its consumers' input slices, so an
    allocation computed on the layers' own parameters overshoots; bisection
    on the nominal rate picks the plan whose realised removal is closest.
    """
    units = prune_units(graph)
    counts = unit_params(graph, units)
    base = _total_params(graph)
    cap = p_max * 0.999
    best = []

    def realised(rate):
        plan = allocate_budget(profile, rate, counts, p_max, weighting)
        plan = make_plan(graph, plan.fractions, rate, units)
        pruned = apply_plan(graph, plan, units)
        removed = base - _total_params(pruned)
        if not best or abs(removed - n_remove) < best[0][0]:
            best[:] = [(abs(removed - n_remove), rate, plan, pruned)]
        return removed

    lo, hi = 0.0, min(n_remove / sum(counts.values()), cap)
    # widen the bracket until the realised removal reaches the target
    while realised(hi) < n_remove and hi < cap:
        lo, hi = hi, min(hi * 1.5, cap)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if realised(mid) < n_remove:
            lo = mid
        else:
            hi = mid
    _, rate, plan, pruned = best[0]
    return rate, plan, pruned


def spaq_prune(graph: ModelGraph, global_rate: float, evaluator, task: Optional[SyntheticTask] = None,
               schedule: Optional[Sequence[float]] = None, finetune_cfg: Optional[FinetuneConfig] = None,
               probe_rate: Optional[float] = None, p_max: float = P_MAX, weighting: str = "direct",
               subtract_baseline: bool = False, threads: int = 1):
    """Sensitivity analysis, budget allocation, surgery and fine-tuning per schedule step.

    The global rate is a fraction of the prunable layers' own parameters in
    the input graph; that many parameters are removed in total, counting the
    input slices dropped from consumer layers. ``schedule`` lists cumulative
    fractions (default: half the global rate, then the global rate); each
    step's probe rate defaults to its increment relative to the prunable
    parameters still present. Returns the final graph and one
    :class:`StageLog` per step.
    """
    if not 0 <= global_rate < 1:
        raise ValueError(f"global rate must lie in [0, 1), got {global_rate}")
    schedule = check_schedule(default_schedule(global_rate) if schedule is None else schedule, global_rate)
    cfg = finetune_cfg or FinetuneConfig()
    if cfg.steps and task is None:
        raise ValueError("fine-tuning needs a task")
    baseline = _total_params(graph)
    budget = sum(unit_params(graph, prune_units(graph)).values())
    logs: List[StageLog] = []
    current = graph
    for i, target in enumerate(schedule):
        try:
            before = _total_params(current)
            n_remove = int(round(target * budget)) - (baseline - before)
            incremental = n_remove / sum(unit_params(current, prune_units(current)).values())
            x = probe_rate if probe_rate is not None else incremental
            profile = analyze_sensitivity(current, x, evaluator, subtract_baseline, threads, strict=False)
            nominal, plan, pruned = calibrate_rate(current, profile, n_remove, p_max, weighting)
            trace = []
            if cfg.steps:
                pruned, trace = finetune(pruned, task, cfg)
            after = _total_params(pruned)
            log.info("stage %d: target %.3f, nominal rate %.4f, params %d -> %d", i, target, nominal, before, after)
            logs.append(StageLog(i, target, incremental, nominal, profile, plan, before, after, trace))
            current = pruned
        except Exception as exc:
            raise StageError(i, exc) from exc
    if not schedule and cfg.steps:
        current, trace = finetune(current, task, cfg)
    return current, logs
