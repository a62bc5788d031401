"""Layer-wise sensitivity probing."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

from ..graph import ModelGraph
from .dependency import prune_units, unit_params
from .surgery import apply_plan, filter_count, make_plan

log = logging.getLogger(__name__)


class DegenerateSensitivityError(ValueError):
    """Every probe induced zero error, so relative sensitivities are undefined."""


class ProbeError(RuntimeError):
    pass


@dataclass
class SensitivityProfile:
    induced_error: Dict[str, float]
    relative_sensitivity: Dict[str, float]
    parameter_fraction: Dict[str, float]
    probe_rate: float
    evaluator: str = ""
    baseline_error: Optional[float] = None
    degenerate: bool = False

    @property
    def layers(self) -> List[str]:
        return list(self.induced_error)

    def to_dict(self) -> dict:
        return {
            "probe_rate": self.probe_rate,
            "evaluator": self.evaluator,
            "baseline_error": self.baseline_error,
            "degenerate": self.degenerate,
            "layers": [{"layer": k,
                        "induced_error": self.induced_error[k],
                        "relative_sensitivity": self.relative_sensitivity[k],
                        "parameter_fraction": self.parameter_fraction[k]} for k in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SensitivityProfile":
        rows = doc["layers"]
        return cls({r["layer"]: r["induced_error"] for r in rows},
                   {r["layer"]: r["relative_sensitivity"] for r in rows},
                   {r["layer"]: r["parameter_fraction"] for r in rows},
                   doc["probe_rate"], doc.get("evaluator", ""), doc.get("baseline_error"),
                   doc.get("degenerate", False))


def probe_layer(graph: ModelGraph, layer: str, x: float, evaluator, units=None) -> float:
    """Error of a temporary copy of ``graph`` with a fraction ``x`` of ``layer``'s
    least salient filters removed. ``graph`` itself is not modified."""
    if not 0 < x < 1:
        raise ValueError(f"probe rate must lie in (0, 1), got {x}")
    units = units or prune_units(graph)
    by_name = {u.name: u for u in units}
    if layer not in by_name:
        raise ValueError(f"{layer!r} is not a prunable layer")
    try:
        if filter_count(x, by_name[layer].channels) == 0:
            return float(evaluator.evaluate(graph))
        plan = make_plan(graph, {layer: x}, units=units)
        return float(evaluator.evaluate(apply_plan(graph, plan, units)))
    except Exception as exc:
        raise ProbeError(f"probing layer {layer!r} failed: {exc}") from exc


def analyze_sensitivity(graph: ModelGraph, x: float, evaluator, subtract_baseline: bool = False,
                        threads: int = 1, strict: bool = True) -> SensitivityProfile:
    """Probe every prunable layer once and derive S and F.

    Probes are independent; they run on a thread pool when ``threads > 1``
    and the evaluator declares itself parallel-safe. With ``strict=False`` a
    profile whose errors are all zero is returned flagged ``degenerate``
    instead of raising.
    """
    units = prune_units(graph)
    if not units:
        raise ValueError("graph has no prunable layers")
    names = [u.name for u in units]
    baseline = float(evaluator.evaluate(graph)) if subtract_baseline else None

    def run(name):
        return probe_layer(graph, name, x, evaluator, units)

    if threads > 1 and getattr(evaluator, "parallel_safe", False):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            errors = list(pool.map(run, names))
    else:
        errors = [run(n) for n in names]
    if baseline is not None:
        errors = [max(0.0, e - baseline) for e in errors]
    errors = [max(0.0, e) for e in errors]

    total = sum(errors)
    counts = unit_params(graph, units)
    ptotal = sum(counts.values())
    fractions = {n: counts[n] / ptotal for n in names}
    degenerate = total <= 0
    if degenerate:
        if strict:
            raise DegenerateSensitivityError("degenerate sensitivity: every probe induced zero error")
        log.warning("degenerate sensitivity: all probes induced zero error")
        rel = {n: 1.0 / len(names) for n in names}
    else:
        rel = {n: e / total for n, e in zip(names, errors)}
    return SensitivityProfile(dict(zip(names, errors)), rel, fractions, x,
                              getattr(evaluator, "name", type(evaluator).__name__), baseline, degenerate)
