"""Pruning plans and structural graph surgery."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..graph import ELEMENTWISE, GraphError, ModelGraph, infer_shapes, validate
from .dependency import PruneUnit, prune_units
from .saliency import group_saliency, least_salient


class PlanError(GraphError):
    pass


@dataclass
class PruningPlan:
    global_rate: float
    fractions: Dict[str, float]
    indices: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    groups: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "global_rate": self.global_rate,
            "fractions": dict(self.fractions),
            "indices": {k: list(map(int, v)) for k, v in self.indices.items()},
            "groups": {k: list(v) for k, v in self.groups.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PruningPlan":
        return cls(doc["global_rate"], dict(doc["fractions"]),
                   {k: tuple(v) for k, v in doc.get("indices", {}).items()},
                   {k: tuple(v) for k, v in doc.get("groups", {}).items()})


def filter_count(fraction: float, channels: int) -> int:
    """Filters removed for a fraction: round half up, always leaving one."""
    n = int(np.floor(fraction * channels + 0.5))
    return max(0, min(n, channels - 1))


def make_plan(graph: ModelGraph, fractions: Dict[str, float], global_rate: float = 0.0,
              units=None) -> PruningPlan:
    """Resolve per-unit fractions into concrete lowest-saliency filter indices."""
    units = {u.name: u for u in (units or prune_units(graph))}
    indices, groups = {}, {}
    for name, frac in fractions.items():
        if name not in units:
            raise PlanError(f"{name!r} is not a prunable unit")
        u = units[name]
        n = filter_count(frac, u.channels)
        indices[name] = tuple(int(i) for i in least_salient(group_saliency(graph, u.convs), n))
        groups[name] = u.convs
    return PruningPlan(global_rate, dict(fractions), indices, groups)


def apply_plan(graph: ModelGraph, plan: PruningPlan, units: Optional[list] = None) -> ModelGraph:
    """Remove the planned filters and every dependent channel slice.

    Producer convs lose output filters (weight rows and bias entries); norms
    lose affine entries; consumer convs and GRU cells lose the matching input
    channels. The input graph is left untouched.
    """
    units = {u.name: u for u in (units or prune_units(graph))}
    pruned_out: Dict[str, np.ndarray] = {}
    for name, idx in plan.indices.items():
        if name not in units:
            raise PlanError(f"plan targets {name!r}, which is not a prunable unit")
        u: PruneUnit = units[name]
        idx = np.asarray(sorted(set(int(i) for i in idx)), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= u.channels):
            raise PlanError(f"unit {name!r}: filter index out of range for {u.channels} channels")
        if idx.size >= u.channels:
            raise PlanError(f"unit {name!r}: plan would remove all {u.channels} filters")
        keep = np.setdiff1d(np.arange(u.channels), idx)
        for conv in u.convs:
            pruned_out[conv] = keep

    stride = max([s.stride for s in graph.inputs.values()] + [1])
    shapes = infer_shapes(graph, graph.input_shapes((8 * stride, 8 * stride)))
    keep: Dict[str, np.ndarray] = {k: np.arange(shapes[k][1]) for k in graph.inputs}
    nodes = []
    for n in graph.nodes:
        kin = keep[n.inputs[0]] if n.inputs else None
        full_in = kin is not None and len(kin) == shapes[n.inputs[0]][1]
        if n.kind == "Conv2d":
            kout = pruned_out.get(n.id, np.arange(n.attrs["out_channels"]))
            params = dict(n.params)
            w = params["weight"]
            if len(kout) != w.shape[0]:
                w = w[kout]
            if not full_in:
                w = w[:, kin]
            params["weight"] = np.ascontiguousarray(w)
            if n.attrs["bias"] and len(kout) != n.attrs["out_channels"]:
                params["bias"] = params["bias"][kout].copy()
            attrs = {**n.attrs, "in_channels": len(kin), "out_channels": len(kout)}
            node = n.replace(attrs=attrs, params=params)
        elif n.kind == "InstanceNorm":
            kout = kin
            params = n.params if full_in else {k: v[kin].copy() for k, v in n.params.items()}
            node = n.replace(params=params, attrs={**n.attrs, "channels": len(kin)})
        elif n.kind in ELEMENTWISE:
            kout, node = kin, n
        elif n.kind == "Add":
            for src in n.inputs[1:]:
                if not np.array_equal(keep[src], kin):
                    raise PlanError(f"node {n.id!r}: Add operands were pruned inconsistently")
            kout, node = kin, n
        elif n.kind == "Concat":
            parts, offset = [], 0
            for src in n.inputs:
                parts.append(keep[src] + offset)
                offset += shapes[src][1]
            kout, node = np.concatenate(parts), n
        elif n.kind == "ConvGRUCell":
            kh, kx = keep[n.inputs[0]], keep[n.inputs[1]]
            ch = shapes[n.inputs[0]][1]
            if len(kh) != ch:
                raise PlanError(f"node {n.id!r}: GRU hidden channels cannot be pruned")
            kout = kh
            params = dict(n.params)
            if len(kx) != shapes[n.inputs[1]][1]:
                sel = np.concatenate([np.arange(ch), ch + kx])
                for g in "zrq":
                    params[f"w{g}"] = np.ascontiguousarray(params[f"w{g}"][:, sel])
            node = n.replace(params=params, attrs={**n.attrs, "input_channels": len(kx)})
        else:
            raise PlanError(f"node {n.id!r}: unknown kind {n.kind!r}")
        keep[n.id] = kout
        nodes.append(node)
    return validate(graph.replace(nodes=nodes))
