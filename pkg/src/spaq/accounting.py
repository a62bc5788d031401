"""Parameter, FLOP and serialized-size accounting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

from . import persistence
from .graph import ModelGraph, infer_shapes

MIB = 1024 * 1024
FORMAT_ENTRY = "<format>"


@dataclass
class CostReport:
    per_layer: Dict[str, Dict[str, int]]
    input_resolution: Tuple[int, int]
    precision_state: str = "fp32"
    flops_per_mac: int = 2

    @property
    def params_total(self) -> int:
        return sum(v.get("params", 0) for v in self.per_layer.values())

    @property
    def flops_total(self) -> int:
        return sum(v.get("flops", 0) for v in self.per_layer.values())

    @property
    def size_bytes(self) -> int:
        return sum(v.get("size_bytes", 0) for v in self.per_layer.values())

    @property
    def size_mib(self) -> float:
        return self.size_bytes / MIB

    def to_dict(self) -> dict:
        return {
            "precision_state": self.precision_state,
            "input_resolution": list(self.input_resolution),
            "flops_per_mac": self.flops_per_mac,
            "params_total": self.params_total,
            "flops_total": self.flops_total,
            "size_bytes": self.size_bytes,
            "size_mib": round(self.size_mib, 4),
            "per_layer": [{"layer": k, **v} for k, v in self.per_layer.items()],
        }


def count_params(graph: ModelGraph) -> Dict[str, int]:
    """Parameter count per node (every parameter tensor counted, conv or not)."""
    return {n.id: sum(int(v.size) for v in n.params.values()) for n in graph.nodes}


def conv_params(graph: ModelGraph) -> Dict[str, int]:
    """Parameters held by convolution kernels (including biases), per node."""
    out = {}
    for n in graph.nodes:
        names = [p for pair in n.conv_kernels() for p in pair if p in n.params]
        if names:
            out[n.id] = sum(int(n.params[p].size) for p in names)
    return out


def param_fractions(counts: Dict[str, int]) -> Dict[str, float]:
    """Share of each entry in the total; sums to one."""
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("no parameters to take fractions of")
    return {k: v / total for k, v in counts.items()}


def _conv_flops(node, in_shape, out_shape, flops_per_mac):
    N, cin = in_shape[0], in_shape[1]
    _, cout, ho, wo = out_shape
    k = node.attrs["kernel_size"]
    flops = flops_per_mac * k * k * cin * cout * ho * wo * N
    if node.attrs.get("bias", True):
        flops += cout * ho * wo * N
    return flops


def count_flops(graph: ModelGraph, resolution: Tuple[int, int], flops_per_mac: int = 2) -> Dict[str, int]:
    """Convolution FLOPs per node for a batch-1 forward at ``resolution``.

    FLOPs default to 2 per multiply-accumulate plus one per bias add; pass
    ``flops_per_mac=1`` to count MACs. Non-conv nodes contribute nothing.
    """
    shapes = infer_shapes(graph, graph.input_shapes(resolution))
    out = {}
    for n in graph.nodes:
        if n.kind == "Conv2d":
            out[n.id] = _conv_flops(n, shapes[n.inputs[0]], shapes[n.id], flops_per_mac)
        elif n.kind == "ConvGRUCell":
            h, x = shapes[n.inputs[0]], shapes[n.inputs[1]]
            gate_in = (h[0], h[1] + x[1], h[2], h[3])
            out[n.id] = 3 * _conv_flops(n, gate_in, shapes[n.id], flops_per_mac)
        else:
            out[n.id] = 0
    return out


def serialized_size(graph: ModelGraph) -> Dict[str, int]:
    """Exact on-disk bytes, attributed per node plus a ``<format>`` entry.

    Per node: stored payload (4 bytes per fp32/int32 value, 1 per int8
    value), tensor-table entries and quant-table entries of its weights.
    ``<format>`` holds the header, the graph descriptor and activation
    quantization records.
    """
    sizes = {}
    claimed = set()
    for n in graph.nodes:
        b = 0
        for pname, v in n.params.items():
            name = persistence.tensor_name(n.id, pname)
            b += v.size * v.dtype.itemsize
            b += persistence._tensor_entry_size(name, v.ndim)
            if name in graph.quant:
                b += persistence._quant_entry_size(name, len(graph.quant[name].scale))
                claimed.add(name)
        sizes[n.id] = int(b)
    fmt = persistence.HEADER.size + len(persistence.descriptor(graph))
    fmt += sum(persistence._quant_entry_size(k, len(r.scale)) for k, r in graph.quant.items() if k not in claimed)
    sizes[FORMAT_ENTRY] = fmt
    return sizes


def cost_report(graph: ModelGraph, resolution: Tuple[int, int], flops_per_mac: int = 2) -> CostReport:
    params = count_params(graph)
    flops = count_flops(graph, resolution, flops_per_mac)
    size = serialized_size(graph)
    per_layer = {n.id: {"params": params[n.id], "flops": flops[n.id], "size_bytes": size[n.id]} for n in graph.nodes}
    per_layer[FORMAT_ENTRY] = {"params": 0, "flops": 0, "size_bytes": size[FORMAT_ENTRY]}
    return CostReport(per_layer, tuple(resolution), graph.precision, flops_per_mac)


def _pct(base: float, opt: float) -> float:
    return 100.0 * (1.0 - opt / base) if base else 0.0


def reduction_report(baseline: CostReport, optimized: CostReport) -> dict:
    """Percent reductions (raw and rounded to 2 dp) of optimized vs baseline."""
    if tuple(baseline.input_resolution) != tuple(optimized.input_resolution):
        raise ValueError(f"input resolutions differ: {baseline.input_resolution} vs {optimized.input_resolution}")
    raw = {
        "params": _pct(baseline.params_total, optimized.params_total),
        "flops": _pct(baseline.flops_total, optimized.flops_total),
        "size": _pct(baseline.size_bytes, optimized.size_bytes),
    }
    return {"raw": raw, "rounded": {k: round(v, 2) for k, v in raw.items()}}


def percent_reduction(baseline: float, optimized: float) -> float:
    return _pct(baseline, optimized)


