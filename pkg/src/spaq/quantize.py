"""8-bit post-training static quantization with integer convolution.

Activations use asymmetric per-tensor uint8 records, weights symmetric int8
records (per output channel by default), biases int32 at scale
``input_scale * weight_scale``. Conv cores run on integers with 32-bit
accumulation and a fixed-point requantization multiplier; norms and
nonlinearities run on dequantized fp32 values.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import accounting
from .engine import run_node
from .graph import GRU_GATES, GraphError, LayerNode, ModelGraph, ShapeError, infer_shapes
from .ops import sigmoid
from .persistence import tensor_name

log = logging.getLogger(__name__)

ACT_SCHEME = "asymmetric-per-tensor"
WEIGHT_SCHEMES = ("symmetric-per-channel", "symmetric-per-tensor")
RANGES = {
    "asymmetric-per-tensor": (0, 255),
    "symmetric-per-channel": (-127, 127),
    "symmetric-per-tensor": (-127, 127),
}
MAX_ACCUMULATION = 2 ** 15


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantRecord:
    scale: np.ndarray
    zero_point: np.ndarray
    scheme: str
    observed_min: Optional[np.ndarray] = None
    observed_max: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float32))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int32))
        if self.scheme not in RANGES:
            raise ValueError(f"unknown quantization scheme {self.scheme!r}")
        if np.any(self.scale <= 0):
            raise ValueError("quantization scales must be positive")
        lo, hi = RANGES[self.scheme]
        if np.any(self.zero_point < lo) or np.any(self.zero_point > hi):
            raise ValueError("zero point outside the scheme's integer range")

    @property
    def qrange(self) -> Tuple[int, int]:
        return RANGES[self.scheme]

    def _bcast(self, arr, ndim, axis):
        if arr.size == 1 or axis is None:
            return arr.reshape(()) if arr.size == 1 else arr
        shape = [1] * ndim
        shape[axis] = arr.size
        return arr.reshape(shape)

    def quantize(self, x, axis: Optional[int] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s = self._bcast(self.scale.astype(np.float64), x.ndim, axis)
        z = self._bcast(self.zero_point.astype(np.int64), x.ndim, axis)
        lo, hi = self.qrange
        q = np.clip(round_half_away(x / s) + z, lo, hi)
        return q.astype(np.uint8 if self.scheme == ACT_SCHEME else np.int8)

    def dequantize(self, q, axis: Optional[int] = None) -> np.ndarray:
        q = np.asarray(q, dtype=np.int64)
        s = self._bcast(self.scale, q.ndim, axis)
        z = self._bcast(self.zero_point.astype(np.int64), q.ndim, axis)
        return ((q - z) * s).astype(np.float32)


def activation_record(lo: float, hi: float) -> QuantRecord:
    """Asymmetric uint8 record for an observed range (widened to contain 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        log.warning("degenerate activation range [%g, %g]; using scale 1", lo, hi)
        return QuantRecord(1.0, 0, ACT_SCHEME, np.float32(lo), np.float32(hi))
    scale = (hi - lo) / 255.0
    zp = int(np.clip(round_half_away(-lo * 255.0 / (hi - lo)), 0, 255))
    return QuantRecord(scale, zp, ACT_SCHEME, np.float32(lo), np.float32(hi))


def weight_record(w: np.ndarray, scheme: str = "symmetric-per-channel") -> QuantRecord:
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError(f"weight scheme must be one of {WEIGHT_SCHEMES}")
    w = np.asarray(w, dtype=np.float64)
    amax = np.abs(w).reshape(w.shape[0], -1).max(axis=1)
    if scheme == "symmetric-per-tensor":
        amax = amax.max(keepdims=True)
    scale = amax / 127.0
    dead = scale == 0
    if dead.any():
        log.warning("%d weight group(s) are all zero; using scale 1", int(dead.sum()))
        scale = np.where(dead, 1.0, scale)
    return QuantRecord(scale, np.zeros_like(scale, dtype=np.int32), scheme, -amax, amax)


@dataclass
class CalibrationSet:
    batches: List[Dict[str, np.ndarray]]
    seed: int = 0

    def __post_init__(self):
        if not self.batches:
            raise ValueError("calibration set is empty")

    @property
    def samples(self) -> int:
        return sum(next(iter(b.values())).shape[0] for b in self.batches)

    @classmethod
    def synthetic(cls, graph: ModelGraph, samples: int = 8, seed: int = 0,
                  resolution: Tuple[int, int] = (32, 32), batch_size: int = 4) -> "CalibrationSet":
        rng = np.random.default_rng(seed)
        batches = []
        for start in range(0, samples, batch_size):
            n = min(batch_size, samples - start)
            shapes = graph.input_shapes(resolution, batch=n)
            batches.append({k: rng.standard_normal(shapes[k]).astype(np.float32) for k in sorted(shapes)})
        return cls(batches, seed)


# --- execution with a pluggable convolution --------------------------------

def _conv_sites(node: LayerNode) -> List[Tuple[str, str, str]]:
    """(site prefix, weight name, bias name) for every conv inside a node."""
    if node.kind == "Conv2d":
        return [(node.id, "weight", "bias")]
    return [(f"{node.id}:{g}", f"w{g}", f"b{g}") for g in GRU_GATES]


def _execute(graph: ModelGraph, inputs: Dict[str, np.ndarray], conv) -> Dict[str, np.ndarray]:
    """Run the graph, delegating every convolution to ``conv(site, node, x, w, b, stride, padding)``."""
    values = {k: np.asarray(inputs[k], dtype=np.float32) for k in graph.inputs}
    for node in graph.nodes:
        args = [values[i] for i in node.inputs]
        if node.kind == "Conv2d":
            a = node.attrs
            out = conv(node.id, node, args[0], "weight", "bias" if a["bias"] else None, a["stride"], a["padding"])
        elif node.kind == "ConvGRUCell":
            h, x = args
            pad = node.attrs["kernel_size"] // 2
            hx = np.concatenate([h, x], axis=1)
            z = sigmoid(conv(f"{node.id}:z", node, hx, "wz", "bz", 1, pad))
            r = sigmoid(conv(f"{node.id}:r", node, hx, "wr", "br", 1, pad))
            q = np.tanh(conv(f"{node.id}:q", node, np.concatenate([r * h, x], axis=1), "wq", "bq", 1, pad))
            out = (1 - z) * h + z * q
        else:
            out = run_node(node, args)
        values[node.id] = out
    return {o: values[o] for o in graph.outputs}


def calibrate(graph: ModelGraph, calib: CalibrationSet,
              weight_scheme: str = "symmetric-per-channel") -> Dict[str, QuantRecord]:
    """Min-max observation over the calibration set.

    Returns activation records keyed ``act:<site>:in`` / ``act:<site>:out``
    for every conv site, and weight records keyed by tensor name.
    """
    from .ops import conv2d

    if graph.precision != "fp32":
        raise ValueError("calibration needs an fp32 graph")
    ranges: Dict[str, List[float]] = {}

    def observe(key, arr):
        lo, hi = float(arr.min()), float(arr.max())
        if key in ranges:
            ranges[key][0] = min(ranges[key][0], lo)
            ranges[key][1] = max(ranges[key][1], hi)
        else:
            ranges[key] = [lo, hi]

    def conv(site, node, x, wname, bname, stride, padding):
        observe(f"act:{site}:in", x)
        y = conv2d(x, node.params[wname], node.params[bname] if bname else None, stride, padding)
        observe(f"act:{site}:out", y)
        return y

    for batch in calib.batches:
        missing = set(graph.inputs) - set(batch)
        if missing:
            raise ShapeError(f"calibration batch lacks inputs {sorted(missing)}")
        infer_shapes(graph, {k: batch[k].shape for k in graph.inputs})
        _execute(graph, batch, conv)

    records = {k: activation_record(lo, hi) for k, (lo, hi) in ranges.items()}
    for node in graph.nodes:
        for _, wname, _ in (_conv_sites(node) if node.conv_kernels() else []):
            records[tensor_name(node.id, wname)] = weight_record(node.params[wname], weight_scheme)
    return records


def quantize_graph(graph: ModelGraph, records: Dict[str, QuantRecord]) -> ModelGraph:
    """int8 copy of ``graph``: int8 conv weights, int32 biases, attached records."""
    if graph.precision != "fp32":
        raise ValueError("graph is already quantized")
    nodes, quant = [], {}
    for node in graph.nodes:
        if not node.conv_kernels():
            nodes.append(node)
            continue
        params = dict(node.params)
        for site, wname, bname in _conv_sites(node):
            w = node.params[wname]
            if w.shape[1] * w.shape[2] * w.shape[3] > MAX_ACCUMULATION:
                raise GraphError(f"node {node.id!r}: {w.shape[1]}x{w.shape[2]}x{w.shape[3]} accumulation "
                                 f"exceeds the 32-bit accumulator budget")
            tname = tensor_name(node.id, wname)
            for key in (tname, f"act:{site}:in", f"act:{site}:out"):
                if key not in records:
                    raise KeyError(f"missing quantization record {key!r}")
            wrec, inrec = records[tname], records[f"act:{site}:in"]
            params[wname] = wrec.quantize(w, axis=0)
            if bname in node.params and (node.kind != "Conv2d" or node.attrs["bias"]):
                bscale = inrec.scale.astype(np.float64) * wrec.scale.astype(np.float64)
                qb = np.clip(round_half_away(node.params[bname] / bscale), -2 ** 31 + 1, 2 ** 31 - 1)
                params[bname] = qb.astype(np.int32)
            quant[tname] = _stored(wrec)
            for key in (f"act:{site}:in", f"act:{site}:out"):
                quant[key] = _stored(records[key])
        nodes.append(node.replace(params=params))
    return graph.replace(nodes=nodes, precision="int8", quant=quant)


def _stored(rec: QuantRecord) -> QuantRecord:
    return QuantRecord(rec.scale.copy(), rec.zero_point.copy(), rec.scheme)


# --- integer kernels ---------------------------------------------------------

@dataclass
class PurityStats:
    integer_operands: int = 0
    float_operands: int = 0
    accumulations: int = 0


_purity_monitors: List[PurityStats] = []


@contextlib.contextmanager
def integer_purity():
    """Count operand dtypes entering quantized conv accumulation."""
    stats = PurityStats()
    _purity_monitors.append(stats)
    try:
        yield stats
    finally:
        _purity_monitors.remove(stats)


def _note_operands(*arrays):
    for stats in _purity_monitors:
        stats.accumulations += 1
        for a in arrays:
            if a.dtype.kind in "iu":
                stats.integer_operands += 1
            else:
                stats.float_operands += 1


def fixed_point_multiplier(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split positive reals into (int32 mantissa in [2^30, 2^31), right shift)."""
    mant, exp = np.frexp(np.asarray(m, dtype=np.float64))
    m0 = np.round(mant * 2.0 ** 31).astype(np.int64)
    carry = m0 == 2 ** 31
    m0 = np.where(carry, m0 // 2, m0)
    exp = np.where(carry, exp + 1, exp)
    return m0, (31 - exp).astype(np.int64)


def _rounding_shift(prod: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """prod / 2**shift rounded half away from zero, integer-only."""
    sign = np.where(prod < 0, -1, 1).astype(np.int64)
    mag = np.abs(prod)
    out = np.zeros_like(mag)
    left = shift <= 0
    if np.any(left):
        out = np.where(left, mag << np.clip(-shift, 0, 62), out)
    right = (shift > 0) & (shift < 63)
    if np.any(right):
        s = np.clip(shift, 1, 62)
        out = np.where(right, (mag + (np.int64(1) << (s - 1))) >> s, out)
    return sign * out


def int_conv(xq: np.ndarray, x_zp: int, wq: np.ndarray, bq: Optional[np.ndarray], stride: int, padding: int) -> np.ndarray:
    """Integer cross-correlation with int32 accumulation."""
    from numpy.lib.stride_tricks import sliding_window_view

    xc = xq.astype(np.int32) - np.int32(x_zp)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = wq.shape[2]
    win = sliding_window_view(xc, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    w32 = wq.astype(np.int32)
    _note_operands(win, w32)
    acc = np.tensordot(win, w32, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bq is not None:
        _note_operands(bq)
        acc = acc + bq.astype(np.int32)[None, :, None, None]
    return np.ascontiguousarray(acc, dtype=np.int32)


def requantize(acc: np.ndarray, m0: np.ndarray, shift: np.ndarray, out_zp: int) -> np.ndarray:
    prod = acc.astype(np.int64) * m0[None, :, None, None]
    y = _rounding_shift(prod, np.broadcast_to(shift[None, :, None, None], prod.shape)) + out_zp
    return np.clip(y, 0, 255).astype(np.uint8)


def _weight_axis(rec: QuantRecord) -> Optional[int]:
    return 0 if rec.scale.size > 1 else None


def quantized_forward(graph: ModelGraph, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Run an int8 graph on fp32 inputs; outputs are dequantized to fp32."""
    if graph.precision != "int8":
        raise ValueError("quantized_forward needs an int8 graph")
    infer_shapes(graph, {k: np.shape(v) for k, v in inputs.items() if k in graph.inputs})

    def conv(site, node, x, wname, bname, stride, padding):
        wq = node.params[wname]
        wrec = graph.quant[tensor_name(node.id, wname)]
        inrec, outrec = graph.quant[f"act:{site}:in"], graph.quant[f"act:{site}:out"]
        xq = inrec.quantize(x)
        acc = int_conv(xq, int(inrec.zero_point[0]), wq, node.params[bname] if bname else None, stride, padding)
        wscale = np.broadcast_to(wrec.scale.astype(np.float64), (wq.shape[0],))
        m0, shift = fixed_point_multiplier(inrec.scale[0].astype(np.float64) * wscale / float(outrec.scale[0]))
        return outrec.dequantize(requantize(acc, m0, shift, int(outrec.zero_point[0])))

    return _execute(graph, inputs, conv)


def reference_forward(graph: ModelGraph, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Double-precision emulation of :func:`quantized_forward` (no fixed-point multiplier)."""
    from .ops import conv2d

    def conv(site, node, x, wname, bname, stride, padding):
        wrec = graph.quant[tensor_name(node.id, wname)]
        inrec, outrec = graph.quant[f"act:{site}:in"], graph.quant[f"act:{site}:out"]
        xd = inrec.dequantize(inrec.quantize(x)).astype(np.float64)
        wd = wrec.dequantize(node.params[wname], axis=_weight_axis(wrec)).astype(np.float64)
        b = None
        if bname:
            bscale = float(inrec.scale[0]) * np.broadcast_to(wrec.scale.astype(np.float64), (wd.shape[0],))
            b = node.params[bname].astype(np.float64) * bscale
        y = conv2d(xd, wd, b, stride, padding)
        return outrec.dequantize(outrec.quantize(y))

    return _execute(graph, inputs, conv)


def error_bound(fgraph: ModelGraph, qgraph: ModelGraph) -> Dict[str, float]:
    """Worst-case |quantized - fp32| per graph output, propagated from the scales.

    Holds for inputs whose fp32 activations stay inside the calibrated ranges
    (e.g. the calibration inputs). Per conv output channel c the bound adds
    the input error amplified by ||w_c||_1, the weight rounding error times the
    largest input magnitude, the bias rounding, the multiplier approximation
    and one output step (rounding plus range-edge clamping). ReLU and Tanh
    pass errors through, Sigmoid shrinks them by 4, Add sums them. Graphs
    with InstanceNorm or GRU cells are not covered.
    """
    err: Dict[str, float] = {k: 0.0 for k in fgraph.inputs}
    for fnode in fgraph.nodes:
        qnode = qgraph[fnode.id]
        kind = fnode.kind
        if kind == "Conv2d":
            site = fnode.id
            inrec, outrec = qgraph.quant[f"act:{site}:in"], qgraph.quant[f"act:{site}:out"]
            wrec = qgraph.quant[tensor_name(site, "weight")]
            w = fnode.params["weight"].astype(np.float64)
            axis = _weight_axis(wrec)
            wd = wrec.dequantize(qnode.params["weight"], axis=axis).astype(np.float64)
            s_in, zp_in = float(inrec.scale[0]), int(inrec.zero_point[0])
            s_out = float(outrec.scale[0])
            x_max = max(abs(float(inrec.observed_min)), abs(float(inrec.observed_max))) \
                if inrec.observed_min is not None else max(zp_in, 255 - zp_in) * s_in
            e_x = err[fnode.inputs[0]] + s_in / 2
            l1 = np.abs(wd).reshape(w.shape[0], -1).sum(axis=1)
            dw = np.abs(wd - w).reshape(w.shape[0], -1).sum(axis=1)
            s_w = np.broadcast_to(wrec.scale.astype(np.float64), (w.shape[0],))
            e = l1 * e_x + dw * x_max
            qb = np.zeros(w.shape[0])
            if fnode.attrs["bias"]:
                e = e + s_in * s_w / 2
                qb = np.abs(qnode.params["bias"].astype(np.float64))
            acc_max = np.abs(qnode.params["weight"].astype(np.float64)).reshape(w.shape[0], -1).sum(axis=1) \
                * max(zp_in, 255 - zp_in) + qb
            m = s_in * s_w / s_out
            m0, shift = fixed_point_multiplier(m)
            m_err = np.abs(m - m0 * 2.0 ** (-shift.astype(np.float64)))
            e = e + acc_max * m_err * s_out + s_out
            err[fnode.id] = float(e.max())
        elif kind in ("ReLU", "Tanh"):
            err[fnode.id] = err[fnode.inputs[0]]
        elif kind == "Sigmoid":
            err[fnode.id] = err[fnode.inputs[0]] / 4
        elif kind == "Add":
            err[fnode.id] = sum(err[i] for i in fnode.inputs)
        elif kind == "Concat":
            err[fnode.id] = max(err[i] for i in fnode.inputs)
        else:
            raise NotImplementedError(f"no error propagation rule for {kind}")
    return {o: err[o] * (1 + 1e-6) + 1e-7 for o in fgraph.outputs}


@dataclass
class QuantizationResult:
    graph: ModelGraph
    records: Dict[str, QuantRecord]
    baseline: accounting.CostReport
    quantized: accounting.CostReport
    reduction: dict = field(default_factory=dict)


def spaq_quantize(graph: ModelGraph, calib: CalibrationSet, weight_scheme: str = "symmetric-per-channel",
                  resolution: Tuple[int, int] = (384, 512)) -> QuantizationResult:
    """Calibrate, quantize and account for the size change."""
    records = calibrate(graph, calib, weight_scheme)
    qgraph = quantize_graph(graph, records)
    base = accounting.cost_report(graph, resolution)
    after = accounting.cost_report(qgraph, resolution)
    return QuantizationResult(qgraph, records, base, after, accounting.reduction_report(base, after))


