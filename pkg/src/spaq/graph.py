"""Layer graph representation, validation and static shape inference.

Activations are NCHW, conv weights are (Cout, Cin, K, K). Parameters are
plain numpy arrays; graphs are treated as immutable values and every
transformation in the package returns a new graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

KINDS = ("Conv2d", "InstanceNorm", "ReLU", "Sigmoid", "Tanh", "Add", "Concat", "ConvGRUCell")
ELEMENTWISE = ("ReLU", "Sigmoid", "Tanh")
GRU_GATES = ("z", "r", "q")
FLOAT_DTYPES = (np.float32, np.float64)


class GraphError(ValueError):
    """Base class for malformed graphs and invalid graph inputs."""


class ShapeError(GraphError):
    pass


class DTypeError(GraphError):
    pass


class MissingParameterError(GraphError):
    pass


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: Dict[str, object] = field(default_factory=dict)
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)

    def replace(self, **changes) -> "LayerNode":
        data = dict(id=self.id, kind=self.kind, attrs=dict(self.attrs),
                    params=dict(self.params), inputs=list(self.inputs))
        data.update(changes)
        return LayerNode(**data)

    def conv_kernels(self) -> List[Tuple[str, str]]:
        """(weight, bias) parameter names of every convolution inside the node."""
        if self.kind == "Conv2d":
            return [("weight", "bias")]
        if self.kind == "ConvGRUCell":
            return [(f"w{g}", f"b{g}") for g in GRU_GATES]
        return []


@dataclass(frozen=True)
class InputSpec:
    """A graph entry point: channel count and spatial divisor w.r.t. the image resolution."""
    channels: int
    stride: int = 1


@dataclass
class ModelGraph:
    nodes: List[LayerNode]
    inputs: Dict[str, InputSpec]
    outputs: List[str]
    name: str = "graph"
    precision: str = "fp32"
    # int8 state only: tensor or activation-site name -> QuantRecord
    quant: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}

    def __getitem__(self, node_id: str) -> LayerNode:
        return self._index[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def replace(self, **changes) -> "ModelGraph":
        data = dict(nodes=list(self.nodes), inputs=dict(self.inputs), outputs=list(self.outputs),
                    name=self.name, precision=self.precision, quant=dict(self.quant))
        data.update(changes)
        return ModelGraph(**data)

    def copy(self) -> "ModelGraph":
        nodes = [n.replace(params={k: v.copy() for k, v in n.params.items()}) for n in self.nodes]
        return self.replace(nodes=nodes)

    @property
    def conv_nodes(self) -> List[LayerNode]:
        return [n for n in self.nodes if n.kind == "Conv2d"]

    @property
    def conv_count(self) -> int:
        """Number of convolution kernels, counting the three GRU gate convs individually."""
        return sum(len(n.conv_kernels()) for n in self.nodes)

    def parameters(self) -> Iterable[Tuple[str, str, np.ndarray]]:
        for n in self.nodes:
            for pname, value in n.params.items():
                yield n.id, pname, value

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {name: [] for name in list(self.inputs) + [n.id for n in self.nodes]}
        for n in self.nodes:
            for src in n.inputs:
                out[src].append(n.id)
        return out

    def input_shapes(self, resolution: Tuple[int, int], batch: int = 1) -> Dict[str, Tuple[int, int, int, int]]:
        H, W = resolution
        shapes = {}
        for name, spec in self.inputs.items():
            if H % spec.stride or W % spec.stride:
                raise ShapeError(f"resolution {H}x{W} is not divisible by the stride {spec.stride} of input {name!r}")
            shapes[name] = (batch, spec.channels, H // spec.stride, W // spec.stride)
        return shapes

    def with_params(self, params: Dict[Tuple[str, str], np.ndarray]) -> "ModelGraph":
        """New graph with selected parameters swapped in; keyed by (node id, param name)."""
        nodes = []
        for n in self.nodes:
            updates = {p: params[(n.id, p)] for p in n.params if (n.id, p) in params}
            nodes.append(n.replace(params={**n.params, **updates}) if updates else n)
        return self.replace(nodes=nodes)


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_params(node: LayerNode, wname: str, bname: str, cin: int, cout: int, k: int, bias: bool):
    if wname not in node.params:
        raise MissingParameterError(f"node {node.id!r}: missing parameter {wname!r}")
    w = node.params[wname]
    if tuple(w.shape) != (cout, cin, k, k):
        raise ShapeError(f"node {node.id!r}: {wname} has shape {tuple(w.shape)}, expected {(cout, cin, k, k)}")
    if bias:
        if bname not in node.params:
            raise MissingParameterError(f"node {node.id!r}: missing parameter {bname!r}")
        if tuple(node.params[bname].shape) != (cout,):
            raise ShapeError(f"node {node.id!r}: {bname} has shape {tuple(node.params[bname].shape)}, expected {(cout,)}")


def node_output_shape(node: LayerNode, in_shapes: Sequence[Tuple[int, ...]]) -> Tuple[int, int, int, int]:
    """Shape rule for one node; raises ShapeError naming the node on any mismatch."""
    a = node.attrs
    kind = node.kind
    if kind not in KINDS:
        raise GraphError(f"node {node.id!r}: unknown kind {kind!r}")
    if kind in ("Add", "Concat"):
        if len(in_shapes) < 2:
            raise ShapeError(f"node {node.id!r}: {kind} needs at least two inputs")
    elif kind == "ConvGRUCell":
        if len(in_shapes) != 2:
            raise ShapeError(f"node {node.id!r}: ConvGRUCell takes (hidden, input)")
    elif len(in_shapes) != 1:
        raise ShapeError(f"node {node.id!r}: {kind} takes exactly one input, got {len(in_shapes)}")

    if kind == "Conv2d":
        N, C, H, W = in_shapes[0]
        k, s, p = a["kernel_size"], a["stride"], a["padding"]
        if C != a["in_channels"]:
            raise ShapeError(f"node {node.id!r}: expected {a['in_channels']} input channels, got {C}")
        _check_conv_params(node, "weight", "bias", a["in_channels"], a["out_channels"], k, a["bias"])
        Ho, Wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"node {node.id!r}: input {H}x{W} too small for kernel {k}")
        return (N, a["out_channels"], Ho, Wo)
    if kind == "InstanceNorm":
        N, C, H, W = in_shapes[0]
        for pname in ("weight", "bias"):
            if pname not in node.params:
                raise MissingParameterError(f"node {node.id!r}: missing parameter {pname!r}")
            if tuple(node.params[pname].shape) != (C,):
                raise ShapeError(f"node {node.id!r}: {pname} has shape {tuple(node.params[pname].shape)}, expected {(C,)}")
        return tuple(in_shapes[0])
    if kind in ELEMENTWISE:
        return tuple(in_shapes[0])
    if kind == "Add":
        first = tuple(in_shapes[0])
        for s in in_shapes[1:]:
            if tuple(s) != first:
                raise ShapeError(f"node {node.id!r}: Add operands {first} and {tuple(s)} differ")
        return first
    if kind == "Concat":
        N, _, H, W = in_shapes[0]
        for s in in_shapes:
            if (s[0], s[2], s[3]) != (N, H, W):
                raise ShapeError(f"node {node.id!r}: Concat operands disagree outside the channel axis")
        return (N, sum(s[1] for s in in_shapes), H, W)
    # ConvGRUCell
    (N, Ch, H, W), (Nx, Cx, Hx, Wx) = in_shapes
    if (N, H, W) != (Nx, Hx, Wx):
        raise ShapeError(f"node {node.id!r}: hidden {tuple(in_shapes[0])} and input {tuple(in_shapes[1])} differ spatially")
    if Ch != a["hidden_channels"] or Cx != a["input_channels"]:
        raise ShapeError(f"node {node.id!r}: expected hidden/input channels "
                         f"({a['hidden_channels']}, {a['input_channels']}), got ({Ch}, {Cx})")
    k = a["kernel_size"]
    if k % 2 != 1:
        raise ShapeError(f"node {node.id!r}: GRU kernel must be odd")
    for wname, bname in node.conv_kernels():
        _check_conv_params(node, wname, bname, Ch + Cx, Ch, k, True)
    return (N, Ch, H, W)


def infer_shapes(graph: ModelGraph, input_shapes: Dict[str, Tuple[int, ...]]) -> Dict[str, Tuple[int, int, int, int]]:
    """Static shape of every graph input and node output."""
    shapes: Dict[str, Tuple[int, int, int, int]] = {}
    for name, spec in graph.inputs.items():
        if name not in input_shapes:
            raise ShapeError(f"missing shape for graph input {name!r}")
        s = tuple(int(d) for d in input_shapes[name])
        if len(s) != 4 or s[1] != spec.channels:
            raise ShapeError(f"graph input {name!r}: shape {s} does not match {spec.channels} channels")
        shapes[name] = s
    for node in graph.nodes:
        try:
            in_shapes = [shapes[i] for i in node.inputs]
        except KeyError as exc:
            raise GraphError(f"node {node.id!r}: input {exc.args[0]!r} is not an earlier node or graph input") from None
        shapes[node.id] = node_output_shape(node, in_shapes)
    return shapes


def validate(graph: ModelGraph, resolution: Optional[Tuple[int, int]] = None) -> ModelGraph:
    """Check ids, topology and (optionally) end-to-end shapes; returns the graph for chaining."""
    seen = set(graph.inputs)
    if len(seen) != len(graph.inputs):
        raise GraphError("duplicate graph input names")
    for node in graph.nodes:
        if node.id in seen:
            raise GraphError(f"duplicate node id {node.id!r}")
        for src in node.inputs:
            if src not in seen:
                raise GraphError(f"node {node.id!r}: input {src!r} is not an earlier node or graph input")
        seen.add(node.id)
    for out in graph.outputs:
        if out not in graph:
            raise GraphError(f"graph output {out!r} is not a node")
    if graph.precision not in ("fp32", "int8"):
        raise GraphError(f"unknown precision state {graph.precision!r}")
    if resolution is None:
        stride = max([s.stride for s in graph.inputs.values()] + [1])
        resolution = (8 * stride, 8 * stride)
    infer_shapes(graph, graph.input_shapes(resolution))
    return graph
