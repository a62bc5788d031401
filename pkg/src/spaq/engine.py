"""Graph execution and node-level reverse-mode differentiation."""
from __future__ import annotations

from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import ops
from .graph import (DTypeError, FLOAT_DTYPES, GraphError, ModelGraph, ShapeError,
                    infer_shapes)

ParamKey = Tuple[str, str]


class TapeError(RuntimeError):
    """Backward was asked to replay a tape against a graph that changed after forward."""


def _signature(graph: ModelGraph):
    return tuple((n.id, n.kind, tuple(n.inputs),
                  tuple((p, id(v), v.shape) for p, v in n.params.items())) for n in graph.nodes)


class GradientTape:
    """Records per-node caches during :func:`forward` for a later :func:`backward`."""

    def __init__(self):
        self.graph: Optional[ModelGraph] = None
        self.records: Dict[str, tuple] = {}
        self.shapes: Dict[str, tuple] = {}
        self._signature = None

    def bind(self, graph: ModelGraph):
        self.graph = graph
        self.records.clear()
        self._signature = _signature(graph)

    def check(self):
        if self.graph is None:
            raise TapeError("tape holds no recorded forward pass")
        if _signature(self.graph) != self._signature:
            raise TapeError("graph was mutated between forward and backward")


def _check_dtype(graph: ModelGraph, inputs: Dict[str, np.ndarray]):
    dtypes = {np.dtype(a.dtype) for a in inputs.values()}
    dtypes |= {np.dtype(v.dtype) for _, _, v in graph.parameters()}
    bad = [d for d in dtypes if d.type not in FLOAT_DTYPES]
    if bad:
        raise DTypeError(f"forward needs fp32/fp64 tensors, found {sorted(map(str, bad))}")
    if len(dtypes) > 1:
        raise DTypeError(f"mixed floating dtypes {sorted(map(str, dtypes))}")


def run_node(node, args, tape: Optional[GradientTape] = None):
    a, p = node.attrs, node.params
    kind = node.kind
    cache = None
    if kind == "Conv2d":
        out, cache = ops.conv2d_forward(args[0], p["weight"], p.get("bias") if a["bias"] else None,
                                        a["stride"], a["padding"])
    elif kind == "InstanceNorm":
        out, cache = ops.instance_norm_forward(args[0], p["weight"], p["bias"])
    elif kind == "ReLU":
        out = np.maximum(args[0], 0)
    elif kind == "Sigmoid":
        out = ops.sigmoid(args[0])
    elif kind == "Tanh":
        out = np.tanh(args[0])
    elif kind == "Add":
        out = args[0]
        for other in args[1:]:
            out = out + other
    elif kind == "Concat":
        out = np.concatenate(args, axis=1)
        cache = [x.shape[1] for x in args]
    elif kind == "ConvGRUCell":
        out, cache = ops.gru_forward(args[0], args[1], p, a["kernel_size"] // 2)
    else:
        raise GraphError(f"node {node.id!r}: unknown kind {kind!r}")
    if tape is not None:
        tape.records[node.id] = (cache, out)
    return out


def forward(graph: ModelGraph, inputs: Dict[str, np.ndarray],
            tape: Optional[GradientTape] = None) -> Dict[str, np.ndarray]:
    """Run the graph and return every declared output.

    Pass a :class:`GradientTape` to keep the intermediates needed by
    :func:`backward`.
    """
    if graph.precision != "fp32":
        raise DTypeError("forward runs fp graphs only; use quantize.quantized_forward for int8 graphs")
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise ShapeError(f"missing graph inputs {sorted(missing)}")
    _check_dtype(graph, inputs)
    shapes = infer_shapes(graph, {k: np.shape(v) for k, v in inputs.items() if k in graph.inputs})
    if tape is not None:
        tape.bind(graph)
        tape.shapes = shapes
    values = {k: np.asarray(inputs[k]) for k in graph.inputs}
    for node in graph.nodes:
        values[node.id] = run_node(node, [values[i] for i in node.inputs], tape)
    return {o: values[o] for o in graph.outputs}


def backward(tape: GradientTape,
             loss_grad: Union[np.ndarray, Dict[str, np.ndarray]]) -> Dict[ParamKey, np.ndarray]:
    """Parameter gradients given d(loss)/d(output).

    ``loss_grad`` is an array for single-output graphs or a mapping from
    output id to array. Parameters the loss never reaches get zero gradients.
    """
    tape.check()
    graph = tape.graph
    if not isinstance(loss_grad, dict):
        if len(graph.outputs) != 1:
            raise ValueError("graph has several outputs; pass a mapping output id -> gradient")
        loss_grad = {graph.outputs[0]: loss_grad}
    grads_act: Dict[str, np.ndarray] = {}
    for name, g in loss_grad.items():
        if name not in graph.outputs:
            raise KeyError(f"{name!r} is not a graph output")
        if tuple(np.shape(g)) != tuple(tape.shapes[name]):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, expected {tape.shapes[name]}")
        grads_act[name] = np.asarray(g)

    pgrads: Dict[ParamKey, np.ndarray] = {(nid, p): np.zeros_like(v) for nid, p, v in graph.parameters()}

    def push(src, g):
        grads_act[src] = grads_act[src] + g if src in grads_act else g

    for node in reversed(graph.nodes):
        dout = grads_act.pop(node.id, None)
        if dout is None:
            continue
        cache, out = tape.records[node.id]
        kind = node.kind
        if kind == "Conv2d":
            dx, dw, db = ops.conv2d_backward(dout, cache)
            pgrads[(node.id, "weight")] = dw
            if db is not None:
                pgrads[(node.id, "bias")] = db
            push(node.inputs[0], dx)
        elif kind == "InstanceNorm":
            dx, dg, dbeta = ops.instance_norm_backward(dout, cache)
            pgrads[(node.id, "weight")] = dg
            pgrads[(node.id, "bias")] = dbeta
            push(node.inputs[0], dx)
        elif kind == "ReLU":
            push(node.inputs[0], ops.relu_backward(dout, out))
        elif kind == "Sigmoid":
            push(node.inputs[0], ops.sigmoid_backward(dout, out))
        elif kind == "Tanh":
            push(node.inputs[0], ops.tanh_backward(dout, out))
        elif kind == "Add":
            for src in node.inputs:
                push(src, dout)
        elif kind == "Concat":
            offset = 0
            for src, c in zip(node.inputs, cache):
                push(src, dout[:, offset:offset + c])
                offset += c
        elif kind == "ConvGRUCell":
            dh, dx, g = ops.gru_backward(dout, cache)
            for pname, value in g.items():
                pgrads[(node.id, pname)] = value
            push(node.inputs[0], dh)
            push(node.inputs[1], dx)
    return pgrads
