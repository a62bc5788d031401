"""Reconstructed dense-SLAM feature, context and update networks plus small toy graphs.

Encoders (fnet/cnet): 7x7/2 stem, one extra 3x3 conv, three stages of two
residual blocks at widths 64/96/128 (strides 1/2/2, 1x1 projection on each
stage's first skip), 1x1 head to D channels: 18 convolutions, 1/8 output.

UpdateNet (19 convolutions): correlation encoder (3), flow encoder (3),
motion fusion (2), ConvGRU gates (3), revision head (3), confidence head
(3), damping head (2). All UpdateNet inputs live at 1/8 resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .graph import InputSpec, LayerNode, ModelGraph, validate

ZOO_NAMES = ("fnet", "cnet", "updatenet", "droid", "toy-residual", "toy-gru")
DEFAULT_RESOLUTION = (384, 512)
ENCODER_WIDTHS = (64, 96, 128)
CORR_CHANNELS = 196
HIDDEN_CHANNELS = 128
CONTEXT_CHANNELS = 128


@dataclass
class ZooSpec:
    name: str
    output_dim: Optional[int] = None
    input_resolution: Tuple[int, int] = DEFAULT_RESOLUTION
    seed: int = 0
    widths: Tuple[int, ...] = (4, 8)
    in_channels: int = 2


class _Builder:
    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.nodes: List[LayerNode] = []
        self.channels: Dict[str, int] = {}

    def _add(self, node: LayerNode, channels: int) -> str:
        self.nodes.append(node)
        self.channels[node.id] = channels
        return node.id

    def _kaiming(self, shape):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def conv(self, nid, src, cout, k, stride=1, padding=None, bias=True):
        cin = self.channels[src]
        padding = k // 2 if padding is None else padding
        params = {"weight": self._kaiming((cout, cin, k, k))}
        if bias:
            params["bias"] = np.zeros(cout, dtype=self.dtype)
        attrs = dict(in_channels=cin, out_channels=cout, kernel_size=k, stride=stride,
                     padding=padding, bias=bias)
        return self._add(LayerNode(nid, "Conv2d", attrs, params, [src]), cout)

    def norm(self, nid, src):
        c = self.channels[src]
        params = {"weight": np.ones(c, dtype=self.dtype), "bias": np.zeros(c, dtype=self.dtype)}
        return self._add(LayerNode(nid, "InstanceNorm", {"channels": c}, params, [src]), c)

    def act(self, nid, src, kind="ReLU"):
        return self._add(LayerNode(nid, kind, {}, {}, [src]), self.channels[src])

    def add(self, nid, *srcs):
        return self._add(LayerNode(nid, "Add", {}, {}, list(srcs)), self.channels[srcs[0]])

    def concat(self, nid, *srcs):
        return self._add(LayerNode(nid, "Concat", {}, {}, list(srcs)), sum(self.channels[s] for s in srcs))

    def gru(self, nid, hidden, x, k=3):
        ch, cx = self.channels[hidden], self.channels[x]
        params = {}
        for g in "zrq":
            params[f"w{g}"] = self._kaiming((ch, ch + cx, k, k))
            params[f"b{g}"] = np.zeros(ch, dtype=self.dtype)
        attrs = dict(hidden_channels=ch, input_channels=cx, kernel_size=k)
        return self._add(LayerNode(nid, "ConvGRUCell", attrs, params, [hidden, x]), ch)

    def conv_block(self, nid, src, cout, k, stride=1, norm=False, relu=True):
        out = self.conv(f"{nid}", src, cout, k, stride)
        if norm:
            out = self.norm(f"{nid}.norm", out)
        if relu:
            out = self.act(f"{nid}.relu", out)
        return out


def _residual_block(b: _Builder, nid, src, cout, stride, norm, project):
    y = b.conv_block(f"{nid}.conv1", src, cout, 3, stride, norm)
    y = b.conv_block(f"{nid}.conv2", y, cout, 3, 1, norm)
    skip = src
    if project:
        skip = b.conv_block(f"{nid}.proj", src, cout, 1, stride, norm, relu=False)
    s = b.add(f"{nid}.add", y, skip)
    return b.act(f"{nid}.out", s)


def _encoder(name, output_dim, norm, seed, prefix=""):
    b = _Builder(seed)
    b.channels[f"{prefix}image"] = 3
    x = b.conv_block(f"{prefix}stem", f"{prefix}image", ENCODER_WIDTHS[0], 7, 2, norm)
    x = b.conv_block(f"{prefix}conv2", x, ENCODER_WIDTHS[0], 3, 1, norm)
    for i, (width, stride) in enumerate(zip(ENCODER_WIDTHS, (1, 2, 2)), start=1):
        x = _residual_block(b, f"{prefix}layer{i}.0", x, width, stride, norm, project=True)
        x = _residual_block(b, f"{prefix}layer{i}.1", x, width, 1, norm, project=False)
    b.conv(f"{prefix}head", x, output_dim, 1)
    return ModelGraph(b.nodes, {f"{prefix}image": InputSpec(3, 1)}, [f"{prefix}head"], name=name)


def _updatenet(seed, prefix=""):
    b = _Builder(seed)
    names = {"net": HIDDEN_CHANNELS, "inp": CONTEXT_CHANNELS, "corr": CORR_CHANNELS, "flow": 4}
    for k, c in names.items():
        b.channels[prefix + k] = c
    p = prefix
    c = b.conv_block(f"{p}corr_enc.0", f"{p}corr", 128, 1)
    c = b.conv_block(f"{p}corr_enc.1", c, 96, 3)
    c = b.conv_block(f"{p}corr_enc.2", c, 64, 3)
    f = b.conv_block(f"{p}flow_enc.0", f"{p}flow", 64, 7)
    f = b.conv_block(f"{p}flow_enc.1", f, 32, 3)
    f = b.conv_block(f"{p}flow_enc.2", f, 32, 3)
    m = b.concat(f"{p}motion.cat", c, f)
    m = b.conv_block(f"{p}fusion.0", m, 96, 3)
    m = b.conv_block(f"{p}fusion.1", m, 64, 3)
    x = b.concat(f"{p}gru_in", m, f"{p}inp")
    h = b.gru(f"{p}gru", f"{p}net", x)
    r = b.conv_block(f"{p}delta.0", h, 96, 3)
    r = b.conv_block(f"{p}delta.1", r, 64, 3)
    r = b.conv(f"{p}delta", r, 2, 1)
    w = b.conv_block(f"{p}weight.0", h, 96, 3)
    w = b.conv_block(f"{p}weight.1", w, 64, 3)
    w = b.conv(f"{p}weight.2", w, 2, 1)
    w = b.act(f"{p}weight", w, "Sigmoid")
    d = b.conv_block(f"{p}damping.0", h, 64, 3)
    d = b.conv(f"{p}damping.1", d, 1, 1)
    d = b.act(f"{p}damping", d, "Sigmoid")
    inputs = {p + k: InputSpec(c, 8) for k, c in names.items()}
    return ModelGraph(b.nodes, inputs, [h, r, w, d], name="updatenet")


def _toy_residual(widths, in_channels, out_channels, seed):
    w1, w2 = widths
    b = _Builder(seed)
    b.channels["x"] = in_channels
    x = b.conv_block("stem", "x", w1, 3)
    x = _residual_block(b, "block1", x, w1, 1, False, project=False)
    x = b.conv_block("expand", x, w2, 3)
    x = _residual_block(b, "block2", x, w2, 1, False, project=False)
    b.conv("head", x, out_channels, 1)
    return ModelGraph(b.nodes, {"x": InputSpec(in_channels, 1)}, ["head"], name="toy-residual")


def _toy_gru(widths, in_channels, out_channels, seed):
    w1, hidden = widths
    b = _Builder(seed)
    b.channels["x"] = in_channels
    b.channels["h"] = hidden
    e = b.conv_block("enc.0", "x", w1, 3)
    e = b.conv_block("enc.1", e, w1, 3)
    h = b.gru("gru", "h", e)
    b.conv("head", h, out_channels, 1)
    return ModelGraph(b.nodes, {"h": InputSpec(hidden, 1), "x": InputSpec(in_channels, 1)},
                      ["head"], name="toy-gru")


def merge(graphs: List[ModelGraph], name: str) -> ModelGraph:
    """Disjoint union of graphs whose node and input names do not collide."""
    nodes, inputs, outputs = [], {}, []
    for g in graphs:
        nodes += g.nodes
        inputs.update(g.inputs)
        outputs += g.outputs
    return ModelGraph(nodes, inputs, outputs, name=name)


def build(spec: ZooSpec) -> ModelGraph:
    """Build and validate a zoo graph; same spec and seed give identical parameters."""
    name = spec.name
    if name == "fnet":
        g = _encoder("fnet", spec.output_dim or 128, True, spec.seed)
    elif name == "cnet":
        g = _encoder("cnet", spec.output_dim or 256, False, spec.seed)
    elif name == "updatenet":
        g = _updatenet(spec.seed)
    elif name == "droid":
        g = merge([_encoder("fnet", 128, True, spec.seed, "fnet."),
                   _encoder("cnet", 256, False, spec.seed + 1, "cnet."),
                   _updatenet(spec.seed + 2, "update.")], "droid")
    elif name == "toy-residual":
        g = _toy_residual(spec.widths, spec.in_channels, spec.output_dim or spec.in_channels, spec.seed)
    elif name == "toy-gru":
        g = _toy_gru(spec.widths, spec.in_channels, spec.output_dim or spec.in_channels, spec.seed)
    else:
        raise ValueError(f"unknown zoo model {name!r}; choose from {', '.join(ZOO_NAMES)}")
    return validate(g)


def build_model(name: str, **kwargs) -> ModelGraph:
    return build(ZooSpec(name, **kwargs))


@dataclass(frozen=True)
class ReferenceProfile:
    total_params: float = 4.00e6
    cnn_params: float = 3.94e6
    cnn_share: float = 0.985
    flops: float = 4.64e9
    size_mb: float = 15.32
    # pruning rate -> (pruned GFLOPs, FLOPs reduction %, reduced size MB, size reduction %)
    table: Dict[float, Tuple[float, float, float, float]] = field(default_factory=lambda: {
        0.10: (4.20, 9.44, 3.63, 76.3),
        0.20: (3.76, 18.90, 3.25, 79.8),
    })


def profile_reference() -> ReferenceProfile:
    """Published computational profile of the original networks."""
    return ReferenceProfile()
