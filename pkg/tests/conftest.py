"""Shared fixtures: a tiny independent graph builder and random graph generators."""
import numpy as np
import pytest

from spaq.graph import InputSpec, LayerNode, ModelGraph, validate

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class Net:
    """Minimal graph builder kept separate from the zoo's own builder."""

    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.nodes = []
        self.inputs = {}
        self.channels = {}

    def input(self, name, channels, stride=1):
        self.inputs[name] = InputSpec(channels, stride)
        self.channels[name] = channels
        return name

    def _add(self, node, channels):
        self.nodes.append(node)
        self.channels[node.id] = channels
        return node.id

    def conv(self, src, cout, k=3, stride=1, bias=True, scale=0.5, nid=None):
        cin = self.channels[src]
        nid = nid or f"conv{len(self.nodes)}"
        params = {"weight": (self.rng.standard_normal((cout, cin, k, k)) * scale / np.sqrt(cin * k * k)).astype(self.dtype)}
        if bias:
            params["bias"] = (self.rng.standard_normal(cout) * 0.1).astype(self.dtype)
        attrs = dict(in_channels=cin, out_channels=cout, kernel_size=k, stride=stride, padding=k // 2, bias=bias)
        return self._add(LayerNode(nid, "Conv2d", attrs, params, [src]), cout)

    def norm(self, src):
        c = self.channels[src]
        params = {"weight": (1 + 0.1 * self.rng.standard_normal(c)).astype(self.dtype),
                  "bias": (0.1 * self.rng.standard_normal(c)).astype(self.dtype)}
        return self._add(LayerNode(f"norm{len(self.nodes)}", "InstanceNorm", {}, params, [src]), self.channels[src])

    def act(self, src, kind="ReLU"):
        return self._add(LayerNode(f"{kind.lower()}{len(self.nodes)}", kind, {}, {}, [src]), self.channels[src])

    def add(self, *srcs):
        return self._add(LayerNode(f"add{len(self.nodes)}", "Add", {}, {}, list(srcs)), self.channels[srcs[0]])

    def concat(self, *srcs):
        return self._add(LayerNode(f"cat{len(self.nodes)}", "Concat", {}, {}, list(srcs)),
                         sum(self.channels[s] for s in srcs))

    def gru(self, h, x, k=3):
        ch, cx = self.channels[h], self.channels[x]
        params = {}
        for g in "zrq":
            params[f"w{g}"] = (self.rng.standard_normal((ch, ch + cx, k, k)) * 0.3 / np.sqrt((ch + cx) * k * k)).astype(self.dtype)
            params[f"b{g}"] = (0.1 * self.rng.standard_normal(ch)).astype(self.dtype)
        attrs = dict(hidden_channels=ch, input_channels=cx, kernel_size=k)
        return self._add(LayerNode(f"gru{len(self.nodes)}", "ConvGRUCell", attrs, params, [h, x]), ch)

    def graph(self, outputs, name="test"):
        return validate(ModelGraph(list(self.nodes), dict(self.inputs), list(outputs), name=name))


def random_graph(seed, norm=True, gru=True, sigmoid=True, max_blocks=4):
    """Random small graph mixing plain, residual, concat and (optionally) GRU blocks."""
    rng = np.random.default_rng(seed)
    net = Net(rng)
    cin = int(rng.integers(1, 4))
    cur = net.input("x", cin)
    acts = ["ReLU", "Tanh"] + (["Sigmoid"] if sigmoid else [])
    kinds = ["plain", "res", "cat"] + (["gru"] if gru else [])
    for _ in range(int(rng.integers(2, max_blocks + 1))):
        kind = kinds[int(rng.integers(len(kinds)))]
        c = int(rng.integers(2, 7))
        if kind == "plain":
            cur = net.conv(cur, c, k=int(rng.choice([1, 3])))
            if norm and rng.random() < 0.5:
                cur = net.norm(cur)
            cur = net.act(cur, acts[int(rng.integers(len(acts)))])
        elif kind == "res":
            a = net.act(net.conv(cur, c), "ReLU")
            b = net.conv(a, c)
            skip = cur if net.channels[cur] == c and rng.random() < 0.5 else net.conv(cur, c, k=1)
            cur = net.act(net.add(skip, b), "ReLU")
        elif kind == "cat":
            a = net.act(net.conv(cur, c), acts[int(rng.integers(len(acts)))])
            b = net.conv(cur, int(rng.integers(2, 5)), k=1)
            cur = net.concat(a, b)
        else:
            h = net.input(f"h{len(net.nodes)}", int(rng.integers(2, 5)))
            cur = net.gru(h, net.conv(cur, c))
    out = net.conv(cur, int(rng.integers(1, 4)), k=1, nid="head")
    return net.graph([out], name=f"random{seed}")


def random_inputs(graph, seed=0, resolution=(6, 6), batch=2, dtype=np.float32):
    rng = np.random.default_rng(seed)
    shapes = graph.input_shapes(resolution, batch)
    return {k: rng.standard_normal(shapes[k]).astype(dtype) for k in sorted(shapes)}


def masked_forward(graph, plan, inputs):
    """Dense forward pass with the planned filters' channels zeroed wherever they flow.

    Masks start at each unit's producer convs and follow norms, activations,
    adds and concats; a consumer conv then sees zeros on those channels,
    which is what removing them means.
    """
    from spaq.engine import run_node

    pruned = {}
    for unit, idx in plan.indices.items():
        for conv in plan.groups[unit]:
            pruned[conv] = set(int(i) for i in idx)
    masks = {k: set() for k in graph.inputs}
    values = {k: np.asarray(v) for k, v in inputs.items()}
    for node in graph.nodes:
        out = run_node(node, [values[i] for i in node.inputs])
        if node.kind == "Conv2d":
            mask = pruned.get(node.id, set())
        elif node.kind == "ConvGRUCell":
            mask = set()
        elif node.kind == "Concat":
            mask, offset = set(), 0
            for src in node.inputs:
                mask |= {offset + c for c in masks[src]}
                offset += values[src].shape[1]
        elif node.kind == "Add":
            mask = set().union(*(masks[s] for s in node.inputs))
        else:
            mask = masks[node.inputs[0]]
        if mask:
            out = out.copy()
            out[:, sorted(mask)] = 0
        masks[node.id] = mask
        values[node.id] = out
    return {o: values[o] for o in graph.outputs}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
