"""Channel-dependency analysis: which convolutions must share a prune index set.

Every conv output opens a channel space. Norms and activations pass their
input space through; an Add merges the spaces of its operands; a Concat lays
spaces side by side. Spaces reaching a graph output, coming from a graph
input or acting as a GRU hidden state are fixed; every other space is a
prunable unit whose producer convs form its coupling group.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

from ..graph import ELEMENTWISE, ModelGraph


class _UnionFind:
    def __init__(self):
        self.parent: Dict[str, str] = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earlier-created space as representative
            self.parent[rb] = ra
        return ra


@dataclass(frozen=True)
class PruneUnit:
    """A prunable channel space: conv producers pruned jointly, and its width."""
    name: str
    convs: Tuple[str, ...]
    channels: int

    @property
    def coupled(self) -> bool:
        return len(self.convs) > 1


def _layouts(graph: ModelGraph, uf: _UnionFind, fixed: set):
    """Per node, list of (space, channels) segments of its output."""
    seg: Dict[str, List[Tuple[str, int]]] = {}
    order: List[str] = []
    for name, spec in graph.inputs.items():
        sid = f"input:{name}"
        uf.add(sid)
        fixed.add(sid)
        order.append(sid)
        seg[name] = [(sid, spec.channels)]
    for n in graph.nodes:
        if n.kind == "Conv2d":
            sid = f"conv:{n.id}"
            uf.add(sid)
            order.append(sid)
            seg[n.id] = [(sid, n.attrs["out_channels"])]
        elif n.kind == "InstanceNorm" or n.kind in ELEMENTWISE:
            seg[n.id] = list(seg[n.inputs[0]])
        elif n.kind == "Concat":
            seg[n.id] = [s for src in n.inputs for s in seg[src]]
        elif n.kind == "Add":
            layouts = [seg[src] for src in n.inputs]
            if all(len(lay) == 1 for lay in layouts):
                root = layouts[0][0][0]
                for lay in layouts[1:]:
                    root = uf.union(root, lay[0][0])
                seg[n.id] = [(root, layouts[0][0][1])]
            else:
                # mixed layouts under an Add: freeze everything involved
                for lay in layouts:
                    fixed.update(s for s, _ in lay)
                seg[n.id] = list(layouts[0])
        elif n.kind == "ConvGRUCell":
            fixed.update(s for s, _ in seg[n.inputs[0]])
            seg[n.id] = list(seg[n.inputs[0]])
        else:
            raise ValueError(f"node {n.id!r}: unknown kind {n.kind!r}")
    for out in graph.outputs:
        fixed.update(s for s, _ in seg[out])
    return seg, order


def prune_units(graph: ModelGraph) -> List[PruneUnit]:
    """Prunable units in topological order of their first producer."""
    uf = _UnionFind()
    fixed: set = set()
    _, order = _layouts(graph, uf, fixed)
    fixed_roots = {uf.find(s) for s in fixed}
    groups: Dict[str, List[str]] = {}
    for sid in order:
        root = uf.find(sid)
        if root in fixed_roots or not sid.startswith("conv:"):
            continue
        groups.setdefault(root, []).append(sid[len("conv:"):])
    units = []
    for convs in groups.values():
        units.append(PruneUnit(convs[0], tuple(convs), graph[convs[0]].attrs["out_channels"]))
    return units


def unit_params(graph: ModelGraph, units: List[PruneUnit]) -> Dict[str, int]:
    """Own parameters (weights and biases) of each unit's producer convs."""
    out = {}
    for u in units:
        out[u.name] = sum(int(v.size) for c in u.convs for v in graph[c].params.values())
    return out
