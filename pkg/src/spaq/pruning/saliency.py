"""L1-norm filter saliency."""
from typing import Iterable

import numpy as np

from ..graph import ModelGraph


def saliency(graph: ModelGraph, layer: str) -> np.ndarray:
    """L1 norm of each output filter of a Conv2d node (bias excluded)."""
    if layer not in graph:
        raise KeyError(f"no node {layer!r}")
    node = graph[layer]
    if node.kind != "Conv2d":
        raise ValueError(f"node {layer!r} is {node.kind}, saliency needs a Conv2d")
    w = node.params["weight"]
    return np.abs(w.astype(np.float64)).reshape(w.shape[0], -1).sum(axis=1)


def group_saliency(graph: ModelGraph, convs: Iterable[str]) -> np.ndarray:
    """Summed saliency over convs that share output channels."""
    convs = list(convs)
    total = saliency(graph, convs[0])
    for c in convs[1:]:
        total = total + saliency(graph, c)
    return total


def least_salient(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` smallest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.sort(order[:count])
