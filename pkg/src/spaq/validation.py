"""Argument checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers
from typing import Dict, Tuple

import numpy as np

from .graph import DTypeError, ModelGraph, ShapeError, validate


def check_graph(graph, precision: str = None) -> ModelGraph:
    if not isinstance(graph, ModelGraph):
        raise TypeError(f"expected a ModelGraph, got {type(graph).__name__}")
    if precision is not None and graph.precision != precision:
        raise ValueError(f"expected a {precision} graph, got {graph.precision}")
    return validate(graph)


def check_fraction(value, name: str, low_open: bool = False, high_open: bool = True) -> float:
    """Validate a fraction in [0, 1) by default; endpoints configurable."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {value!r}")
    v = float(value)
    lo_ok = v > 0 if low_open else v >= 0
    hi_ok = v < 1 if high_open else v <= 1
    if not (np.isfinite(v) and lo_ok and hi_ok):
        lo, hi = "(" if low_open else "[", ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return v


def check_positive_int(value, name: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return int(value)


def check_resolution(resolution) -> Tuple[int, int]:
    try:
        h, w = (int(v) for v in resolution)
    except (TypeError, ValueError):
        raise ValueError(f"resolution must be a pair of integers, got {resolution!r}") from None
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {resolution!r}")
    return h, w


def check_inputs(graph: ModelGraph, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Inputs must be float32 NCHW arrays covering exactly the graph's inputs."""
    if set(inputs) != set(graph.inputs):
        raise ValueError(f"inputs {sorted(inputs)} do not match graph inputs {sorted(graph.inputs)}")
    out = {}
    for k, v in inputs.items():
        v = np.asarray(v)
        if v.dtype != np.float32:
            raise DTypeError(f"input {k!r} must be float32, got {v.dtype}")
        if v.ndim != 4 or v.shape[1] != graph.inputs[k].channels:
            raise ShapeError(f"input {k!r} must be (N, {graph.inputs[k].channels}, H, W), got {v.shape}")
        out[k] = v
    return out
