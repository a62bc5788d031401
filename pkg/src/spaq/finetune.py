"""Gradient fine-tuning on synthetic dense-prediction tasks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .engine import GradientTape, backward, forward
from .graph import ModelGraph, ShapeError

TARGETS = ("blur-flow", "downsample-identity", "teacher")
OPTIMIZERS = ("sgd", "sgd-momentum-0.9")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"fine-tuning diverged at step {step} (loss={loss})")
        self.step = step


@dataclass
class FinetuneConfig:
    steps: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 4
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _box_blur(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    H, W = x.shape[2:]
    return sum(p[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)) / 9.0


def _pool(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    N, C, H, W = x.shape
    return x.reshape(N, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))


@dataclass
class SyntheticTask:
    """Seeded regression task: random inputs and a fixed target function.

    ``blur-flow`` targets a 3x3 box blur of the input, ``downsample-identity``
    the input average-pooled to the output resolution, ``teacher`` the outputs
    of a reference graph (distillation). For the first two, output channel c
    copies input channel c mod C_in.
    """
    target: str = "blur-flow"
    seed: int = 0
    samples: int = 16
    resolution: Tuple[int, int] = (16, 16)
    teacher: Optional[ModelGraph] = None
    _cache: Dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; choose from {TARGETS}")
        if self.target == "teacher" and self.teacher is None:
            raise ValueError("teacher target needs a reference graph")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    def inputs_for(self, graph: ModelGraph) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        shapes = graph.input_shapes(self.resolution, batch=self.samples)
        return {k: rng.standard_normal(shapes[k]).astype(np.float32) for k in sorted(shapes)}

    def materialize(self, graph: ModelGraph):
        """(inputs, targets) for ``graph``; regenerated identically from the seed."""
        key = (tuple((k, s.channels, s.stride) for k, s in graph.inputs.items()), tuple(graph.outputs))
        if key in self._cache:
            return self._cache[key]
        inputs = self.inputs_for(graph)
        if self.target == "teacher":
            targets = forward(self.teacher, inputs)
        else:
            if len(graph.inputs) != 1 or len(graph.outputs) != 1:
                raise ShapeError(f"target {self.target!r} needs a single-input, single-output graph")
            from .graph import infer_shapes
            x = next(iter(inputs.values()))
            out_shape = infer_shapes(graph, {k: v.shape for k, v in inputs.items()})[graph.outputs[0]]
            if x.shape[2] % out_shape[2] or x.shape[3] % out_shape[3]:
                raise ShapeError("output resolution must divide the input resolution")
            src = _box_blur(x) if self.target == "blur-flow" else x
            src = _pool(src, x.shape[2] // out_shape[2])
            chans = [c % x.shape[1] for c in range(out_shape[1])]
            targets = {graph.outputs[0]: np.ascontiguousarray(src[:, chans]).astype(np.float32)}
        self._cache[key] = (inputs, targets)
        return inputs, targets


def mse_loss(outputs: Dict[str, np.ndarray], targets: Dict[str, np.ndarray]):
    """Mean over outputs of per-output MSE, with its gradient."""
    n = len(outputs)
    loss, grads = 0.0, {}
    for k, y in outputs.items():
        t = targets[k]
        if y.shape != t.shape:
            raise ShapeError(f"output {k!r} has shape {y.shape}, target {t.shape}")
        diff = y - t
        loss += float(np.mean(diff.astype(np.float64) ** 2)) / n
        grads[k] = (2.0 / (n * diff.size)) * diff
    return loss, grads


def task_loss(graph: ModelGraph, task: SyntheticTask) -> float:
    inputs, targets = task.materialize(graph)
    return mse_loss(forward(graph, inputs), targets)[0]


def finetune(graph: ModelGraph, task: SyntheticTask, cfg: FinetuneConfig = None) -> Tuple[ModelGraph, List[float]]:
    """SGD on the task's sample set; returns the new graph and the per-step loss."""
    cfg = cfg or FinetuneConfig()
    if graph.precision != "fp32":
        raise ValueError("only fp graphs can be fine-tuned")
    if cfg.steps == 0:
        return graph, []
    inputs, targets = task.materialize(graph)
    rng = np.random.default_rng(cfg.seed)
    params = {(nid, p): v for nid, p, v in graph.parameters()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    momentum = 0.9 if cfg.optimizer == "sgd-momentum-0.9" else 0.0
    batch = min(cfg.batch_size, task.samples)
    trace = []
    current = graph
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(task.samples, size=batch, replace=False))
        xb = {k: v[idx] for k, v in inputs.items()}
        tb = {k: v[idx] for k, v in targets.items()}
        tape = GradientTape()
        loss, dout = mse_loss(forward(current, xb, tape), tb)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        trace.append(loss)
        grads = backward(tape, dout)
        for k, g in grads.items():
            if momentum:
                velocity[k] = momentum * velocity[k] + g
                g = velocity[k]
            params[k] = (params[k] - cfg.learning_rate * g).astype(params[k].dtype)
        current = graph.with_params(params)
    return current, trace
