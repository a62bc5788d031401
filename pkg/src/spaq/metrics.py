"""Evaluators for sensitivity probing and the ATE trajectory metric."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .engine import forward
from .finetune import SyntheticTask
from .graph import ModelGraph

ASSOCIATION_TOLERANCE = 0.02


class SyntheticEvaluator:
    """RMSE of graph outputs against a task's targets on its fixed sample set.

    With several outputs the per-output RMSEs are averaged. Evaluation only
    reads the graph, so concurrent calls are safe.
    """
    parallel_safe = True

    def __init__(self, task: SyntheticTask):
        self.task = task
        self.name = f"synthetic:{task.target}:seed={task.seed}"

    def evaluate(self, graph: ModelGraph) -> float:
        inputs, targets = self.task.materialize(graph)
        outs = forward(graph, inputs)
        return rmse(outs, targets)


def rmse(outputs: Dict[str, np.ndarray], targets: Dict[str, np.ndarray]) -> float:
    vals = []
    for k, y in outputs.items():
        t = targets[k]
        if y.shape != t.shape:
            raise ValueError(f"output {k!r} has shape {y.shape}, target {t.shape}")
        vals.append(np.sqrt(np.mean((y.astype(np.float64) - t) ** 2)))
    return float(np.mean(vals))


def synthetic_evaluator(task: SyntheticTask) -> SyntheticEvaluator:
    return SyntheticEvaluator(task)


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray  # qx, qy, qz, qw

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.timestamps)
        if self.orientations is None:
            self.orientations = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
        self.orientations = np.asarray(self.orientations, dtype=np.float64).reshape(-1, 4)
        if len(self.positions) != n or len(self.orientations) != n:
            raise TrajectoryError("timestamps, positions and orientations differ in length")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise TrajectoryError("timestamps must be strictly increasing")
        if n and np.max(np.abs(np.linalg.norm(self.orientations, axis=1) - 1.0)) > 1e-6:
            raise TrajectoryError("orientations must be unit quaternions")

    def __len__(self):
        return len(self.timestamps)


def read_tum(path) -> Trajectory:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.replace(",", " ").split()
            if len(fields) != 8:
                raise TrajectoryError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            rows.append([float(f) for f in fields])
    data = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8])


def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, p, q in zip(traj.timestamps, traj.positions, traj.orientations):
        lines.append(" ".join(repr(float(v)) for v in (t, *p, *q)))
    return "".join(line + "\n" for line in lines)


def write_tum(traj: Trajectory, path):
    """Shortest round-trip float text, so read_tum(write_tum(t)) is bit-exact."""
    with open(path, "w") as fh:
        fh.write(format_tum(traj))


def associate(est: Trajectory, gt: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs matched by nearest timestamp within ``tolerance`` seconds.

    Candidate pairs are taken greedily from the smallest time difference;
    each sample is used at most once and unmatched samples are dropped.
    """
    if len(est) == len(gt) and np.array_equal(est.timestamps, gt.timestamps):
        idx = np.arange(len(est))
        return idx, idx
    cands = []
    for i, t in enumerate(est.timestamps):
        lo = np.searchsorted(gt.timestamps, t - tolerance, side="left")
        hi = np.searchsorted(gt.timestamps, t + tolerance, side="right")
        for j in range(lo, hi):
            cands.append((abs(gt.timestamps[j] - t), i, j))
    cands.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    pairs.sort()
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    a = np.array(pairs)
    return a[:, 0], a[:, 1]


@dataclass
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool) -> Alignment:
    """Least-squares s, R, t minimising sum ||s R src_i + t - dst_i||^2."""
    n = len(src)
    if n < 3:
        raise TrajectoryError(f"alignment needs at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs ** 2) / n
    cov = xd.T @ xs / n
    if np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(xs).max())) < 2:
        raise TrajectoryError("degenerate correspondences: positions are collinear or coincident")
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return Alignment(R, t, s)


def align(est: Trajectory, gt: Trajectory, mode: str = "similarity",
          tolerance: float = ASSOCIATION_TOLERANCE) -> Tuple[Alignment, Trajectory, Trajectory]:
    """Align ``est`` onto ``gt``; returns the transform and the matched pair."""
    if mode not in ("rigid", "similarity"):
        raise ValueError(f"mode must be 'rigid' or 'similarity', got {mode!r}")
    ie, ig = associate(est, gt, tolerance)
    if len(ie) < 3:
        raise TrajectoryError(f"only {len(ie)} associated samples; need at least 3")
    T = umeyama(est.positions[ie], gt.positions[ig], with_scale=(mode == "similarity"))
    aligned = Trajectory(est.timestamps[ie], T.apply(est.positions[ie]), est.orientations[ie])
    matched = Trajectory(gt.timestamps[ig], gt.positions[ig], gt.orientations[ig])
    return T, aligned, matched


def ate_rmse(est: Trajectory, gt: Trajectory, mode: str = "similarity",
             tolerance: float = ASSOCIATION_TOLERANCE) -> float:
    """Position RMSE (metres) after least-squares alignment."""
    _, aligned, matched = align(est, gt, mode, tolerance)
    err = np.linalg.norm(aligned.positions - matched.positions, axis=1)
    return float(np.sqrt(np.mean(err ** 2)))
