"""Estimator-style wrappers around the pruning and quantization stages.

Hyperparameters live in ``__init__`` (so ``get_params``/``set_params`` and
``sklearn.base.clone`` work), fitted state in trailing-underscore attributes.
``X`` is a :class:`~spaq.graph.ModelGraph` rather than a feature matrix.
"""
from __future__ import annotations

from typing import Optional, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import accounting
from .finetune import FinetuneConfig, SyntheticTask
from .metrics import synthetic_evaluator
from .pruning import P_MAX, allocate_budget, analyze_sensitivity, apply_plan, spaq_prune
from .quantize import CalibrationSet, calibrate, quantize_graph, quantized_forward
from .validation import (check_fraction, check_graph, check_inputs, check_positive_int,
                         check_resolution)


def _evaluator(task, evaluator):
    if evaluator is not None:
        return evaluator
    if task is None:
        raise ValueError("pass either an evaluator or a task")
    return synthetic_evaluator(task)


class SensitivityAnalyzer(BaseEstimator):
    """Probe every prunable layer; ``profile_`` holds the result.

    ``transform`` turns the profile into a per-layer allocation for
    ``global_rate``.
    """

    def __init__(self, probe_rate: float = 0.1, subtract_baseline: bool = False, threads: int = 1,
                 global_rate: float = 0.2, p_max: float = P_MAX, weighting: str = "direct"):
        self.probe_rate = probe_rate
        self.subtract_baseline = subtract_baseline
        self.threads = threads
        self.global_rate = global_rate
        self.p_max = p_max
        self.weighting = weighting

    def fit(self, X, y: Optional[SyntheticTask] = None, evaluator=None):
        graph = check_graph(X, "fp32")
        x = check_fraction(self.probe_rate, "probe_rate", low_open=True)
        check_positive_int(self.threads, "threads")
        self.profile_ = analyze_sensitivity(graph, x, _evaluator(y, evaluator),
                                            self.subtract_baseline, self.threads)
        self.layers_ = self.profile_.layers
        return self

    def transform(self, X=None):
        check_is_fitted(self, "profile_")
        rate = check_fraction(self.global_rate, "global_rate", low_open=True)
        return allocate_budget(self.profile_, rate, p_max=self.p_max, weighting=self.weighting)


class StructuredPruner(TransformerMixin, BaseEstimator):
    """Staged sensitivity-guided pruning with fine-tuning between stages.

    ``fit`` runs the full schedule and keeps the fine-tuned result in
    ``graph_``. ``transform`` replays only the structural part (the fitted
    pruning plans) on a graph with the same architecture, e.g. another
    checkpoint of the fitted model; ``fit_transform`` returns ``graph_``.
    """

    def __init__(self, global_rate: float = 0.2, schedule: Optional[Sequence[float]] = None,
                 probe_rate: Optional[float] = None, p_max: float = P_MAX, weighting: str = "direct",
                 finetune_steps: int = 200, learning_rate: float = 1e-3, optimizer: str = "sgd",
                 batch_size: int = 4, seed: int = 0, subtract_baseline: bool = False, threads: int = 1,
                 resolution=(384, 512)):
        self.global_rate = global_rate
        self.schedule = schedule
        self.probe_rate = probe_rate
        self.p_max = p_max
        self.weighting = weighting
        self.finetune_steps = finetune_steps
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed
        self.subtract_baseline = subtract_baseline
        self.threads = threads
        self.resolution = resolution

    def _finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(check_positive_int(self.finetune_steps, "finetune_steps", allow_zero=True),
                              self.learning_rate, self.optimizer, self.batch_size, self.seed)

    def fit(self, X, y: Optional[SyntheticTask] = None, evaluator=None):
        graph = check_graph(X, "fp32")
        rate = check_fraction(self.global_rate, "global_rate")
        if self.probe_rate is not None:
            check_fraction(self.probe_rate, "probe_rate", low_open=True)
        resolution = check_resolution(self.resolution)
        cfg = self._finetune_config()
        self.graph_, self.stages_ = spaq_prune(
            graph, rate, _evaluator(y, evaluator), y, self.schedule, cfg, self.probe_rate,
            self.p_max, self.weighting, self.subtract_baseline, self.threads)
        self.plans_ = [s.plan for s in self.stages_]
        self.reduction_ = accounting.reduction_report(accounting.cost_report(graph, resolution),
                                                      accounting.cost_report(self.graph_, resolution))
        return self

    def transform(self, X):
        check_is_fitted(self, "plans_")
        graph = check_graph(X, "fp32")
        for plan in self.plans_:
            graph = apply_plan(graph, plan)
        return graph

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).graph_


class PostTrainingQuantizer(TransformerMixin, BaseEstimator):
    """Calibrate activation ranges in ``fit``; ``transform`` emits the int8 graph.

    ``predict`` runs the integer forward pass of the last transformed graph.
    """

    def __init__(self, weight_scheme: str = "symmetric-per-channel", calib_samples: int = 8,
                 calib_resolution=(32, 32), seed: int = 0):
        self.weight_scheme = weight_scheme
        self.calib_samples = calib_samples
        self.calib_resolution = calib_resolution
        self.seed = seed

    def fit(self, X, y: Optional[CalibrationSet] = None):
        graph = check_graph(X, "fp32")
        calib = y
        if calib is None:
            n = check_positive_int(self.calib_samples, "calib_samples")
            calib = CalibrationSet.synthetic(graph, n, self.seed, check_resolution(self.calib_resolution))
        self.records_ = calibrate(graph, calib, self.weight_scheme)
        self.n_calibration_samples_ = calib.samples
        return self

    def transform(self, X):
        check_is_fitted(self, "records_")
        self.qgraph_ = quantize_graph(check_graph(X, "fp32"), self.records_)
        return self.qgraph_

    def predict(self, inputs):
        check_is_fitted(self, "qgraph_")
        return quantized_forward(self.qgraph_, check_inputs(self.qgraph_, inputs))
