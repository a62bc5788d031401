"""Command line: the full compression pipeline plus each stage on its own.

Exit status is 0 on success, 1 for usage errors (bad flags, invalid
configuration) and 2 when a stage fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional, Sequence, Tuple

from . import accounting, persistence
from .finetune import OPTIMIZERS, TARGETS, FinetuneConfig, SyntheticTask, finetune
from .graph import ModelGraph
from .metrics import ate_rmse, read_tum, synthetic_evaluator
from .pruning import (P_MAX, WEIGHTINGS, analyze_sensitivity, check_schedule, default_schedule,
                      spaq_prune)
from .quantize import WEIGHT_SCHEMES, CalibrationSet, spaq_quantize
from .zoo import ZOO_NAMES, build_model, profile_reference

log = logging.getLogger("spaq")

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class UsageError(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclasses.dataclass
class PipelineConfig:
    model: str = "droid"
    global_rate: float = 0.2
    schedule: Optional[List[float]] = None
    probe_rate: Optional[float] = None
    weighting: str = "direct"
    p_max: float = P_MAX
    steps: int = 200
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 4
    task: str = "teacher"
    task_samples: int = 8
    task_resolution: Tuple[int, int] = (32, 32)
    calib_samples: int = 8
    scheme: str = "symmetric-per-channel"
    resolution: Tuple[int, int] = (384, 512)
    seed: int = 0
    threads: int = 1
    out: str = "spaq-out"
    format: str = "text"

    # execution-only settings that cannot change any artifact
    _UNHASHED = ("threads", "out", "format")

    def check(self) -> "PipelineConfig":
        if not 0 <= self.global_rate < 1:
            raise UsageError(f"--global-rate must lie in [0, 1), got {self.global_rate}")
        if self.probe_rate is not None and not 0 < self.probe_rate < 1:
            raise UsageError(f"--probe-rate must lie in (0, 1), got {self.probe_rate}")
        if not 0 < self.p_max <= 1:
            raise UsageError(f"--p-max must lie in (0, 1], got {self.p_max}")
        if self.weighting not in WEIGHTINGS:
            raise UsageError(f"--weighting must be one of {WEIGHTINGS}")
        if self.scheme not in WEIGHT_SCHEMES:
            raise UsageError(f"--scheme must be one of {WEIGHT_SCHEMES}")
        if self.task not in TARGETS:
            raise UsageError(f"--task must be one of {TARGETS}")
        if self.steps < 0 or self.calib_samples < 1 or self.task_samples < 1 or self.threads < 1:
            raise UsageError("step, sample and thread counts must be non-negative / positive")
        if self.format not in ("text", "structured"):
            raise UsageError("--format must be 'text' or 'structured'")
        try:
            schedule = default_schedule(self.global_rate) if self.schedule is None else self.schedule
            self.schedule = check_schedule(schedule, self.global_rate)
            FinetuneConfig(self.steps, self.lr, self.optimizer, self.batch_size, self.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        self.task_resolution = tuple(self.task_resolution)
        self.resolution = tuple(self.resolution)
        return self

    def hashed(self) -> dict:
        doc = dataclasses.asdict(self)
        for k in self._UNHASHED:
            doc.pop(k)
        return doc

    def digest(self) -> str:
        blob = json.dumps(self.hashed(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(self.steps, self.lr, self.optimizer, self.batch_size, self.seed)


# --- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rates(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated rates, got {text!r}") from None


def _resolution(text: str) -> Tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="seed for tasks, fine-tuning and calibration")
    g.add_argument("--threads", type=int, default=None, help="worker threads for sensitivity probes")
    g.add_argument("--format", choices=("text", "structured"), default=None, help="stdout report format")
    g.add_argument("--config", help="JSON file with pipeline settings; flags take precedence")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _model_flag(p, required=False):
    p.add_argument("--model", required=required, default=None,
                   help=f"zoo name ({', '.join(ZOO_NAMES)}) or model file path")


def _prune_flags(p):
    p.add_argument("--global-rate", type=float)
    p.add_argument("--schedule", type=_rates, help="cumulative rates, e.g. 0.1,0.2")
    p.add_argument("--probe-rate", type=float)
    p.add_argument("--weighting", choices=WEIGHTINGS)
    p.add_argument("--p-max", type=float)


def _task_flags(p):
    p.add_argument("--task", choices=TARGETS, help="synthetic target (teacher distils the input model)")
    p.add_argument("--task-samples", type=int)
    p.add_argument("--task-resolution", type=_resolution)


def _finetune_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--batch-size", type=int)


def _quant_flags(p):
    p.add_argument("--calib-samples", type=int)
    p.add_argument("--scheme", choices=WEIGHT_SCHEMES)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="spaq", description="Sensitivity-guided pruning and 8-bit quantization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pipeline", parents=[common], help="sensitivity, prune+finetune, quantize, report")
    _model_flag(p)
    _prune_flags(p)
    _task_flags(p)
    _finetune_flags(p)
    _quant_flags(p)
    p.add_argument("--resolution", type=_resolution, help="input resolution for FLOPs (HxW)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("analyze-sensitivity", parents=[common], help="probe every prunable layer")
    _model_flag(p)
    _prune_flags(p)
    _task_flags(p)
    p.add_argument("--out", help="write the profile (JSON) here")

    p = sub.add_parser("prune", parents=[common], help="staged pruning with fine-tuning")
    _model_flag(p)
    _prune_flags(p)
    _task_flags(p)
    _finetune_flags(p)
    p.add_argument("--out", required=True, help="pruned model file")
    p.add_argument("--log", help="write stage logs (JSON) here")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a model on a synthetic task")
    _model_flag(p)
    _task_flags(p)
    _finetune_flags(p)
    p.add_argument("--teacher", help="reference model for the teacher task (default: the input model)")
    p.add_argument("--out", required=True, help="fine-tuned model file")

    p = sub.add_parser("quantize", parents=[common], help="post-training int8 quantization")
    _model_flag(p)
    _quant_flags(p)
    p.add_argument("--resolution", type=_resolution)
    p.add_argument("--out", required=True, help="quantized model file")

    p = sub.add_parser("report", parents=[common], help="compare two models' cost")
    p.add_argument("--baseline", required=True, help="zoo name or model file")
    p.add_argument("--optimized", required=True, help="zoo name or model file")
    p.add_argument("--resolution", type=_resolution)

    p = sub.add_parser("ate", parents=[common], help="absolute trajectory error of two TUM files")
    p.add_argument("estimate")
    p.add_argument("groundtruth")
    p.add_argument("--mode", choices=("rigid", "similarity"), default="similarity")

    p = sub.add_parser("verify", parents=[common], help="check a model file's output digest")
    p.add_argument("model")
    return parser


_FLAG_KEYS = ("model", "global_rate", "schedule", "probe_rate", "weighting", "p_max", "steps", "lr",
              "optimizer", "batch_size", "task", "task_samples", "task_resolution", "calib_samples",
              "scheme", "resolution", "seed", "threads", "out", "format")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(doc)
    for k in _FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg.check()


# --- helpers ---------------------------------------------------------------

def load_model(ref: str) -> ModelGraph:
    if ref in ZOO_NAMES:
        return build_model(ref)
    if not os.path.exists(ref):
        raise UsageError(f"{ref!r} is neither a zoo model ({', '.join(ZOO_NAMES)}) nor an existing file")
    return persistence.load(ref)


def make_task(cfg: PipelineConfig, graph: ModelGraph, teacher: Optional[ModelGraph] = None) -> SyntheticTask:
    """The configured task; the teacher target distils ``teacher`` or else ``graph`` itself."""
    if cfg.task == "teacher":
        return SyntheticTask("teacher", cfg.seed, cfg.task_samples, cfg.task_resolution, teacher or graph)
    return SyntheticTask(cfg.task, cfg.seed, cfg.task_samples, cfg.task_resolution)


def _totals(report: accounting.CostReport) -> dict:
    return {"params_total": report.params_total, "flops_total": report.flops_total,
            "size_bytes": report.size_bytes, "size_mib": report.size_mib,
            "precision": report.precision_state}


def reference_rows(global_rate: float) -> Optional[dict]:
    """Published figures for the matching global rate, if there are any."""
    ref = profile_reference()
    for rate, (gflops, flops_pct, size_mb, size_pct) in ref.table.items():
        if abs(rate - global_rate) < 1e-9:
            return {
                "global_rate": rate,
                "baseline_gflops": ref.flops / 1e9,
                "baseline_size_mib": ref.size_mb,
                "pruned_gflops": gflops,
                "flops_reduction_pct": flops_pct,
                "flops_reduction_pct_recomputed": round(
                    accounting.percent_reduction(ref.flops / 1e9, gflops), 2),
                "size_mib": size_mb,
                "size_reduction_pct": size_pct,
                "note": "the published FLOPs reduction and the one recomputed from the published "
                        "GFLOPs can differ by up to 0.5 pp",
            }
    return None


def emit(doc: dict, fmt: str, stream=None):
    stream = stream or sys.stdout
    if fmt == "structured":
        stream.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return
    for line in _text_lines(doc, ""):
        stream.write(line + "\n")


def _text_lines(value, prefix):
    if isinstance(value, dict):
        for k in value:
            yield from _text_lines(value[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(value, list) and value and isinstance(value[0], (dict, list)):
        for i, v in enumerate(value):
            yield from _text_lines(v, f"{prefix}[{i}]")
    else:
        yield f"{prefix}: {_fmt(value)}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return "null" if v is None else str(v)


def write_json(doc: dict, path: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (UsageError, StageFailure):
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


# --- commands --------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage, write artifacts to ``cfg.out`` and return the report."""
    os.makedirs(cfg.out, exist_ok=True)
    digest = cfg.digest()
    artifacts = []

    def save_model(graph, name):
        _stage("persistence", persistence.save, graph, os.path.join(cfg.out, name))
        artifacts.append(name)

    def save_doc(doc, name):
        write_json(dict(doc, config_hash=digest), os.path.join(cfg.out, name))
        artifacts.append(name)

    save_doc({"config": cfg.hashed()}, "config.json")
    baseline = _stage("load", load_model, cfg.model)
    save_model(baseline, "baseline.spaq")
    task = _stage("finetune", make_task, cfg, baseline)
    evaluator = synthetic_evaluator(task)
    try:
        pruned, logs = spaq_prune(baseline, cfg.global_rate, evaluator, task, cfg.schedule,
                                  cfg.finetune_config(), cfg.probe_rate, cfg.p_max, cfg.weighting,
                                  threads=cfg.threads)
    except Exception as exc:
        raise StageFailure("prune", exc) from exc
    stages = []
    for s in logs:
        n = s.stage + 1
        save_doc(s.profile.to_dict(), f"sensitivity_stage{n}.json")
        save_doc(s.plan.to_dict(), f"plan_stage{n}.json")
        save_doc({"loss_trace": s.loss_trace}, f"finetune_stage{n}.json")
        stages.append({"stage": n, "cumulative_target": s.cumulative_target,
                       "nominal_rate": s.nominal_rate, "params_before": s.params_before,
                       "params_after": s.params_after,
                       "final_loss": s.loss_trace[-1] if s.loss_trace else None})
    if logs:
        save_model(pruned, "pruned.spaq")
    calib = CalibrationSet.synthetic(pruned, cfg.calib_samples, cfg.seed, cfg.task_resolution)
    result = _stage("quantize", spaq_quantize, pruned, calib, cfg.scheme, cfg.resolution)
    save_model(result.graph, "final_int8.spaq")

    base_cost = _stage("report", accounting.cost_report, baseline, cfg.resolution)
    pruned_cost = _stage("report", accounting.cost_report, pruned, cfg.resolution)
    final_cost = result.quantized
    red = accounting.reduction_report(base_cost, final_cost)
    report = {
        "config_hash": digest,
        "model": cfg.model,
        "global_rate": cfg.global_rate,
        "schedule": cfg.schedule,
        "resolution": list(cfg.resolution),
        "baseline": _totals(base_cost),
        "pruned": _totals(pruned_cost),
        "final": _totals(final_cost),
        "params_reduction_pct": red["raw"]["params"],
        "flops_reduction_pct": red["raw"]["flops"],
        "size_reduction_pct": red["raw"]["size"],
        "reduction_pct": red,
        "stages": stages,
        "reference": reference_rows(cfg.global_rate),
        "artifacts": sorted(artifacts + ["report.json"]),
    }
    write_json(report, os.path.join(cfg.out, "report.json"))
    return report


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    emit(run_pipeline(cfg), cfg.format)
    return EXIT_OK


def cmd_analyze_sensitivity(args) -> int:
    cfg = resolve_config(args)
    graph = _stage("load", load_model, cfg.model)
    task = _stage("finetune", make_task, cfg, graph)
    x = cfg.probe_rate if cfg.probe_rate is not None else (cfg.schedule[0] if cfg.schedule else 0.1)
    profile = _stage("sensitivity", analyze_sensitivity, graph, x, synthetic_evaluator(task),
                     threads=cfg.threads)
    doc = dict(profile.to_dict(), config_hash=cfg.digest(), model=cfg.model)
    if args.out:
        write_json(doc, args.out)
    if cfg.format == "structured":
        emit(doc, "structured")
    else:
        print(f"probe rate {x:g}, evaluator {profile.evaluator}")
        print(f"{'layer':32s} {'error':>12s} {'S':>10s} {'F':>10s}")
        for k in profile.layers:
            print(f"{k:32s} {profile.induced_error[k]:12.6g} {profile.relative_sensitivity[k]:10.6f} "
                  f"{profile.parameter_fraction[k]:10.6f}")
        print(f"sum S = {sum(profile.relative_sensitivity.values()):.9f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = resolve_config(args)
    graph = _stage("load", load_model, cfg.model)
    task = _stage("finetune", make_task, cfg, graph)
    try:
        pruned, logs = spaq_prune(graph, cfg.global_rate, synthetic_evaluator(task), task, cfg.schedule,
                                  cfg.finetune_config(), cfg.probe_rate, cfg.p_max, cfg.weighting,
                                  threads=cfg.threads)
    except Exception as exc:
        raise StageFailure("prune", exc) from exc
    _stage("persistence", persistence.save, pruned, args.out)
    doc = {"config_hash": cfg.digest(), "stages": [s.to_dict() for s in logs]}
    if args.log:
        write_json(doc, args.log)
    red = accounting.reduction_report(accounting.cost_report(graph, cfg.resolution),
                                      accounting.cost_report(pruned, cfg.resolution))
    emit({"config_hash": cfg.digest(), "params_before": logs[0].params_before if logs else None,
          "params_after": logs[-1].params_after if logs else None,
          "nominal_rates": [s.nominal_rate for s in logs], "reduction_pct": red}, cfg.format)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    graph = _stage("load", load_model, cfg.model)
    teacher = _stage("load", load_model, args.teacher) if args.teacher else None
    task = _stage("finetune", make_task, cfg, graph, teacher)
    tuned, trace = _stage("finetune", finetune, graph, task, cfg.finetune_config())
    _stage("persistence", persistence.save, tuned, args.out)
    emit({"config_hash": cfg.digest(), "steps": len(trace), "loss_trace": trace}, cfg.format)
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = resolve_config(args)
    graph = _stage("load", load_model, cfg.model)
    calib = CalibrationSet.synthetic(graph, cfg.calib_samples, cfg.seed, cfg.task_resolution)
    result = _stage("quantize", spaq_quantize, graph, calib, cfg.scheme, cfg.resolution)
    _stage("persistence", persistence.save, result.graph, args.out)
    emit({"config_hash": cfg.digest(), "baseline": _totals(result.baseline),
          "quantized": _totals(result.quantized), "reduction_pct": result.reduction}, cfg.format)
    return EXIT_OK


def cmd_report(args) -> int:
    resolution = args.resolution or PipelineConfig.resolution
    base = _stage("load", load_model, args.baseline)
    opt = _stage("load", load_model, args.optimized)
    b = _stage("report", accounting.cost_report, base, resolution)
    o = _stage("report", accounting.cost_report, opt, resolution)
    red = _stage("report", accounting.reduction_report, b, o)
    emit({"baseline": b.to_dict(), "optimized": o.to_dict(), "reduction_pct": red},
         args.format or "text")
    return EXIT_OK


def cmd_ate(args) -> int:
    est = _stage("ate", read_tum, args.estimate)
    gt = _stage("ate", read_tum, args.groundtruth)
    print(f"{_stage('ate', ate_rmse, est, gt, args.mode):.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = _stage("verify", persistence.verify, args.model)
    print("ok" if ok else "output digest mismatch")
    return EXIT_OK if ok else EXIT_STAGE


COMMANDS = {
    "pipeline": cmd_pipeline,
    "analyze-sensitivity": cmd_analyze_sensitivity,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "quantize": cmd_quantize,
    "report": cmd_report,
    "ate": cmd_ate,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"spaq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailure as exc:
        print(f"spaq {args.command}: stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
