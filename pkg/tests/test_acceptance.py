"""End-to-end acceptance checks; each records one PASS/FAIL line for the run summary."""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import conftest
from conftest import masked_forward, random_graph, random_inputs
from spaq import accounting, persistence
from spaq.cli import PipelineConfig, run_pipeline
from spaq.engine import GradientTape, backward, forward
from spaq.finetune import FinetuneConfig, SyntheticTask, finetune, task_loss
from spaq.metrics import Trajectory, ate_rmse, read_tum, synthetic_evaluator, write_tum
from spaq.pruning import (SensitivityProfile, allocate_budget, analyze_sensitivity, apply_plan, make_plan,
                          prune_units, spaq_prune, unit_params)
from spaq.quantize import (CalibrationSet, calibrate, error_bound, integer_purity, quantize_graph,
                           quantized_forward, weight_record)
from spaq.zoo import build_model

from test_tensor_nn import every_kind_graph, numeric_grad

DESK_STEPS = 20
RUN_LIMIT_S = 300.0


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def trio_runs(tmp_path_factory):
    runs = {}
    for rate in (0.10, 0.20):
        cfg = PipelineConfig(model="droid", global_rate=rate, steps=DESK_STEPS,
                             out=str(tmp_path_factory.mktemp(f"droid{int(rate * 100)}")))
        t0 = time.perf_counter()
        report = run_pipeline(cfg)
        runs[rate] = (report, time.perf_counter() - t0)
    return runs


def test_criterion_1_size_reduction(trio_runs):
    checks, parts = [], []
    for rate, target in ((0.10, 76.3), (0.20, 79.8)):
        report, seconds = trio_runs[rate]
        got = report["size_reduction_pct"]
        checks += [abs(got - target) <= 3.0, seconds < RUN_LIMIT_S]
        parts.append(f"P_g={rate:.2f}: size -{got:.2f}% (target {target}±3) in {seconds:.0f}s")
    record(1, all(checks), "; ".join(parts))


def test_criterion_2_flops_reduction(trio_runs):
    checks, parts = [], []
    for rate, target in ((0.10, 9.44), (0.20, 18.90)):
        got = trio_runs[rate][0]["flops_reduction_pct"]
        checks.append(abs(got - target) <= 3.0)
        parts.append(f"P_g={rate:.2f}: FLOPs -{got:.2f}% (target {target}±3)")
    record(2, all(checks), "; ".join(parts))


def test_criterion_3_architecture_accounting():
    counts = {name: build_model(name).conv_count for name in ("fnet", "cnet", "updatenet")}
    trio = build_model("droid")
    total = sum(accounting.count_params(trio).values())
    conv = sum(accounting.conv_params(trio).values())
    share = conv / total
    ok = counts == {"fnet": 18, "cnet": 18, "updatenet": 19} and abs(total - 4.00e6) <= 0.2 * 4.00e6 \
        and share >= 0.95
    record(3, ok, f"convs {counts}, params {total:,} (4.00M±20%), conv share {100 * share:.2f}%")


def test_criterion_4_global_rate_identity():
    rng = np.random.default_rng(4)
    worst, worst_filter = 0.0, 0.0
    g = build_model("toy-residual", widths=(16, 32))
    units = prune_units(g)
    counts = unit_params(g, units)
    Fg = {u.name: counts[u.name] / sum(counts.values()) for u in units}
    for _ in range(100):
        n = int(rng.integers(2, 10))
        names = [f"L{i}" for i in range(n)]
        F = rng.uniform(0.01, 1, n)
        S = rng.uniform(0.01, 1, n)
        F, S = F / F.sum(), S / S.sum()
        pg = float(rng.uniform(0.01, 0.5))
        prof = SensitivityProfile(dict(zip(names, S)), dict(zip(names, S)), dict(zip(names, F)), 0.1)
        plan = allocate_budget(prof, pg, p_max=1e9)
        worst = max(worst, abs(sum(plan.fractions[k] * f for k, f in zip(names, F)) - pg))

        Sg = rng.uniform(0.01, 1, len(units))
        Sg = dict(zip(Fg, Sg / Sg.sum()))
        pg = float(rng.uniform(0.05, 0.5))
        fractions = allocate_budget(SensitivityProfile(Sg, Sg, Fg, 0.1), pg).fractions
        worst = max(worst, abs(sum(fractions[k] * Fg[k] for k in Fg) - pg))
        applied = make_plan(g, fractions, pg, units)
        for u in units:
            worst_filter = max(worst_filter, abs(len(applied.indices[u.name]) - fractions[u.name] * u.channels))
    record(4, worst <= 1e-9 and worst_filter <= 1,
           f"max |sum p*F - P_g| = {worst:.2e} over 200 triples; max filter miss {worst_filter:.3f}")


def test_criterion_5_pruning_oracle():
    worst = 0.0
    for seed in range(100):
        g = random_graph(seed)
        rng = np.random.default_rng(seed)
        units = prune_units(g)
        plan = make_plan(g, {u.name: float(rng.uniform(0, 0.7)) for u in units}, units=units)
        x = random_inputs(g, seed)
        ref, out = masked_forward(g, plan, x), forward(apply_plan(g, plan, units), x)
        worst = max(worst, max(float(np.max(np.abs(ref[k] - out[k]))) for k in g.outputs))
    record(5, worst <= 1e-6, f"max deviation {worst:.2e} over 100 random graphs (limit 1e-6)")


def test_criterion_6_gradients():
    g = every_kind_graph()
    inputs = {"x": np.random.default_rng(1).standard_normal((2, 2, 8, 8)),
              "h": np.random.default_rng(2).standard_normal((2, 3, 4, 4))}
    outs = forward(g, inputs)
    rng = np.random.default_rng(3)
    weights = {k: rng.standard_normal(v.shape) for k, v in outs.items()}
    tape = GradientTape()
    forward(g, inputs, tape)
    grads = backward(tape, weights)
    worst, kinds = 0.0, set()
    for node_id, pname, _ in g.parameters():
        idx, num = numeric_grad(g, inputs, (node_id, pname), weights)
        ana = grads[(node_id, pname)].reshape(-1)[idx]
        err = np.max(np.abs(ana - num)) / max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-6)
        worst = max(worst, float(err))
        kinds.add(g[node_id].kind)
    ok = worst < 1e-4 and kinds == {"Conv2d", "InstanceNorm", "ConvGRUCell"}
    record(6, ok, f"max relative error {worst:.2e} across {sorted(kinds)} (limit 1e-4)")


def test_criterion_7_quantization_bounds():
    fnet = build_model("fnet", seed=7)
    weight_ok = True
    for node in fnet.conv_nodes:
        w = node.params["weight"]
        rec = weight_record(w)
        err = np.abs(rec.dequantize(rec.quantize(w, axis=0), axis=0).astype(np.float64) - w)
        half = rec.scale.astype(np.float64)[:, None, None, None] / 2
        weight_ok &= bool(np.all(err <= half + np.finfo(np.float32).eps * np.abs(w)))

    within, tightest = 0, 0.0
    for seed in range(50):
        g = random_graph(seed, norm=False, gru=False)
        calib = CalibrationSet.synthetic(g, 4, seed, (6, 6))
        q = quantize_graph(g, calibrate(g, calib))
        bound = error_bound(g, q)
        ok = True
        for batch in calib.batches:
            qo, fo = quantized_forward(q, batch), forward(g, batch)
            for k in g.outputs:
                e = float(np.max(np.abs(qo[k] - fo[k])))
                ok &= e <= bound[k]
                tightest = max(tightest, e / bound[k])
        within += ok

    small = build_model("fnet")
    cal = CalibrationSet.synthetic(small, 2, 0, (16, 16))
    qf = quantize_graph(small, calibrate(small, cal))
    with integer_purity() as stats:
        quantized_forward(qf, cal.batches[0])
    ok = weight_ok and within == 50 and stats.float_operands == 0 and stats.accumulations > 0
    record(7, ok, f"weight round trip {'ok' if weight_ok else 'violated'}; {within}/50 nets within bound "
                  f"(max error/bound {tightest:.2e}); fp operands {stats.float_operands} in "
                  f"{stats.accumulations} accumulations")


def test_criterion_8_finetune_recovery():
    wins = 0
    for seed in range(100):
        model = build_model("toy-residual", seed=seed)
        task = SyntheticTask("blur-flow", seed=seed, samples=16, resolution=(8, 8))
        model, _ = finetune(model, task, FinetuneConfig(steps=100, learning_rate=0.05, seed=seed))
        pruned, _ = spaq_prune(model, 0.2, synthetic_evaluator(task), task, finetune_cfg=FinetuneConfig(steps=0))
        before = task_loss(pruned, task)
        tuned, _ = finetune(pruned, task, FinetuneConfig(steps=50, learning_rate=0.05, seed=seed))
        wins += task_loss(tuned, task) < before
    record(8, wins >= 95, f"post-finetune loss below post-pruning loss in {wins}/100 seeds (need 95)")


def test_criterion_9_sensitivity_stability():
    g = build_model("fnet")
    ev = synthetic_evaluator(SyntheticTask("teacher", seed=0, samples=8, resolution=(32, 32), teacher=g))
    a = analyze_sensitivity(g, 0.1, ev)
    b = analyze_sensitivity(g, 0.2, ev)
    rho = spearmanr([a.relative_sensitivity[k] for k in a.layers],
                    [b.relative_sensitivity[k] for k in a.layers]).statistic
    record(9, rho > 0.5, f"Spearman rho(S@0.1, S@0.2) on fnet = {rho:.3f} (need > 0.5)")


def test_criterion_10_ate(tmp_path):
    rng = np.random.default_rng(10)

    def traj(p):
        return Trajectory(0.1 * np.arange(len(p)), np.asarray(p, float), None)

    gt = rng.standard_normal((30, 3))
    identical = ate_rmse(traj(gt), traj(gt))

    worst = 0.0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        q *= np.sign(np.linalg.det(q))
        est = gt + 0.05 * rng.standard_normal(gt.shape)
        moved = est @ q.T + 10 * rng.standard_normal(3)
        worst = max(worst, abs(ate_rmse(traj(est), traj(gt), "rigid") - ate_rmse(traj(moved), traj(gt), "rigid")))

    corners = np.array([[0, 0, 0], [4, 0, 0], [0, 4, 0], [4, 4, 0]], float)
    radial = corners - corners.mean(axis=0)
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    offsets = np.array([0.01, 0.02, 0.02, 0.01])
    hand = np.sqrt(np.mean(offsets ** 2))
    four = ate_rmse(traj(corners + offsets[:, None] * radial), traj(corners), "rigid")

    n = 25
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    t = Trajectory(1e9 + np.cumsum(rng.uniform(0.01, 0.1, n)), 100 * rng.standard_normal((n, 3)), quats)
    write_tum(t, tmp_path / "a.txt")
    back = read_tum(tmp_path / "a.txt")
    write_tum(back, tmp_path / "b.txt")
    exact = all(np.array_equal(x, y) for x, y in ((t.timestamps, back.timestamps), (t.positions, back.positions),
                                                 (t.orientations, back.orientations)))
    exact &= (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    ok = identical < 1e-12 and worst < 1e-9 and abs(four - hand) < 1e-6 and exact
    record(10, ok, f"identical {identical:.1e}; rigid invariance {worst:.1e}; 4-point {four:.6f} vs "
                   f"{hand:.6f}; TUM round trip {'exact' if exact else 'inexact'}")


def test_criterion_11_persistence(tmp_path):
    failures = []
    names = ["fnet", "cnet", "updatenet", "droid", "toy-residual", "toy-gru"]
    for name in names:
        g = build_model(name)
        calib = CalibrationSet.synthetic(g, 2, 0, (16, 16))
        for state, graph in (("fp32", g), ("int8", quantize_graph(g, calibrate(g, calib)))):
            path = tmp_path / f"{name}-{state}.spaq"
            written = persistence.save(graph, path)
            back = persistence.load(path)
            on_disk = path.stat().st_size
            if not persistence.graphs_equal(graph, back):
                failures.append(f"{name}/{state} not bit-exact")
            if not written == on_disk == sum(accounting.serialized_size(graph).values()):
                failures.append(f"{name}/{state} size mismatch")
    record(11, not failures, f"{2 * len(names)} model files bit-exact with exact sizes"
           if not failures else "; ".join(failures))
