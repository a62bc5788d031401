import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spaq import accounting
from spaq.engine import forward
from spaq.finetune import FinetuneConfig, SyntheticTask
from spaq.metrics import synthetic_evaluator
from spaq.pruning import (DegenerateSensitivityError, InfeasibleBudgetError, PlanError, PruningPlan,
                          SensitivityProfile, StageError, allocate_budget, analyze_sensitivity,
                          apply_plan, check_schedule, filter_count, group_saliency, least_salient,
                          make_plan, probe_layer, prune_units, saliency, spaq_prune, unit_params)
from spaq.zoo import build_model

from conftest import Net, masked_forward, random_graph, random_inputs


def profile(F, S):
    names = [f"L{i}" for i in range(len(F))]
    return SensitivityProfile(dict(zip(names, S)), dict(zip(names, S)), dict(zip(names, F)), 0.1)


def chain(widths=(8, 8), seed=0, k=3, cin=2):
    net = Net(np.random.default_rng(seed))
    cur = net.input("x", cin)
    for i, w in enumerate(widths):
        cur = net.act(net.conv(cur, w, k=k, nid=f"conv{i + 1}"), "ReLU")
    out = net.conv(cur, 2, k=1, nid="head")
    return net.graph([out])


class CountingEvaluator:
    parallel_safe = True

    def __init__(self, task):
        self.inner = synthetic_evaluator(task)
        self.name = "counting"
        self.calls = 0

    def evaluate(self, graph):
        self.calls += 1
        return self.inner.evaluate(graph)


# --- saliency --------------------------------------------------------------

def test_saliency_is_l1_of_kernel():
    net = Net(np.random.default_rng(0))
    net.input("x", 1)
    g = net.graph([net.conv("x", 2, k=2, nid="c")])
    w = np.array([[[[1, -1], [2, 0]]], [[[0, 0], [0, 0]]]], np.float32)
    g = g.with_params({("c", "weight"): w})
    assert saliency(g, "c").tolist() == [4.0, 0.0]
    assert least_salient(saliency(g, "c"), 1).tolist() == [1]


def test_saliency_matches_brute_force(rng):
    g = chain((8,), seed=5)
    w = g["conv1"].params["weight"]
    brute = [sum(abs(float(v)) for v in w[o].ravel()) for o in range(8)]
    np.testing.assert_allclose(saliency(g, "conv1"), brute, rtol=1e-12)
    assert least_salient(saliency(g, "conv1"), 3).tolist() == sorted(np.argsort(brute, kind="stable")[:3].tolist())


def test_saliency_ties_go_to_lower_index():
    assert least_salient(np.array([1.0, 0.5, 0.5, 0.5]), 2).tolist() == [1, 2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100))
def test_saliency_scale_covariance(seed, c):
    g = chain((8,), seed=seed)
    s = saliency(g, "conv1")
    g2 = g.with_params({("conv1", "weight"): g["conv1"].params["weight"] * np.float32(c)})
    s2 = saliency(g2, "conv1")
    np.testing.assert_allclose(s2, s * c, rtol=1e-5)
    if len(np.unique(np.round(s, 4))) == len(s):
        assert least_salient(s2, 3).tolist() == least_salient(s, 3).tolist()


def test_saliency_rejects_non_conv():
    g = chain()
    with pytest.raises(ValueError):
        saliency(g, g.nodes[1].id)


# --- dependency analysis ---------------------------------------------------

def test_residual_adds_couple_producers():
    units = {u.name: u for u in prune_units(build_model("toy-residual"))}
    assert units["stem"].convs == ("stem", "block1.conv2") and units["stem"].coupled
    assert not units["block1.conv1"].coupled
    assert "head" not in units


def test_fixed_spaces_are_not_prunable():
    units = {u.name for u in prune_units(build_model("toy-gru"))}
    assert units == {"enc.0", "enc.1"}
    droid_units = {c for u in prune_units(build_model("droid")) for c in u.convs}
    for head in ("fnet.head", "cnet.head", "update.delta", "update.weight.2", "update.damping.1"):
        assert head not in droid_units


def test_coupled_group_saliency_is_summed():
    g = build_model("toy-residual")
    np.testing.assert_allclose(group_saliency(g, ["stem", "block1.conv2"]),
                               saliency(g, "stem") + saliency(g, "block1.conv2"))


# --- allocation ------------------------------------------------------------

def test_symmetric_allocation():
    plan = allocate_budget(profile([0.5, 0.5], [0.5, 0.5]), 0.2)
    assert plan.fractions == pytest.approx({"L0": 0.2, "L1": 0.2})


def test_allocation_closed_form():
    plan = allocate_budget(profile([0.75, 0.25], [0.2, 0.8]), 0.2)
    p = [plan.fractions["L0"], plan.fractions["L1"]]
    assert p == pytest.approx([0.2 * 0.2 / 0.35, 0.2 * 0.8 / 0.35], abs=1e-12)
    assert p == pytest.approx([0.1143, 0.4571], abs=1e-4)
    assert p[0] * 0.75 + p[1] * 0.25 == pytest.approx(0.2, abs=1e-12)


def test_inverse_weighting_favours_robust_layers():
    plan = allocate_budget(profile([0.5, 0.5], [0.2, 0.8]), 0.2, weighting="inverse")
    assert plan.fractions["L0"] > plan.fractions["L1"]
    assert 0.5 * sum(plan.fractions.values()) == pytest.approx(0.2)


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_global_rate_identity(data):
    n = data.draw(st.integers(2, 8))
    F = np.array(data.draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n)))
    S = np.array(data.draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n)))
    F, S = F / F.sum(), S / S.sum()
    pg = data.draw(st.floats(0.01, 0.5))
    plan = allocate_budget(profile(F, S), pg, p_max=1e9)
    assert sum(plan.fractions[f"L{i}"] * F[i] for i in range(n)) == pytest.approx(pg, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_clamped_allocation_respects_cap_and_budget(data):
    n = data.draw(st.integers(2, 8))
    F = np.array(data.draw(st.lists(st.floats(0.05, 1), min_size=n, max_size=n)))
    S = np.array(data.draw(st.lists(st.floats(0.0, 1), min_size=n, max_size=n))) + 1e-3
    F, S = F / F.sum(), S / S.sum()
    pg = data.draw(st.floats(0.05, 0.7))
    plan = allocate_budget(profile(F, S), pg)
    p = np.array([plan.fractions[f"L{i}"] for i in range(n)])
    assert np.all(p <= 0.8 + 1e-12)
    assert float(p @ F) == pytest.approx(pg, abs=1e-9)


def test_infeasible_budget():
    with pytest.raises(InfeasibleBudgetError):
        allocate_budget(profile([0.5, 0.5], [0.5, 0.5]), 0.9)


def test_degenerate_profile_falls_back_to_uniform():
    prof = SensitivityProfile({"a": 0.0, "b": 0.0}, {"a": 0.5, "b": 0.5}, {"a": 0.3, "b": 0.7}, 0.1,
                              degenerate=True)
    assert allocate_budget(prof, 0.2).fractions == {"a": 0.2, "b": 0.2}


def test_applied_plan_lands_within_one_filter():
    g = build_model("toy-residual", widths=(16, 32))
    units = prune_units(g)
    counts = unit_params(g, units)
    F = {u.name: counts[u.name] / sum(counts.values()) for u in units}
    prof = SensitivityProfile({k: 1.0 for k in F}, {k: 1 / len(F) for k in F}, F, 0.1)
    plan = make_plan(g, allocate_budget(prof, 0.3).fractions, 0.3, units)
    for u in units:
        assert abs(len(plan.indices[u.name]) - plan.fractions[u.name] * u.channels) <= 1


# --- surgery ---------------------------------------------------------------

def test_consumer_loses_matching_input_slices():
    g = chain((8, 8))
    plan = make_plan(g, {"conv1": 2 / 8})
    pruned = apply_plan(g, plan)
    assert pruned["conv1"].params["weight"].shape == (6, 2, 3, 3)
    assert pruned["conv2"].params["weight"].shape == (8, 6, 3, 3)
    assert pruned["conv1"].attrs["out_channels"] == 6 and pruned["conv2"].attrs["in_channels"] == 6
    # the input graph is untouched
    assert g["conv2"].params["weight"].shape == (8, 8, 3, 3)


def test_removing_dead_filters_is_exact():
    g = chain((8, 8), seed=2)
    w1 = g["conv1"].params["weight"].copy()
    b1 = g["conv1"].params["bias"].copy()
    w1[[1, 5]] = 0
    b1[[1, 5]] = 0
    w2 = g["conv2"].params["weight"].copy()
    w2[:, [1, 5]] = 0
    g = g.with_params({("conv1", "weight"): w1, ("conv1", "bias"): b1, ("conv2", "weight"): w2})
    plan = make_plan(g, {"conv1": 2 / 8})
    assert plan.indices["conv1"] == (1, 5)
    pruned = apply_plan(g, plan)
    x = random_inputs(g, resolution=(8, 8))
    a, b = forward(g, x)["head"], forward(pruned, x)["head"]
    # equal up to the BLAS summation order, which depends on the channel count
    np.testing.assert_allclose(a, b, rtol=4 * np.finfo(np.float32).eps, atol=0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_structural_pruning_equals_zero_masking(seed):
    g = random_graph(seed)
    rng = np.random.default_rng(seed)
    units = prune_units(g)
    fractions = {u.name: float(rng.uniform(0, 0.7)) for u in units}
    plan = make_plan(g, fractions, units=units)
    pruned = apply_plan(g, plan, units)
    x = random_inputs(g, seed)
    ref, out = masked_forward(g, plan, x), forward(pruned, x)
    for k in g.outputs:
        assert np.max(np.abs(ref[k] - out[k])) <= 1e-6


def test_plan_errors():
    g = chain((4, 4))
    with pytest.raises(PlanError):
        make_plan(g, {"head": 0.5})
    with pytest.raises(PlanError, match="all"):
        apply_plan(g, PruningPlan(0.1, {"conv1": 1.0}, {"conv1": (0, 1, 2, 3)}, {"conv1": ("conv1",)}))
    with pytest.raises(PlanError, match="out of range"):
        apply_plan(g, PruningPlan(0.1, {"conv1": 0.2}, {"conv1": (9,)}, {"conv1": ("conv1",)}))


def test_filter_count_rounding():
    assert filter_count(0.25, 8) == 2
    assert filter_count(0.0625, 8) == 1  # 0.5 rounds up
    assert filter_count(0.05, 8) == 0
    assert filter_count(0.99, 4) == 3  # at least one filter survives


def test_plan_round_trips_through_dict():
    g = build_model("toy-residual")
    plan = make_plan(g, {"stem": 0.5, "expand": 0.25}, 0.2)
    again = PruningPlan.from_dict(plan.to_dict())
    assert again == plan


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_surgery_output_validates_and_runs(seed):
    g = random_graph(seed)
    plan = make_plan(g, {u.name: 0.5 for u in prune_units(g)})
    pruned = apply_plan(g, plan)
    outs = forward(pruned, random_inputs(pruned, seed))
    assert all(np.isfinite(v).all() for v in outs.values())


# --- sensitivity -----------------------------------------------------------

def toy_task(g, seed=0):
    return SyntheticTask("teacher", seed, samples=4, resolution=(8, 8), teacher=g)


def test_noop_probe_returns_baseline_error():
    g = chain((8, 8))
    perturbed = g.with_params({("head", "bias"): g["head"].params["bias"] + 0.5})
    ev = synthetic_evaluator(toy_task(g))
    assert probe_layer(perturbed, "conv1", 0.01, ev) == ev.evaluate(perturbed)


def test_probe_of_dead_filters_keeps_baseline_error():
    g = chain((8, 8), seed=3)
    w = g["conv1"].params["weight"].copy()
    b = g["conv1"].params["bias"].copy()
    w[[0, 3]] = 0
    b[[0, 3]] = 0
    g = g.with_params({("conv1", "weight"): w, ("conv1", "bias"): b})
    ev = synthetic_evaluator(SyntheticTask("blur-flow", 0, samples=4, resolution=(8, 8)))
    assert abs(probe_layer(g, "conv1", 0.25, ev) - ev.evaluate(g)) <= 1e-6


def test_probe_matches_hand_built_pruned_model():
    g = chain((4, 4, 4), seed=7, k=3)
    ev = synthetic_evaluator(SyntheticTask("blur-flow", 1, samples=4, resolution=(8, 8)))
    for layer, nxt in (("conv1", "conv2"), ("conv2", "conv3"), ("conv3", "head")):
        w = g[layer].params["weight"]
        drop = np.argsort(np.abs(w).reshape(4, -1).sum(1), kind="stable")[:2]
        keep = np.setdiff1d(np.arange(4), drop)
        hand = g.replace(nodes=[
            n.replace(params={"weight": n.params["weight"][keep], "bias": n.params["bias"][keep]},
                      attrs={**n.attrs, "out_channels": 2}) if n.id == layer else
            n.replace(params={**n.params, "weight": n.params["weight"][:, keep]},
                      attrs={**n.attrs, "in_channels": 2}) if n.id == nxt else n
            for n in g.nodes])
        assert probe_layer(g, layer, 0.5, ev) == pytest.approx(ev.evaluate(hand), rel=1e-9)


class TableEvaluator:
    """Error determined by which conv lost filters."""
    parallel_safe = True
    name = "table"

    def __init__(self, table):
        self.table = table

    def evaluate(self, graph):
        for name, err in self.table.items():
            if graph[name].attrs["out_channels"] < 8:
                return err
        return 0.0


def test_relative_sensitivity_normalizes_errors():
    g = chain((8, 8, 8))
    prof = analyze_sensitivity(g, 0.25, TableEvaluator({"conv1": 1.0, "conv2": 1.0, "conv3": 2.0}))
    assert [prof.relative_sensitivity[k] for k in ("conv1", "conv2", "conv3")] == [0.25, 0.25, 0.5]
    assert sum(prof.relative_sensitivity.values()) == pytest.approx(1.0, abs=1e-12)
    assert sum(prof.parameter_fraction.values()) == pytest.approx(1.0, abs=1e-12)


def test_identical_layers_get_equal_sensitivity():
    net = Net(np.random.default_rng(0))
    x = net.input("x", 2)
    a = net.act(net.conv(x, 4, nid="a"), "ReLU")
    b = net.act(net.conv(x, 4, nid="b"), "ReLU")
    cat = net.concat(a, b)
    g = net.graph([net.conv(cat, 2, k=1, nid="head")])
    g = g.with_params({("b", "weight"): g["a"].params["weight"], ("b", "bias"): g["a"].params["bias"]})
    h = g["head"].params["weight"].copy()
    h[:, 4:] = h[:, :4]
    g = g.with_params({("head", "weight"): h})
    prof = analyze_sensitivity(g, 0.25, synthetic_evaluator(SyntheticTask("blur-flow", 0, 4, (8, 8))))
    assert prof.relative_sensitivity["a"] == pytest.approx(prof.relative_sensitivity["b"], abs=1e-9)


def test_degenerate_sensitivity():
    g = chain((8, 8))
    zero = TableEvaluator({})
    with pytest.raises(DegenerateSensitivityError):
        analyze_sensitivity(g, 0.25, zero)
    prof = analyze_sensitivity(g, 0.25, zero, strict=False)
    assert prof.degenerate and sum(prof.relative_sensitivity.values()) == pytest.approx(1.0)


def test_threaded_probes_match_serial():
    g = build_model("toy-residual")
    ev = synthetic_evaluator(toy_task(g))
    a = analyze_sensitivity(g, 0.3, ev)
    b = analyze_sensitivity(g, 0.3, ev, threads=4)
    assert a.induced_error == b.induced_error


def test_probes_leave_graph_untouched():
    g = build_model("toy-residual")
    before = {(n, p): v.copy() for n, p, v in g.parameters()}
    analyze_sensitivity(g, 0.5, synthetic_evaluator(toy_task(g)))
    for n, p, v in g.parameters():
        assert np.array_equal(before[(n, p)], v)


def test_profile_round_trips_through_dict():
    g = build_model("toy-residual")
    prof = analyze_sensitivity(g, 0.5, synthetic_evaluator(toy_task(g)), subtract_baseline=True)
    assert SensitivityProfile.from_dict(prof.to_dict()) == prof


# --- pipeline --------------------------------------------------------------

def test_zero_rate_only_finetunes():
    g = build_model("toy-residual")
    task = SyntheticTask("blur-flow", 0, 4, (8, 8))
    out, logs = spaq_prune(g, 0.0, synthetic_evaluator(task), task, finetune_cfg=FinetuneConfig(steps=0))
    assert logs == [] and out is g
    tuned, logs = spaq_prune(g, 0.0, synthetic_evaluator(task), task,
                             finetune_cfg=FinetuneConfig(steps=3, learning_rate=0.01))
    assert logs == []
    assert [n.params["weight"].shape for n in tuned.conv_nodes] == [n.params["weight"].shape for n in g.conv_nodes]
    assert not np.array_equal(tuned["stem"].params["weight"], g["stem"].params["weight"])


def test_default_schedule_runs_two_rounds():
    g = build_model("toy-residual", widths=(8, 16))
    task = SyntheticTask("blur-flow", 0, 4, (8, 8))
    ev = CountingEvaluator(task)
    n_units = len(prune_units(g))
    out, logs = spaq_prune(g, 0.2, ev, task, finetune_cfg=FinetuneConfig(steps=2, learning_rate=0.01))
    assert [s.cumulative_target for s in logs] == [0.1, 0.2]
    assert ev.calls == 2 * n_units
    assert all(len(s.loss_trace) == 2 for s in logs)


def test_pruned_parameter_count_hits_the_budget():
    g = build_model("toy-residual", widths=(16, 32))
    task = SyntheticTask("blur-flow", 0, 4, (8, 8))
    units = prune_units(g)
    budget = sum(unit_params(g, units).values())
    out, logs = spaq_prune(g, 0.2, synthetic_evaluator(task), task, finetune_cfg=FinetuneConfig(steps=0))
    removed = sum(accounting.count_params(g).values()) - sum(accounting.count_params(out).values())
    # one filter's worth of slack per unit, counting its consumers' input slices
    slack = sum(2 * unit_params(g, units)[u.name] / u.channels for u in units)
    assert abs(removed - 0.2 * budget) <= slack


def test_schedule_checks():
    assert check_schedule([0.1, 0.2], 0.2) == [0.1, 0.2]
    for bad in ([0.2, 0.1, 0.2], [0.1], [], [0.0, 0.2]):
        with pytest.raises(ValueError):
            check_schedule(bad, 0.2)
    with pytest.raises(ValueError):
        check_schedule([0.1], 0.0)


def test_stage_failures_are_tagged():
    class Broken:
        name = "broken"

        def evaluate(self, graph):
            raise RuntimeError("evaluator exploded")

    g = build_model("toy-residual")
    with pytest.raises(StageError) as info:
        spaq_prune(g, 0.2, Broken(), finetune_cfg=FinetuneConfig(steps=0))
    assert info.value.stage == 0
