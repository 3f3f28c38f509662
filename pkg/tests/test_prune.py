import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import random_weights
from vbp.data import Dataset, generate
from vbp.errors import IntegrityError, UsageError
from vbp.model import uniform_spec
from vbp.prune import (NeuronScore, PruningPlan, global_select, make_plan, plan_summary, score_magnitude,
                       score_random, score_snip, score_variance)
from vbp.stats import LayerStats, StatsReport, collect


def scores_from(per_layer):
    return [NeuronScore(l, i, float(s)) for l, row in enumerate(per_layer) for i, s in enumerate(row)]


def fake_report(variances, fp="0" * 16):
    return StatsReport("post", fp, [LayerStats(f"block.{i}.mlp", 10, np.zeros(len(v)), np.asarray(v, float))
                                    for i, v in enumerate(variances)])


def test_score_variance_identity():
    s = score_variance(fake_report([[0.1, 5.0, 0.0, 2.0]]))
    assert [x.score for x in s] == [0.1, 5.0, 0.0, 2.0]


def test_score_variance_layer_mismatch():
    spec = uniform_spec(2, 4, 3, 0, 1, 2)
    with pytest.raises(IntegrityError):
        score_variance(fake_report([[1, 2, 3]]), spec)
    with pytest.raises(IntegrityError):
        score_variance(fake_report([[1, 2, 3], [1, 2]]), spec)


def test_zero_variance_selected_first():
    plan = global_select(score_variance(fake_report([[3.0, 0.0, 1.0], [2.0, 4.0, 5.0]])), 0.2)
    assert plan.layers == [[1], []]


def test_select_examples():
    assert global_select(scores_from([[0.5, 0.1], [0.3, 0.0]]), 0.5).layers == [[1], [1]]
    plan = global_select(scores_from([[1.0] * 4, [1.0] * 4]), 0.25)
    assert plan.layers == [[0, 1], []]
    plan = global_select(scores_from([[0.0, 0.0], [1.0] * 8]), 0.9)
    assert len(plan.layers[0]) == 1 and plan.total == 8 and plan.guarded == [0, 1]  # only 1 + 7 prunable


def test_select_rate_errors_and_empty(caplog):
    s = scores_from([[1.0, 2.0]])
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(UsageError):
            global_select(s, p)
    with caplog.at_level("WARNING"):
        plan = global_select(s, 0.3)
    assert plan.total == 0 and "selects nothing" in caplog.text
    with pytest.raises(UsageError):
        global_select(s, 0.5, min_keep=0)


def test_floor_budget_exact():
    s = scores_from([list(np.arange(100.0))])
    assert global_select(s, 0.29).total == 29
    assert global_select(s, 0.299).total == 29


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1e3), min_size=2, max_size=20), min_size=1, max_size=4),
       st.floats(0.01, 0.99))
def test_select_invariants(per_layer, rate):
    s = scores_from(per_layer)
    plan = global_select(s, rate)
    total = sum(map(len, per_layer))
    k = int(np.floor(round(rate * total, 9)))
    prunable = sum(len(l) - 1 for l in per_layer)
    assert plan.total == min(k, prunable)
    for idx, row in zip(plan.layers, per_layer):
        assert idx == sorted(set(idx)) and len(row) - len(idx) >= 1
    # strictly increasing transforms keep the plan; sqrt only when it stays
    # strictly increasing in floating point
    t = [NeuronScore(x.layer, x.neuron, 4.0 * x.score) for x in s]
    assert global_select(t, rate).layers == plan.layers
    raw = [x.score for x in s]
    assume(len(set(np.sqrt(raw))) == len(set(raw)))
    t = [NeuronScore(x.layer, x.neuron, float(np.sqrt(x.score))) for x in s]
    assert global_select(t, rate).layers == plan.layers


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=10, max_size=40), st.floats(0.05, 0.5), st.floats(0.5, 0.95))
def test_plans_nest(scores, p1, p2):
    s = scores_from([scores[: len(scores) // 2], scores[len(scores) // 2:]])
    a, b = global_select(s, p1), global_select(s, p2)
    if not (a.guarded or b.guarded):
        assert all(set(x) <= set(y) for x, y in zip(a.layers, b.layers))


def test_magnitude_scores():
    spec = uniform_spec(1, 2, 3, 0, 1, 2)
    w = random_weights(spec)
    w["block.0.mlp.w1"][:] = [[0, 0], [3, -4], [1, 1]]
    w["block.0.mlp.b1"][:] = [0, 0, -2]
    assert [s.score for s in score_magnitude(spec, w)] == [0.0, 7.0, 4.0]
    doubled = {k: v * 2 for k, v in w.items()}
    assert [s.score for s in score_magnitude(spec, doubled)] == [0.0, 14.0, 8.0]
    s1 = global_select(score_magnitude(spec, w), 0.5)
    assert s1.layers == global_select(score_magnitude(spec, doubled), 0.5).layers


def test_snip_scores():
    spec = uniform_spec(2, 4, 5, 2, 3, 3)
    w = random_weights(spec, 1)
    w["block.0.mlp.w1"][3] = 0.0
    w["block.0.mlp.b1"][3] = 0.0
    ds = generate(16, 3, 4, 3, seed=0)
    s = score_snip(spec, w, ds, batches=2, batch_size=8)
    assert s[3].score == 0.0 and all(x.score >= 0 for x in s) and max(x.score for x in s) > 0
    frozen = dict(w, **{"head.weight": np.zeros_like(w["head.weight"])})
    assert all(x.score == 0 for x in score_snip(spec, frozen, ds))
    with pytest.raises(UsageError):
        score_snip(spec, w, Dataset(ds.x))


def test_random_scores_seeded():
    spec = uniform_spec(2, 4, 50, 0, 1, 2)
    a = [x.score for x in score_random(spec, 1)]
    assert a == [x.score for x in score_random(spec, 1)] and a != [x.score for x in score_random(spec, 2)]


def test_random_fractions_near_rate():
    spec = uniform_spec(4, 4, 200, 0, 1, 2)
    fr = np.array([[r[3] for r in plan_summary(global_select(score_random(spec, s), 0.3), spec)]
                   for s in range(10)])
    # binomial-ish noise on 200 neurons per layer
    assert abs(fr.mean() - 0.3) < 0.01 and np.abs(fr - 0.3).max() < 0.15


def test_plan_summary_examples():
    spec = uniform_spec(2, 4, 5, 0, 1, 2)
    assert [r[2] for r in plan_summary(PruningPlan([[], []], "variance", 0.1), spec)] == [0, 0]
    one = uniform_spec(1, 4, 10, 0, 1, 2)
    plan = global_select(score_random(one), 0.4)
    assert plan_summary(plan, one) == [[0, 10, 4, 0.4]]


def test_make_plan_provenance_and_file(tmp_path):
    spec = uniform_spec(2, 8, 6, 2, 4, 3)
    w = random_weights(spec)
    ds = generate(20, 4, 8, 3)
    report = collect(spec, w, ds)
    plan = make_plan(spec, w, 0.5, "variance", report=report)
    assert plan.tap == "post" and plan.stats_fingerprint == report.fingerprint and plan.seed is None
    path = tmp_path / "plan.json"
    fp = plan.save(path)
    back = PruningPlan.load(path)
    assert back.to_bytes() == path.read_bytes() and back.fingerprint == fp
    assert make_plan(spec, w, 0.5, "variance", report=report).to_bytes() == plan.to_bytes()
    rnd = make_plan(spec, w, 0.5, "random", seed=4)
    assert rnd.seed == 4 and '"seed":4' in rnd.to_bytes().decode()
    other = random_weights(spec, 9)
    with pytest.raises(IntegrityError):
        make_plan(spec, other, 0.5, "variance", report=report)
    with pytest.raises(UsageError):
        make_plan(spec, w, 0.5, "variance")
    with pytest.raises(UsageError):
        make_plan(spec, w, 0.5, "entropy")
