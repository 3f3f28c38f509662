import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rand_inputs, random_weights
from vbp.data import Dataset
from vbp.errors import DimensionError, FormatError, InsufficientSamplesError, UsageError
from vbp.model import MlpShape, forward_mlp, uniform_spec
from vbp.stats import (StatsReport, WelfordAccumulator, collect, collect_both, export_histograms, merge,
                       record_activations)
from vbp.tensor import gelu


def two_pass(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.sum(axis=0) / len(x)
    return m, ((x - m) ** 2).sum(axis=0) / (len(x) - 1)


def stream(rows, width=None):
    rows = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    acc = WelfordAccumulator(width or rows.shape[1])
    for r in rows:
        acc.update(r)
    return acc


def test_hand_examples():
    acc = stream([1.0, 2.0, 3.0])
    assert acc.mean[0] == 2.0 and acc.m2[0] == 2.0
    assert acc.finalize()[1][0] == 1.0
    acc = stream([5.0] * 4)
    assert acc.mean[0] == 5.0 and acc.m2[0] == 0.0


def test_finalize_needs_two():
    with pytest.raises(InsufficientSamplesError):
        stream([1.0]).finalize()


def test_width_mismatch():
    with pytest.raises(DimensionError):
        WelfordAccumulator(3).update(np.zeros(2))
    with pytest.raises(DimensionError):
        WelfordAccumulator(3).merge(WelfordAccumulator(2))


def test_large_mean_matches_two_pass():
    x = 1e6 + np.random.default_rng(0).standard_normal((10_000, 3))
    mean, var = stream(x).finalize()
    m_ref, v_ref = two_pass(x)
    np.testing.assert_allclose(mean, m_ref, rtol=1e-12)
    np.testing.assert_allclose(var, v_ref, rtol=1e-9)


def test_merge_examples():
    m = merge(stream([1.0, 2.0]), stream([3.0]))
    assert m.count == 3 and m.mean[0] == 2.0 and m.m2[0] == pytest.approx(2.0)
    a = stream([1.0, 4.0, 9.0])
    e = merge(a, WelfordAccumulator(1))
    assert e.count == 3 and e.mean[0] == a.mean[0] and e.m2[0] == a.m2[0]
    e = merge(WelfordAccumulator(1), a)
    assert e.count == 3 and e.m2[0] == a.m2[0]


def test_merge_random_split_matches_stream():
    rng = np.random.default_rng(1)
    x = 1e6 + rng.standard_normal((10_000, 4))
    mask = rng.random(10_000) < 0.5
    full = stream(x).finalize()[1]
    merged = merge(stream(x[mask]), stream(x[~mask])).finalize()[1]
    np.testing.assert_allclose(merged, full, rtol=1e-9)


def test_batch_update_matches_row_update():
    x = np.random.default_rng(2).standard_normal((300, 5)) * 3 + 100
    acc = WelfordAccumulator(5)
    for s in range(0, 300, 37):
        acc.update_batch(x[s:s + 37])
    ref = stream(x)
    np.testing.assert_allclose(acc.mean, ref.mean, rtol=1e-12)
    np.testing.assert_allclose(acc.m2, ref.m2, rtol=1e-10)


shards = st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(shards)
def test_merge_commutative_associative(parts):
    a, b, c = (stream(p) for p in parts)
    ref = stream(sum(parts, []))
    for m in (merge(merge(a, b), c), merge(a, merge(b, c)), merge(merge(c, a), b)):
        assert m.count == ref.count
        np.testing.assert_allclose(m.mean, ref.mean, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(m.m2, ref.m2, rtol=1e-9, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=200), st.integers(0, 2**32 - 1))
def test_order_invariance(values, seed):
    v = np.array(values)
    shuffled = np.random.default_rng(seed).permutation(v)
    a = stream(np.sort(v)).finalize()[1]
    b = stream(shuffled).finalize()[1]
    np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_pre_activation_variance_scales_quadratically(alpha, seed):
    rng = np.random.default_rng(seed)
    w1, b1 = rng.standard_normal((6, 4)), rng.standard_normal(6)
    w2, b2 = rng.standard_normal((4, 6)), rng.standard_normal(4)
    x = rng.standard_normal((50, 4))
    accs = []
    for scale in (1.0, alpha):
        acc = WelfordAccumulator(6)
        forward_mlp(MlpShape(4, 6, 4), w1, b1, w2, b2, x * scale, tap=lambda pre, post: acc.update_batch(pre))
        accs.append(acc.finalize()[1])
    np.testing.assert_allclose(accs[1], alpha ** 2 * accs[0], rtol=1e-6)


# -- collection -------------------------------------------------------------

def _zero_fan_in(spec, seed=0, c=0.7):
    w = random_weights(spec, seed)
    w["block.0.mlp.w1"][2] = 0.0
    w["block.0.mlp.b1"][2] = c
    return w


def test_collect_constant_neuron():
    spec = uniform_spec(2, 8, 6, 2, 8, 3)
    w = _zero_fan_in(spec)
    ds = Dataset(rand_inputs(spec, 64))
    both = collect_both(spec, w, ds)
    post, pre = both["post"].layers[0], both["pre"].layers[0]
    assert post.mean[2] == pytest.approx(float(gelu(np.float64(np.float32(0.7)))), abs=1e-12)
    assert post.variance[2] == 0.0 and pre.variance[2] == 0.0
    assert pre.mean[2] == pytest.approx(0.7, abs=1e-7)
    assert all(l.count == 512 for l in both["post"].layers)


def test_collect_deterministic_and_batch_independent():
    spec = uniform_spec(2, 8, 6, 2, 4, 3)
    w = random_weights(spec)
    ds = Dataset(rand_inputs(spec, 50))
    a = collect(spec, w, ds, "post", batch_size=7)
    b = collect(spec, w, ds, "post", batch_size=50)
    assert a.to_bytes() == collect(spec, w, ds, "post", batch_size=7).to_bytes()
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_allclose(la.variance, lb.variance, rtol=1e-10)


def test_collect_errors():
    spec = uniform_spec(1, 8, 6, 2, 4, 3)
    w = random_weights(spec)
    with pytest.raises(InsufficientSamplesError):
        collect(spec, w, Dataset(np.zeros((0, 4, 8))))
    with pytest.raises(DimensionError):
        collect(spec, w, Dataset(np.zeros((3, 4, 7))))
    with pytest.raises(UsageError):
        collect(spec, w, Dataset(np.zeros((3, 4, 8))), tap="mid")


def test_stats_file_round_trip(tmp_path):
    spec = uniform_spec(2, 8, 6, 2, 4, 3)
    report = collect(spec, random_weights(spec), Dataset(rand_inputs(spec, 20)))
    path = tmp_path / "s.json"
    fp = report.save(path)
    back = StatsReport.load(path)
    assert back.to_bytes() == path.read_bytes() and back.fingerprint == fp
    for a, b in zip(report.layers, back.layers):
        assert a.mean.tobytes() == b.mean.tobytes() and a.variance.tobytes() == b.variance.tobytes()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        StatsReport.load(tmp_path / "bad.json")


def test_reconstruction_error_identity():
    spec = uniform_spec(2, 8, 10, 2, 4, 3)
    w = random_weights(spec, 4)
    ds = Dataset(rand_inputs(spec, 30))
    report = collect(spec, w, ds, batch_size=7)
    rec = record_activations(spec, w, ds, [0, 1])
    for i, layer in enumerate(report.layers):
        post = rec[i][1]
        n = post.shape[0]
        mse = ((post - layer.mean) ** 2).sum(axis=0) / (n - 1)
        np.testing.assert_allclose(mse, layer.variance, rtol=1e-6)


# -- histograms -------------------------------------------------------------

def _recorded(pre):
    pre = np.asarray(pre, dtype=np.float64).reshape(len(pre), -1)
    return {0: (pre, gelu(pre))}


def test_histograms_share_edges_and_sum():
    rec = _recorded(np.random.default_rng(0).standard_normal((500, 3)) * 2)
    rows = export_histograms(rec, [(0, 0), (0, 2)], bins=12)
    for n in (0, 2):
        pre = [r for r in rows if r[1] == n and r[2] == "pre"]
        post = [r for r in rows if r[1] == n and r[2] == "post"]
        assert [r[4:6] for r in pre] == [r[4:6] for r in post]
        assert sum(r[6] for r in pre) == 500 and sum(r[6] for r in post) == 500


def test_histogram_constant_neuron_single_bin():
    rows = export_histograms(_recorded(np.full((40, 1), 1.5)), [(0, 0)], bins=10)
    post = [r[6] for r in rows if r[2] == "post"]
    assert sorted(post)[-1] == 40 and sum(1 for c in post if c) == 1


def test_histogram_one_bin():
    rows = export_histograms(_recorded(np.random.default_rng(1).standard_normal((33, 1))), [(0, 0)], bins=1)
    assert [r[6] for r in rows] == [33, 33]


def test_histogram_fixed_range_clips():
    rows = export_histograms(_recorded(np.linspace(-5, 5, 100)), [(0, 0)], bins=4, value_range=(-1, 1))
    assert sum(r[6] for r in rows if r[2] == "pre") == 100


def test_gelu_mass_below_minus_point_two():
    pre = np.random.default_rng(2).standard_normal((200_000, 1))
    rows = export_histograms(_recorded(pre), [(0, 0)], bins=200, value_range=(-4, 4))
    post = [r for r in rows if r[2] == "post"]
    below = sum(r[6] for r in post if r[5] <= -0.2)
    assert below / 200_000 < 1e-3
    assert float(gelu(pre).min()) > -0.2


def test_histogram_errors():
    with pytest.raises(UsageError):
        export_histograms(_recorded(np.zeros((3, 1))), [])
    with pytest.raises(UsageError):
        export_histograms(_recorded(np.zeros((3, 1))), [(0, 5)])
