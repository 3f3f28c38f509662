import numpy as np
import pytest

from conftest import micro_spec, rand_inputs, random_weights
from vbp.backprop import loss_and_grads
from vbp.data import Dataset, generate
from vbp.errors import NumericError, UsageError
from vbp.model import run, uniform_spec
from vbp.train import (AdamW, FinetuneConfig, cosine_lr, cross_entropy, evaluate, finetune, kd_loss,
                       kd_loss_and_grad, retention)


def central_diff(f, params, name, h=1e-3):
    p = params[name]
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + h
        up = f()
        p[i] = old - h
        down = f()
        p[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(g, fd, rtol):
    err = np.abs(g - fd)
    # near-zero entries are compared on the scale of the whole tensor
    scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-3 * np.abs(fd).max() + 1e-9)
    assert (err / scale).max() <= rtol, (err / scale).max()


@pytest.mark.parametrize("patch", [None, 3])
def test_backward_matches_finite_differences(patch):
    spec = micro_spec(heads=2, dim=8, hid=6, tokens=3, classes=3, patch=patch)
    params = {k: v.astype(np.float64) for k, v in random_weights(spec, 1, std=0.4).items()}
    x = rand_inputs(spec, 4, seed=2).astype(np.float64)
    y = np.array([0, 2, 1, 2])
    loss_fn = lambda z: cross_entropy(z, y)
    f = lambda: cross_entropy(run(spec, params, x), y)[0]
    _, _, grads = loss_and_grads(spec, params, x, loss_fn)
    assert set(grads) == set(params)
    for name in params:
        assert_grad_close(grads[name], central_diff(f, params, name), 1e-3)


def test_kd_gradient_and_boundaries():
    rng = np.random.default_rng(0)
    s, t = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    y = np.array([0, 1, 2, 1, 0])
    loss, g = kd_loss_and_grad(s, t, y, 0.6, 2.5)
    fd = np.zeros_like(s)
    h = 1e-5
    for i in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[i] += h
        sm[i] -= h
        fd[i] = (kd_loss(sp, t, y, 0.6, 2.5) - kd_loss(sm, t, y, 0.6, 2.5)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-10)
    assert kd_loss(s, t, y, 0.0) == pytest.approx(cross_entropy(s, y)[0])
    assert kd_loss(s, s, y, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_value():
    logits = np.log(np.array([[0.7, 0.2, 0.1]]))
    assert cross_entropy(logits, [0])[0] == pytest.approx(-np.log(0.7))


def test_cosine_endpoints():
    assert cosine_lr(0.1, 0, 50) == 0.1
    assert cosine_lr(0.1, 49, 50) <= 1e-3 * 0.1
    assert cosine_lr(0.1, 25, 51) == pytest.approx(0.05)


def test_adamw_decoupled_decay():
    p = {"w": np.array([1.0])}
    opt = AdamW(p, weight_decay=0.5)
    opt.step(p, {"w": np.array([0.0])}, lr=0.1)
    assert p["w"][0] == pytest.approx(0.95)


def test_evaluate_examples():
    spec = uniform_spec(1, 4, 3, 0, 1, 4)
    w = random_weights(spec)
    for k in w:
        w[k] = np.zeros_like(w[k])
    ds = generate(400, 1, 4, 4, seed=3)
    res = evaluate(spec, w, ds)  # uniform logits: argmax picks class 0
    assert abs(res["top1"] - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 400)
    assert res["loss"] == pytest.approx(np.log(4))
    # a head that copies a one-hot input feature of the label
    x = np.zeros((8, 1, 4), np.float32)
    y = np.arange(8) % 4
    x[np.arange(8), 0, y] = 10.0
    w["norm.gain"][:] = 1.0
    w["head.weight"][:] = np.eye(4)
    assert evaluate(spec, w, Dataset(x, y, 4))["top1"] == 1.0
    assert retention(0.45, 0.9) == 0.5
    with pytest.raises(UsageError):
        evaluate(spec, w, Dataset(np.zeros((0, 1, 4)), np.zeros(0, int), 4))
    with pytest.raises(UsageError):
        evaluate(spec, w, Dataset(x))
    w["head.bias"][0] = np.nan
    with pytest.raises(NumericError):
        evaluate(spec, w, Dataset(x, y, 4))


def test_config_validation():
    for bad in (dict(epochs=0), dict(alpha=1.5), dict(temperature=0), dict(lr=-1)):
        with pytest.raises(UsageError):
            FinetuneConfig(**bad)


def test_lr_zero_leaves_weights_unchanged():
    spec = micro_spec()
    w = random_weights(spec)
    ds = Dataset(rand_inputs(spec, 16), np.arange(16) % 3, 3)
    out, log = finetune(spec, w, ds, FinetuneConfig(epochs=2, lr=0.0, kd=False))
    assert all(out[k].tobytes() == w[k].tobytes() for k in w)
    assert len(log) == 2


def test_training_loss_decreases_and_is_deterministic():
    spec = uniform_spec(1, 8, 16, 2, 2, 2)
    w = random_weights(spec, 0, std=0.1)
    ds = generate(128, 2, 8, 2, seed=0, separation=4.0)
    cfg = FinetuneConfig(epochs=4, lr=3e-3, kd=False, seed=1)
    out, log = finetune(spec, w, ds, cfg)
    losses = [r[2] for r in log]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    out2, log2 = finetune(spec, w, ds, cfg)
    assert [r[:4] for r in log] == [r[:4] for r in log2]
    assert all(out[k].tobytes() == out2[k].tobytes() for k in out)
    assert log[0][1] == 3e-3


def test_kd_finetune_and_teacher_checks():
    spec = micro_spec()
    w = random_weights(spec)
    ds = Dataset(rand_inputs(spec, 12), np.arange(12) % 3, 3)
    out, log = finetune(spec, w, ds, FinetuneConfig(epochs=1, kd=True), teacher=(spec, w))
    assert len(log) == 1
    wrong = micro_spec(classes=4)
    with pytest.raises(UsageError):
        finetune(spec, w, ds, FinetuneConfig(epochs=1), teacher=(wrong, random_weights(wrong)))
