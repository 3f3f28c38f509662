import numpy as np
import pytest

from vbp.data import Dataset, generate
from vbp.model import ModelSpec, BlockShape, MlpShape, init_weights, uniform_spec


def micro_spec(heads=2, dim=8, hid=6, tokens=3, classes=3, depth=2, patch=None):
    return uniform_spec(depth, dim, hid, heads, tokens, classes, patch)


def mlp_only_spec(d=4, h=5, tokens=1, classes=3, depth=1):
    block = BlockShape(d, 0, MlpShape(d, h, d))
    return ModelSpec((block,) * depth, tokens, classes)


def random_weights(spec, seed=0, std=0.3):
    """Init with non-trivial LN gains and biases so every parameter matters."""
    rng = np.random.default_rng(seed + 1000)
    w = init_weights(spec, seed, std=std)
    for k, v in w.items():
        if k.endswith((".gain", ".bias", "bqkv", "bproj", ".b1", ".b2")):
            w[k] = (v + 0.2 * rng.standard_normal(v.shape)).astype(np.float32)
    return w


@pytest.fixture
def toy():
    spec = uniform_spec(2, 16, 24, 2, 5, 3)
    weights = random_weights(spec, 3, std=0.2)
    data = generate(40, 5, 16, 3, seed=1, separation=4.0)
    return spec, weights, data


def rand_inputs(spec, n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, *spec.input_shape)).astype(np.float32)


def as_dataset(x, y=None, classes=None):
    return Dataset(x, y, classes)


# -- acceptance summary -----------------------------------------------------
# Acceptance tests are named test_cNN_<slug>; each records a "measured"
# property. One PASS/FAIL line per criterion is printed at the end.

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_c") or "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = dict(report.user_properties).get("measured", "")
        _CRITERIA[name] = (report.outcome, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, measured = _CRITERIA[name]
        num, slug = name[len("test_c"):].split("_", 1)
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {int(num):2d} {slug.replace('_', ' ')}: {measured}")
