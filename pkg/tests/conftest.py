import numpy as np
import pytest

from n2nsdf import diffkit as dk
from n2nsdf.field import MlpConfig, init_field, record_field
from n2nsdf.training import Adam


def pytest_addoption(parser):
    parser.addoption("--pu-input", action="store", default=None,
                     help="directory with the PU denoising test set (noisy/ and clean/ .xyz files)")


def fit_to_sdf(sdf_fn, hidden_layers=2, width=32, steps=1500, seed=0, radius=0.5, beta=10.0):
    """Regress a small float64 field onto an analytic SDF and its gradient over [-1.1, 1.1]^3."""
    params = init_field(MlpConfig(hidden_layers=hidden_layers, width=width, beta=beta, geometric_init_radius=radius),
                        seed=seed, dtype=np.float64)
    opt = Adam(params, {k: 3e-3 for k in params.arrays})
    rng = np.random.default_rng(seed)
    for it in range(steps):
        q = rng.uniform(-1.1, 1.1, size=(512, 3))
        g_true = np.stack([(sdf_fn(q + h) - sdf_fn(q - h)) / 2e-6 for h in np.eye(3) * 1e-6], axis=1)
        tape = dk.Tape()
        d, g = record_field(tape, params, q)
        loss = dk.mean(dk.square(d - sdf_fn(q))) + 0.1 * dk.mean(dk.sum(dk.square(g - g_true), axis=1))
        opt.step(params, tape.backward(loss), scale=1.0 - 0.9 * it / steps)
    return params


@pytest.fixture(scope="session")
def sphere_field():
    """Small MLP fitted to the radius-0.5 sphere SDF."""
    return fit_to_sdf(lambda q: np.linalg.norm(q, axis=1) - 0.5)


@pytest.fixture
def tiny_params():
    """A 2-hidden-layer float64 network with random (non-init) weights."""
    def make(seed=0, width=6, beta=100.0):
        rng = np.random.default_rng(seed)
        params = init_field(MlpConfig(hidden_layers=2, width=max(width, 4), beta=beta), seed=seed, dtype=np.float64)
        for k, v in params.arrays.items():
            params.arrays[k] = v + rng.normal(0, 0.3, size=v.shape)
        return params
    return make


VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(criterion, passed, detail)``."""
    def record(criterion, passed, detail):
        # passed=None marks a criterion that could not run
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"[criterion {criterion}] {status}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
