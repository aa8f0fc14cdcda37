import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wavecompose import tensor as T

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gradient_error(fn, inputs, eps=1e-4):
    """Worst relative error between tape gradients of scalar ``fn(*tensors)`` and central differences."""
    tensors = [T.Tensor.wrap(a.copy(), requires_grad=True) for a in inputs]
    with T.Tape() as tape:
        loss = fn(*tensors)
    T.backward(tape, loss, tensors)
    worst = 0.0
    for t in tensors:
        def value():
            return float(fn(*tensors).data)
        numeric = T.numerical_gradient(value, t.data, eps)
        worst = max(worst, T.relative_error(t.grad, numeric))
    return worst


def check_gradients(fn, inputs, rtol=1e-4, eps=1e-4):
    worst = gradient_error(fn, inputs, eps)
    assert worst < rtol, worst
    return worst


def project(out, rng):
    """Random linear functional turning any tensor into a scalar."""
    r = T.Tensor.wrap(rng.uniform(-1, 1, size=out.shape))
    return T.total(T.mul(out, r))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"acceptance {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[number]
            terminalreporter.write_line(f"{number:>2} {'PASS' if ok else 'FAIL'}  {detail}")
