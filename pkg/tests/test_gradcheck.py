import numpy as np
import pytest

from deesco import tensor as T
from deesco.gradcheck import SCALE_FLOOR, grad_check, numeric_grad, relative_error
from deesco.gradsuite import CASES, run_case, run_suite
from deesco.tensor import Tensor


def test_relative_error_definition():
    assert relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    # tiny gradients are compared against the floor, not blown up
    assert relative_error([0.0], [1e-9]) == pytest.approx(1e-9 / SCALE_FLOOR)
    assert relative_error([], []) == 0.0


def test_numeric_grad_of_cubic():
    x = Tensor(np.array([0.5, -1.5, 2.0]))
    g = numeric_grad(lambda: T.tsum(x * x * x), x, eps=1e-5)
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-8)
    # data restored exactly after perturbation
    np.testing.assert_array_equal(x.data, [0.5, -1.5, 2.0])


def test_grad_check_reports_per_input():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    rep = grad_check(lambda: T.tsum(a * b), {"a": a, "b": b})
    assert rep.passed and set(rep.errors) == {"a", "b"}
    assert rep.max_error < 1e-9


def test_grad_check_subsampling_is_seeded():
    x = Tensor(np.random.default_rng(0).standard_normal(50), requires_grad=True)
    r1 = grad_check(lambda: T.tsum(T.exp(x)), {"x": x}, max_entries=5, seed=3)
    r2 = grad_check(lambda: T.tsum(T.exp(x)), {"x": x}, max_entries=5, seed=3)
    assert r1.errors == r2.errors and r1.passed


def test_unused_input_has_zero_gradient_and_passes():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    rep = grad_check(lambda: T.tsum(a * 2.0), {"a": a, "b": b})
    assert rep.errors["b"] == 0.0


def test_injected_fault_is_caught():
    rep = run_case("dense", 0, inject_fault=True)
    assert not rep.passed
    assert "FAIL" in str(rep)


@pytest.mark.parametrize("op", sorted(CASES))
def test_every_primitive_passes_a_few_seeds(op):
    for seed in range(3):
        rep = run_case(op, seed)
        assert rep.passed, f"{op} seed {seed}:\n{rep}"


def test_run_suite_rejects_unknown_op():
    with pytest.raises(KeyError, match="unknown primitive"):
        run_suite(["softplus"], seeds=1)
