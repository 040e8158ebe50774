import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pinwm.oracles import (
    bounce_sequence,
    coulomb_sliding_solution,
    finite_diff,
    gradcheck,
    relative_error,
)


def test_fd_quadratic():
    g = finite_diff(lambda t: float(np.sum(t**2)), [1.0, 2.0])
    np.testing.assert_allclose(g, [2, 4], atol=1e-8)


def test_fd_constant():
    np.testing.assert_array_equal(finite_diff(lambda t: 3.0, [0.5, -2.0, 7.0]), 0.0)


def test_fd_non_finite_raises():
    with pytest.raises(FloatingPointError):
        finite_diff(lambda t: math.inf, [1.0])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_fd_exact_for_linear(c):
    c = np.array(c)
    g = finite_diff(lambda t: float(c @ t), np.ones_like(c))
    np.testing.assert_allclose(g, c, atol=1e-8)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_gradcheck_pass_and_fail():
    f = lambda t: float(np.sin(t[0]) * t[1] ** 2)
    theta = np.array([0.3, 1.7])
    good = np.array([np.cos(0.3) * 1.7**2, 2 * np.sin(0.3) * 1.7])
    rep = gradcheck(f, good, theta, ["a", "b"])
    assert rep.passed and rep.max_rel_err < 1e-6
    bad = gradcheck(f, good * [1, 1.01], theta)
    assert not bad.passed
    assert bad.to_json()["entries"][1]["ok"] is False
    assert "FAIL" in bad.table()


def test_sliding_closed_form():
    t, s = coulomb_sliding_solution(1.0, 0.2, 9.81)
    assert t == pytest.approx(0.50968, abs=1e-5)
    assert s == pytest.approx(0.25484, abs=1e-5)
    assert coulomb_sliding_solution(0.0, 0.2) == (0.0, 0.0)
    with pytest.raises(ValueError):
        coulomb_sliding_solution(1.0, 0.0)


def test_bounce_closed_form():
    assert bounce_sequence(1.0, 0.5, n_bounces=2) == pytest.approx([0.25, 0.0625])
    assert bounce_sequence(0.3, 1.0) == pytest.approx([0.3] * 3)
    assert bounce_sequence(1.0, 1e-9)[0] < 1e-17
    with pytest.raises(ValueError):
        bounce_sequence(1.0, 0.0)


@given(st.floats(0.01, 5.0), st.floats(0.01, 1.0))
def test_sliding_energy_balance(v0, mu):
    _, s = coulomb_sliding_solution(v0, mu)
    # kinetic energy per unit mass equals the work done by friction
    assert 0.5 * v0 * v0 == pytest.approx(mu * 9.81 * s)
