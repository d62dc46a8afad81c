import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apcon.quadrature import QuadratureConfigError, collision, gauss_legendre, moment


def test_two_point_rule():
    q = gauss_legendre(2)
    np.testing.assert_allclose(q.nodes, [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
    np.testing.assert_allclose(q.weights, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32, 64])
def test_weights_sum_to_one(n):
    q = gauss_legendre(n)
    assert abs(q.weights.sum() - 1.0) <= 1e-14
    assert np.all(q.weights > 0)
    assert np.all(np.abs(q.nodes) < 1)


def test_symmetry_and_low_moments():
    q = gauss_legendre(32)
    assert np.array_equal(q.nodes, -q.nodes[q.mirror])
    assert np.array_equal(q.weights, q.weights[q.mirror])
    assert abs(q.weights @ q.nodes) <= 1e-14
    assert abs(q.weights @ q.nodes**2 - 1 / 3) <= 1e-12


def test_monomials_up_to_degree_63():
    q = gauss_legendre(32)
    # <v^k> = 1/(k+1) for even k, 0 for odd k
    for k in range(64):
        exact = 1.0 / (k + 1) if k % 2 == 0 else 0.0
        assert abs(q.weights @ q.nodes**k - exact) <= 1e-12, k
    assert abs(moment(q, q.nodes**4) - 0.2) <= 1e-12


@pytest.mark.parametrize("n", [0, 1, 3, 31])
def test_bad_sizes_rejected(n):
    with pytest.raises(QuadratureConfigError):
        gauss_legendre(n)


def test_moment_examples():
    q = gauss_legendre(32)
    assert moment(q, np.full(32, 2.5)) == pytest.approx(2.5, abs=1e-14)
    assert abs(moment(q, q.nodes)) <= 1e-15
    with pytest.raises(ValueError):
        moment(q, np.ones(31))


def test_collision_examples():
    q = gauss_legendre(32)
    np.testing.assert_allclose(collision(q, np.full(32, 3.0)), 0.0, atol=1e-14)
    np.testing.assert_allclose(collision(q, q.nodes), -q.nodes, atol=1e-15)
    with pytest.raises(ValueError):
        collision(q, np.ones(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=32, max_size=32),
       st.lists(st.floats(-1e3, 1e3), min_size=32, max_size=32), st.floats(-10, 10))
def test_collision_properties(f, g, alpha):
    q = gauss_legendre(32)
    f, g = np.array(f), np.array(g)
    scale = max(1.0, np.abs(f).max(), np.abs(g).max())
    # <Lf> = 0, L is linear, (I - Pi) is idempotent
    assert abs(moment(q, collision(q, f))) <= 1e-14 * scale
    np.testing.assert_allclose(collision(q, alpha * f + g), alpha * collision(q, f) + collision(q, g),
                               atol=1e-12 * scale * max(1, abs(alpha)))
    proj = -collision(q, f)
    np.testing.assert_allclose(-collision(q, proj), proj, atol=1e-12 * scale)
