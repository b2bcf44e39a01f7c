import equinox as eqx
import jax
import jax.numpy as jnp
import jax.random as jr
import pytest

from bobkovlab.bellman import (
    b_surface,
    b_surface_residual,
    bellman_partials,
    bellman_value,
    hjb_residual,
    hjb_sides,
)
from bobkovlab.corpus import random_domain_points
from bobkovlab.gauss import cdf, inv_cdf, pdf
from bobkovlab.slope import DomainPoint
from bobkovlab.utils import central_difference


def test_bellman_value_horizontal_slope():
    # At y = cdf(p) cdf(t) the slope vanishes and M = pdf(p) cdf(t).
    t, p = 0.5, -0.3
    evaluated = bellman_value(DomainPoint(t, p, cdf(p) * cdf(t)))
    assert evaluated.a == pytest.approx(0, abs=1e-10)
    assert evaluated.M == pytest.approx(pdf(p) * cdf(t), rel=1e-10)
    assert evaluated.M_y == pytest.approx(-p, abs=1e-10)


def test_hjb_residual():
    points = random_domain_points(jr.key(1), 40)
    residuals = jax.vmap(hjb_residual)(points)
    assert jnp.max(jnp.abs(residuals)) < 1e-12


def test_hjb_sides():
    point = DomainPoint.from_fraction(-0.7, 1.1, 0.6)
    evaluated = bellman_value(point)
    lhs, rhs = hjb_sides(evaluated, point.t, point.p)
    expected = pdf(evaluated.P) * pdf(evaluated.Q) / jnp.sqrt(1 + evaluated.a**2)
    assert lhs == pytest.approx(expected, rel=1e-10)
    assert rhs == pytest.approx(expected, rel=1e-10)


def test_rotation_invariants():
    points = random_domain_points(jr.key(4), 20)
    evaluated = jax.vmap(bellman_value)(points)
    assert evaluated.P**2 + evaluated.Q**2 == pytest.approx(
        points.t**2 + points.p**2, rel=1e-12
    )
    assert pdf(evaluated.P) * pdf(evaluated.Q) == pytest.approx(
        pdf(points.t) * pdf(points.p), rel=1e-12
    )
    # The two forms of M_p.
    norm = jnp.sqrt(1 + evaluated.a**2)
    assert evaluated.M_p == pytest.approx(
        evaluated.a * pdf(points.p) * pdf(points.t) / norm, rel=1e-12, abs=1e-15
    )


@pytest.mark.parametrize(
    ("t", "p", "lam"), [(0.0, 0.0, 0.5), (-1.2, 0.8, 0.2), (1.7, -1.5, 0.85)]
)
def test_bellman_partials(t, p, lam):
    point = DomainPoint.from_fraction(t, p, lam)
    m_t, m_p, m_y = bellman_partials(point)

    def value(t, p, y):
        return bellman_value(DomainPoint(t, p, y)).M

    y_step = 1e-5 * min(float(point.y), float(cdf(t) - point.y))
    assert m_t == pytest.approx(
        central_difference(lambda t: value(t, point.p, point.y), point.t), abs=1e-8
    )
    assert m_p == pytest.approx(
        central_difference(lambda p: value(point.t, p, point.y), point.p), abs=1e-8
    )
    assert m_y == pytest.approx(
        central_difference(lambda y: value(point.t, point.p, y), point.y, step=y_step),
        abs=1e-7,
    )


def test_bellman_value_outside_domain():
    point = DomainPoint(0.0, 0.0, 0.7)
    with pytest.raises(eqx.EquinoxRuntimeError, match="outside the domain"):
        bellman_value(point)
    assert jnp.isnan(bellman_value(point, throw=False).M)


def test_b_surface():
    t, x, lam = 0.3, 0.4, 0.45
    y = lam * cdf(t)
    surface = b_surface(t, x, y)
    evaluated = bellman_value(DomainPoint(t, inv_cdf(x), y))
    assert surface.B == pytest.approx(evaluated.M, rel=1e-14)
    assert surface.B_x == pytest.approx(evaluated.M_p / pdf(inv_cdf(x)), rel=1e-14)

    b_x = central_difference(lambda x: b_surface(t, x, y).B, x, step=1e-6)
    assert surface.B_x == pytest.approx(b_x, abs=1e-8)


def test_b_surface_residual():
    points = random_domain_points(jr.key(2), 20)
    x = cdf(points.p)
    residuals = jax.vmap(b_surface_residual)(points.t, x, points.y)
    assert jnp.max(jnp.abs(residuals)) < 1e-12


def test_b_surface_invalid_x():
    with pytest.raises(eqx.EquinoxRuntimeError, match="strictly inside"):
        b_surface(0.0, 1.0, 0.2)
