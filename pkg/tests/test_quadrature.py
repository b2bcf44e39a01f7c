import itertools
import math

import equinox as eqx
import jax
import jax.numpy as jnp
import pytest

from bobkovlab.gauss import cdf
from bobkovlab.quadrature import (
    QuadratureSpec,
    bvn_cdf,
    gauss_weighted_integral,
    gauss_weighted_integral_2d,
    integrate,
    truncated_halfspace_mass,
    truncated_halfspace_mass_closed_form,
)

moment_test_cases = [
    # integrand, expected
    (jnp.ones_like, 1.0),
    (lambda s: s**2, 1.0),
    (lambda s: s**4, 3.0),
    (jnp.cos, math.exp(-0.5)),
    (lambda s: cdf(2 * s + 0.5), float(cdf(0.5 / math.sqrt(5)))),
]


@pytest.mark.parametrize(("g", "expected"), moment_test_cases)
def test_gauss_weighted_integral(g, expected):
    value, info = gauss_weighted_integral(g)
    assert value == pytest.approx(expected, abs=1e-12)
    assert info.converged
    assert info.error < 1e-12


def test_gauss_weighted_integral_limits():
    value, _ = gauss_weighted_integral(jnp.ones_like, upper=1.0)
    assert value == pytest.approx(cdf(1.0), abs=1e-13)

    value, _ = gauss_weighted_integral(jnp.ones_like, -0.5, 2.0)
    assert value == pytest.approx(cdf(2.0) - cdf(-0.5), abs=1e-13)

    # Entirely beyond the tail cutoff.
    value, _ = gauss_weighted_integral(jnp.ones_like, 20.0, jnp.inf)
    assert value == 0


def test_gauss_weighted_integral_array_valued():
    value, _ = gauss_weighted_integral(lambda s: jnp.stack([s**2, jnp.sin(s)]))
    assert value.shape == (2,)
    assert value == pytest.approx(jnp.array([1.0, 0.0]), abs=1e-12)


def test_gauss_weighted_integral_vmap():
    uppers = jnp.linspace(-2, 2, 5)

    def mass(upper):
        return gauss_weighted_integral(jnp.ones_like, upper=upper)[0]

    assert jax.vmap(mass)(uppers) == pytest.approx(cdf(uppers), abs=1e-13)


def test_gauss_weighted_integral_invalid_limits():
    with pytest.raises(eqx.EquinoxRuntimeError, match="lower must be less"):
        gauss_weighted_integral(jnp.ones_like, 1.0, 0.0)


def test_non_convergence():
    spec = QuadratureSpec(max_subdivisions=9, initial_panels=8)

    def rough(s):
        return jnp.sqrt(jnp.abs(s - 0.1234))

    value, info = gauss_weighted_integral(rough, spec=spec, throw=False)
    assert not info.converged
    assert info.subdivisions == 9
    assert jnp.isfinite(value)

    with pytest.raises(eqx.EquinoxRuntimeError, match="did not converge"):
        gauss_weighted_integral(rough, spec=spec)


def test_breakpoints():
    def kink(s):
        return jnp.abs(s - 0.3)

    spec = QuadratureSpec(max_subdivisions=16)
    value, info = integrate(kink, -1.0, 1.0, spec, breakpoints=jnp.array([0.3]))
    assert info.converged
    assert info.subdivisions == 9
    assert value == pytest.approx(1.09, abs=1e-13)

    _, info = integrate(kink, -1.0, 1.0, spec, throw=False)
    assert not info.converged

    # Breakpoints beyond the limits are ignored.
    value, info = gauss_weighted_integral(
        kink, upper=0.0, spec=spec, breakpoints=jnp.array([0.3, 2.0])
    )
    assert info.converged
    assert value == pytest.approx(0.3 * 0.5 + 1 / math.sqrt(2 * math.pi), abs=1e-13)


def test_breakpoints_invalid():
    spec = QuadratureSpec(max_subdivisions=12)
    with pytest.raises(ValueError, match="max_subdivisions must exceed"):
        integrate(jnp.sin, 0.0, 1.0, spec, breakpoints=jnp.linspace(0, 1, 4))
    with pytest.raises(ValueError, match="one dimensional"):
        integrate(jnp.sin, 0.0, 1.0, breakpoints=jnp.zeros((2, 2)))


def test_integrate():
    value, _ = integrate(jnp.sin, 0.0, math.pi)
    assert value == pytest.approx(2.0, abs=1e-13)

    value, _ = integrate(jnp.exp, -1.0, 1.0)
    assert value == pytest.approx(math.e - 1 / math.e, abs=1e-13)

    with pytest.raises(eqx.EquinoxRuntimeError, match="must be finite"):
        integrate(jnp.sin, 0.0, jnp.inf)


@pytest.mark.parametrize(
    ("kwargs", "match"),
    [
        ({"abs_tol": 0.0}, "abs_tol"),
        ({"rel_tol": -1.0}, "rel_tol"),
        ({"tail_cutoff": 5.0}, "tail_cutoff"),
        ({"initial_panels": 300}, "initial_panels"),
    ],
)
def test_quadrature_spec_invalid(kwargs, match):
    with pytest.raises(ValueError, match=match):
        QuadratureSpec(**kwargs)


def test_gauss_weighted_integral_2d():
    value, _ = gauss_weighted_integral_2d(lambda x, y: x**2 * y**2)
    assert value == pytest.approx(1.0, abs=1e-11)

    value, _ = gauss_weighted_integral_2d(lambda x, y: cdf(x + y))
    assert value == pytest.approx(0.5, abs=1e-11)


def test_gauss_weighted_integral_2d_inner_failure():
    # Smooth in x, so only the inner integrals in y fail.
    def step(x, y):
        return jnp.where(y > 0.1234, 1.0, 0.0)

    spec = QuadratureSpec(max_subdivisions=16)
    value, info = gauss_weighted_integral_2d(step, spec, throw=False)
    assert value.shape == ()
    assert not info.converged

    with pytest.raises(eqx.EquinoxRuntimeError, match="did not converge"):
        gauss_weighted_integral_2d(step, spec)


def test_gauss_weighted_integral_2d_array_valued():
    value, info = gauss_weighted_integral_2d(
        lambda x, y: jnp.stack([x**2, x * y, y**2])
    )
    assert info.converged
    assert value == pytest.approx(jnp.array([1.0, 0.0, 1.0]), abs=1e-11)


halfspace_test_cases = [
    # t, p, a
    (0.0, 0.0, 0.0),
    (0.5, -0.3, 1.2),
    (-1.5, 0.7, -0.4),
    (2.0, 1.0, 3.0),
    (1.0, -2.0, -5.0),
]


@pytest.mark.parametrize(("t", "p", "a"), halfspace_test_cases)
def test_truncated_halfspace_mass(t, p, a):
    quadrature = truncated_halfspace_mass(t, p, a)
    closed_form = truncated_halfspace_mass_closed_form(t, p, a)
    assert quadrature == pytest.approx(closed_form, abs=1e-12)


halfspace_grid = list(
    itertools.product(
        [-2.0, -1.0, 0.0, 1.0, 2.0],
        [-2.0, -1.0, 0.0, 1.0, 2.0],
        [-4.0, -1.5, 0.0, 1.5, 4.0],
    )
)


@pytest.mark.parametrize(("t", "p", "a"), halfspace_grid)
def test_truncated_halfspace_mass_grid(t, p, a):
    quadrature = truncated_halfspace_mass(t, p, a)
    closed_form = truncated_halfspace_mass_closed_form(t, p, a)
    assert quadrature == pytest.approx(closed_form, abs=1e-10)


@pytest.mark.parametrize(("t", "p"), [(-1.0, 0.5), (0.0, 0.0), (1.5, -1.0)])
def test_truncated_halfspace_mass_decreasing_in_slope(t, p):
    # The line drops below its value at s = t as the slope grows.
    slopes = jnp.linspace(-3, 3, 13)
    masses = truncated_halfspace_mass_closed_form(t, p, slopes)
    assert jnp.all(jnp.diff(masses) < 0)
    assert masses[0] < cdf(t)
    assert masses[-1] > 0


def test_truncated_halfspace_mass_zero_slope():
    # With a = 0 the half-space is a product set.
    assert truncated_halfspace_mass_closed_form(0.3, -0.8, 0.0) == pytest.approx(
        cdf(0.3) * cdf(-0.8), rel=1e-13
    )


@pytest.mark.parametrize("rho", [-0.99, -0.95, -0.5, 0.0, 0.3, 0.9, 0.93, 0.999])
def test_bvn_cdf_origin(rho):
    expected = 0.25 + math.asin(rho) / (2 * math.pi)
    assert bvn_cdf(0.0, 0.0, rho) == pytest.approx(expected, abs=1e-13)


def test_bvn_cdf_limits():
    h, k = jnp.array([-1.0, 0.2, 1.5]), jnp.array([0.5, -0.7, 2.0])
    assert bvn_cdf(h, k, 0.0) == pytest.approx(cdf(h) * cdf(k), abs=1e-15)
    assert bvn_cdf(h, jnp.inf, 0.3) == pytest.approx(cdf(h), abs=1e-14)
    assert bvn_cdf(-jnp.inf, k, 0.3) == pytest.approx(0, abs=1e-15)


def test_bvn_cdf_symmetry():
    # P(X <= h, Y <= k) + P(X <= h, Y > k) = cdf(h), and -Y has correlation -rho.
    h, k, rho = 0.4, -0.3, 0.95
    assert bvn_cdf(h, k, rho) + bvn_cdf(h, -k, -rho) == pytest.approx(
        cdf(h), abs=1e-13
    )


def test_bvn_cdf_invalid():
    with pytest.raises(eqx.EquinoxRuntimeError, match="rho"):
        bvn_cdf(0.0, 0.0, 1.0)
