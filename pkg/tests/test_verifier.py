import equinox as eqx
import jax
import jax.numpy as jnp
import jax.random as jr
import pytest

from bobkovlab.bellman import bellman_value
from bobkovlab.corpus import (
    is_optimizer_family,
    random_domain_points,
    random_test_functions,
    random_test_functions_2d,
)
from bobkovlab.functions import (
    Blend,
    Constant,
    ProbitAffine2D,
    ProbitPoly,
    ProbitSeparable,
    Tabulated,
)
from bobkovlab.gauss import cdf, iso_profile
from bobkovlab.quadrature import QuadratureSpec
from bobkovlab.slope import DomainPoint, solve_slope
from bobkovlab.utils import central_difference
from bobkovlab.verifier import (
    DERIVATIVE_ERROR_FLOOR,
    DERIVATIVE_NAMES,
    bobkov_deficit,
    bobkov_lhs,
    derivative_errors,
    endpoint_limits,
    equality_characterization,
    optimal_velocity,
    pointwise_hjb_slack,
    psi_integrand,
    tensorize_check_2d,
)

optimizers = [
    ProbitPoly.affine_family(0.7, -0.2),
    ProbitPoly.affine_family(-0.3, 0.4),
    Constant(0.3),
]

# cdf(t^2 - 1)
non_optimizer = ProbitPoly(jnp.array([-1.0, 0.0, 1.0]))


@pytest.mark.parametrize("f", optimizers)
def test_bobkov_deficit_optimizers(f):
    report = bobkov_deficit(f)
    assert -1e-9 <= report.deficit <= 1e-8
    assert jnp.abs(report.deficit - report.psi_integral) <= 1e-7
    assert jnp.abs(report.min_psi) <= 1e-9


def test_bobkov_deficit_non_optimizer():
    report = bobkov_deficit(non_optimizer)
    assert report.deficit > 1e-3
    assert report.rhs == pytest.approx(iso_profile(non_optimizer.mean()), rel=1e-12)
    assert jnp.abs(report.deficit - report.psi_integral) <= 1e-7
    assert report.min_psi >= -1e-9


corpus = random_test_functions(jr.key(42), 100)


@pytest.mark.parametrize(("identifier", "f"), corpus, ids=[i for i, _ in corpus])
def test_bobkov_deficit_corpus(identifier, f):
    report = bobkov_deficit(f)
    assert report.deficit >= -1e-9
    assert jnp.abs(report.deficit - report.psi_integral) <= 1e-7
    assert report.min_psi >= -1e-9

    # The equality flag agrees with the deficit, and with the family drawn from.
    is_optimizer = bool(equality_characterization(f).is_optimizer)
    assert is_optimizer == bool(report.deficit <= 1e-8)
    assert is_optimizer == is_optimizer_family(identifier)


def test_bobkov_deficit_tabulated():
    [(_, f)] = random_test_functions(jr.key(0), 1, families=("tabulated",))
    assert isinstance(f, Tabulated)
    report = bobkov_deficit(f)
    assert report.deficit > 1e-6
    assert report.deficit == pytest.approx(report.psi_integral, abs=1e-7)


def test_bobkov_deficit_invalid_horizon():
    with pytest.raises(ValueError, match="horizon must be positive"):
        bobkov_deficit(optimizers[0], horizon=0)


def test_bobkov_lhs_constant():
    assert bobkov_lhs(Constant(0.3)) == pytest.approx(iso_profile(0.3), abs=1e-12)


def test_psi_integrand():
    ts = jnp.linspace(-2, 2, 9)
    affine = jax.vmap(lambda t: psi_integrand(optimizers[0], t))(ts)
    assert jnp.max(jnp.abs(affine)) <= 1e-10
    curved = jax.vmap(lambda t: psi_integrand(non_optimizer, t))(ts)
    assert jnp.all(curved >= -1e-12)
    assert jnp.max(curved) > 1e-6


def test_optimal_velocity():
    points = random_domain_points(jr.key(5), 10)
    x = cdf(points.p)
    velocities = jax.vmap(optimal_velocity)(points.t, x, points.y)
    slopes = jax.vmap(solve_slope)(points).a
    assert velocities == pytest.approx(iso_profile(x) * slopes, rel=1e-10)


def test_optimal_velocity_brute_force():
    points = random_domain_points(jr.key(6), 50)
    x = cdf(points.p)
    v_grid = jnp.linspace(-10, 10, 20001)

    def brute_force(t, x, y):
        slacks = jax.vmap(lambda v: pointwise_hjb_slack(t, x, y, v))(v_grid)
        return v_grid[jnp.argmin(slacks)]

    expected = jax.vmap(brute_force)(points.t, x, points.y)
    velocities = jax.vmap(optimal_velocity)(points.t, x, points.y)
    inside = jnp.abs(velocities) < 9.9
    assert jnp.all(jnp.where(inside, jnp.abs(velocities - expected), 0) <= 1e-3)


def test_pointwise_hjb_slack():
    t, x, y = 0.2, 0.6, 0.3
    v_star = optimal_velocity(t, x, y)
    assert pointwise_hjb_slack(t, x, y, v_star) == pytest.approx(0, abs=1e-12)
    for dv in (-0.5, -1e-3, 1e-3, 0.5):
        assert pointwise_hjb_slack(t, x, y, v_star + dv) > 0


@pytest.mark.parametrize(
    "f",
    [
        *optimizers,
        ProbitPoly(jnp.array([0.2, 0.1, 0.015])),
        Tabulated.from_function(
            ProbitPoly(jnp.array([-0.1, 0.15, -0.012])), jnp.linspace(-8.5, 8.5, 69)
        ),
    ],
)
def test_endpoint_limits(f):
    limits = endpoint_limits(f, 7)
    assert limits.low_end <= 1e-5
    assert limits.high_end_gap <= 1e-5
    assert 6 <= limits.horizon <= 7


limits_corpus = random_test_functions(jr.key(7), 10)


@pytest.mark.parametrize(
    ("identifier", "f"), limits_corpus, ids=[i for i, _ in limits_corpus]
)
def test_endpoint_limits_corpus(identifier, f):
    limits = endpoint_limits(f, 7)
    assert limits.low_end <= 1e-5
    assert limits.high_end_gap <= 1e-5
    assert 6 <= limits.horizon <= 7


def test_endpoint_limits_invalid():
    with pytest.raises(ValueError, match="min_horizon"):
        endpoint_limits(optimizers[0], 2, min_horizon=3)
    # Horizons below 6 are not accepted by default.
    with pytest.raises(ValueError, match="min_horizon"):
        endpoint_limits(optimizers[0], 5)


@pytest.mark.parametrize("f", optimizers)
def test_equality_characterization_optimizers(f):
    report = equality_characterization(f)
    assert report.is_optimizer
    assert report.sup_residual <= 1e-6
    assert jnp.all(report.usable)


def test_equality_characterization_non_optimizer():
    report = equality_characterization(non_optimizer)
    assert not report.is_optimizer
    assert report.sup_residual > 1e-2
    # The trajectory saturates at 1 in the left tail.
    assert not report.usable[0]


def test_equality_characterization_blend():
    f = Blend(jnp.array([0.4, 0.6]), jnp.array([-0.3, 0.2]), jnp.array([0.1, -0.4]))
    report = equality_characterization(f)
    assert not report.is_optimizer
    assert report.sup_residual > 1e-4
    assert jnp.all(report.usable)


def test_equality_characterization_grid():
    grid = jnp.linspace(-1, 1, 5)
    report = equality_characterization(optimizers[1], grid=grid)
    assert report.residuals.shape == (5,)
    assert jnp.all(report.grid == grid)


@pytest.mark.parametrize(
    "g",
    [
        ProbitAffine2D(0.6, 0.8, -0.1),
        ProbitAffine2D(-0.3, 0.2, 0.4),
        ProbitSeparable(jnp.array([0.5, 0.02]), jnp.array([0.1, -0.2, 0.01])),
    ],
)
def test_tensorize_check_2d(g):
    report = tensorize_check_2d(g)
    slacks = jnp.stack([report.slack_one, report.slack_two, report.slack_three])
    assert jnp.all(slacks >= -1e-7)
    assert report.total_deficit == pytest.approx(jnp.sum(slacks), abs=1e-14)
    if isinstance(g, ProbitAffine2D):
        assert report.total_deficit <= 1e-6


corpus_2d = random_test_functions_2d(jr.key(3), 10)


@pytest.mark.parametrize(("identifier", "g"), corpus_2d, ids=[i for i, _ in corpus_2d])
def test_tensorize_check_2d_corpus(identifier, g):
    report = tensorize_check_2d(g)
    slacks = jnp.stack([report.slack_one, report.slack_two, report.slack_three])
    assert jnp.all(slacks >= -1e-7)
    if identifier.startswith("probit-affine"):
        assert report.total_deficit <= 1e-6


def test_tensorize_check_2d_inner_failure():
    spec = QuadratureSpec(max_subdivisions=9, initial_panels=8)
    with pytest.raises(eqx.EquinoxRuntimeError, match="did not converge"):
        tensorize_check_2d(ProbitAffine2D(0.6, 0.8, -0.1), spec)


def test_derivative_errors():
    points = DomainPoint.from_fraction(
        jnp.array([-1.0, 0.0, 0.5, 1.5]),
        jnp.array([0.3, -0.8, 1.2, 0.0]),
        jnp.array([0.3, 0.5, 0.7, 0.4]),
    )
    errors = jax.vmap(derivative_errors)(points)
    assert errors.shape == (4, len(DERIVATIVE_NAMES))
    assert jnp.max(errors) <= 1e-6


def test_derivative_errors_ill_conditioned():
    errors = derivative_errors(DomainPoint.from_fraction(0.0, 0.0, 1 - 1e-13))
    assert jnp.all(jnp.isnan(errors))


def test_derivative_errors_relative():
    pt = DomainPoint.from_fraction(0.5, 1.2, 0.7)
    m_t = bellman_value(pt).M_t
    numeric = central_difference(
        lambda t: bellman_value(DomainPoint(t, pt.p, pt.y)).M, pt.t
    )
    assert jnp.abs(m_t) < 1
    scale = jnp.maximum(jnp.abs(m_t), DERIVATIVE_ERROR_FLOOR)
    error = derivative_errors(pt)[DERIVATIVE_NAMES.index("M_t")]
    assert error == pytest.approx(jnp.abs(numeric - m_t) / scale, rel=1e-3, abs=1e-12)
