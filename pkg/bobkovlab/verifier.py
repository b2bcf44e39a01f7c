"""Numerical verification of Bobkov's inequality through the Bellman function.

For a test function ``f`` with values in (0, 1), Bobkov's inequality states

``int sqrt(I(f)^2 + f'^2) dgamma >= I(int f dgamma)``.

Along the trajectory ``t -> (t, f(t), int_{-inf}^t f dgamma)`` the Bellman function
``B`` increases no faster than the accumulated left hand side. The pointwise gap
``Psi`` is non-negative and integrates to the deficit, and vanishes identically
exactly when the probit of ``f`` is affine. The two dimensional inequality follows
by tensorization, which is checked step by step in :func:`tensorize_check_2d`.
"""

import dataclasses
import logging

import equinox as eqx
import jax
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Bool, Float

from bobkovlab.bellman import _bellman_at, b_surface, bellman_value
from bobkovlab.functions import AbstractProbit2D, AbstractTestFunction1D, _safe_iso
from bobkovlab.gauss import Probability, _cdf, _iso, _pdf, _probability_value
from bobkovlab.quadrature import (
    QuadratureSpec,
    _checked,
    _split_inner_failures,
    _with_inner_failures,
    gauss_weighted_integral,
    integrate,
)
from bobkovlab.slope import DomainPoint, _slope_partials_at, solve_slope
from bobkovlab.utils import arraylike_to_array, central_difference

logger = logging.getLogger(__name__)

# Integrands built from inner adaptive integrals carry their rounding noise, so the
# outer rule is not asked for more than this.
NESTED_ABS_TOL = 1e-11

# Both endpoint limits are within 1e-5 from this horizon on.
MIN_LIMIT_HORIZON = 6


def _nested_spec(spec: QuadratureSpec | None) -> QuadratureSpec:
    spec = QuadratureSpec() if spec is None else spec
    return dataclasses.replace(
        spec,
        abs_tol=max(spec.abs_tol, NESTED_ABS_TOL),
        rel_tol=max(spec.rel_tol, NESTED_ABS_TOL),
    )


class DeficitReport(eqx.Module):
    """Bobkov's inequality evaluated for a test function.

    Attributes:
        lhs: ``int sqrt(I(f)^2 + f'^2) dgamma``.
        rhs: ``I(int f dgamma)``.
        deficit: ``lhs - rhs``.
        min_psi: Minimum of ``Psi`` over a uniform grid on the horizon.
        psi_integral: Integral of ``Psi`` over ``[-horizon, horizon]``, which
            reproduces the deficit.
    """

    lhs: Float[Array, ""]
    rhs: Float[Array, ""]
    deficit: Float[Array, ""]
    min_psi: Float[Array, ""]
    psi_integral: Float[Array, ""]


class EndpointLimits(eqx.Module):
    """The Bellman function along a trajectory at both ends of a horizon.

    Attributes:
        low_end: ``B`` at ``t = -horizon``, which tends to zero.
        high_end_gap: ``|B - I(int f dgamma)|`` at ``t = horizon``, which tends to
            zero.
        horizon: The horizon used, the largest tried at which the slope could be
            resolved at both ends.
    """

    low_end: Float[Array, ""]
    high_end_gap: Float[Array, ""]
    horizon: Float[Array, ""]


class CharacterizationReport(eqx.Module):
    """Comparison of a test function against the optimal trajectory.

    Attributes:
        is_optimizer: Whether ``sup |residuals| <= tol`` over the usable nodes.
        sup_residual: Maximum absolute residual over the usable nodes.
        grid: The nodes.
        residuals: ``f'/I(f) - a(t, inv_cdf(f), int_{-inf}^t f dgamma)`` at the
            nodes.
        usable: Whether the slope could be resolved at each node.
    """

    is_optimizer: Bool[Array, ""]
    sup_residual: Float[Array, ""]
    grid: Float[Array, " n"]
    residuals: Float[Array, " n"]
    usable: Bool[Array, " n"]


class TensorizationReport(eqx.Module):
    """The chain of inequalities lifting Bobkov's inequality to the plane.

    With ``G(x) = int g(x, y) dgamma(y)``, ``G_x`` its derivative,
    ``J(x) = int sqrt(I(g)^2 + g_y^2) dgamma(y)``:

    - ``rhs = I(int G dgamma)``,
    - ``step_one = int sqrt(I(G)^2 + G_x^2) dgamma``,
    - ``step_two = int sqrt(J^2 + G_x^2) dgamma``,
    - ``lhs = int sqrt(I(g)^2 + |grad g|^2) dgamma^2``,

    and ``rhs <= step_one <= step_two <= lhs``. The slacks are the consecutive
    differences, and sum to ``total_deficit = lhs - rhs``.
    """

    rhs: Float[Array, ""]
    step_one: Float[Array, ""]
    step_two: Float[Array, ""]
    lhs: Float[Array, ""]
    slack_one: Float[Array, ""]
    slack_two: Float[Array, ""]
    slack_three: Float[Array, ""]
    total_deficit: Float[Array, ""]


class _BobkovIntegrand(eqx.Module):
    f: AbstractTestFunction1D

    def __call__(self, t):
        return jnp.sqrt(self.f.iso(t) ** 2 + self.f.derivative(t) ** 2)


def bobkov_lhs(f: AbstractTestFunction1D, spec: QuadratureSpec | None = None) -> Array:
    """The left hand side ``int sqrt(I(f)^2 + f'^2) dgamma`` of Bobkov's inequality."""
    value, _ = gauss_weighted_integral(
        _BobkovIntegrand(f), spec=spec, breakpoints=f.breakpoints
    )
    return value


def _psi(f: AbstractTestFunction1D, t, spec, *, throw: bool):
    """``Psi(t)`` and whether the slope was ill-conditioned at ``t``."""
    x, derivative, iso = f(t), f.derivative(t), f.iso(t)
    point = DomainPoint(t, f.probit(t), f.running_mass(t, spec))
    solution = solve_slope(point, throw=throw)
    evaluated = _bellman_at(t, point.p, solution.a)
    b_x = evaluated.M_p / iso
    bobkov = jnp.sqrt(iso**2 + derivative**2) * _pdf(t)
    psi = bobkov - (evaluated.M_t + b_x * derivative + evaluated.M_y * x * _pdf(t))
    return psi, solution.ill_conditioned


class _PsiIntegrand(eqx.Module):
    """``Psi``, taken to be zero where the trajectory saturates at 0 or 1.

    There the running mass is within ``BOUNDARY_MARGIN`` of ``0`` or ``cdf(t)``, and
    the Bobkov integrand is negligible.
    """

    f: AbstractTestFunction1D
    spec: QuadratureSpec | None

    def __call__(self, t):
        psi, ill_conditioned = _psi(self.f, t, self.spec, throw=False)
        return jnp.where(ill_conditioned, 0.0, psi)


def psi_integrand(
    f: AbstractTestFunction1D,
    t: ArrayLike,
    spec: QuadratureSpec | None = None,
    *,
    throw: bool = True,
) -> Array:
    """The non-negative gap ``Psi(t)`` between the Bobkov integrand and ``dB/dt``.

    ``Psi(t) = sqrt(I(f)^2 + f'^2) pdf(t) - (B_t + B_x f' + B_y f pdf(t))``, with
    ``B`` and its partials evaluated at ``(t, f(t), int_{-inf}^t f dgamma)``.

    Args:
        f: The test function.
        t: A scalar time (use ``jax.vmap`` for batches).
        spec: Quadrature configuration for the running mass. Defaults to
            ``QuadratureSpec()``.
        throw: Passed to the slope solver. With False, ``Psi`` is nan where the
            slope is ill-conditioned. Defaults to True.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    psi, _ = _psi(f, t, spec, throw=throw)
    return psi


def bobkov_deficit(
    f: AbstractTestFunction1D,
    spec: QuadratureSpec | None = None,
    *,
    horizon: float | int = 6,
    grid_size: int = 121,
) -> DeficitReport:
    """Evaluate Bobkov's inequality, and its deficit as the integral of ``Psi``.

    Args:
        f: The test function.
        spec: Quadrature configuration. Defaults to ``QuadratureSpec()``.
        horizon: ``Psi`` is integrated over ``[-horizon, horizon]``; the remaining
            boundary terms are negligible for the default of 6.
        grid_size: Number of grid points for ``min_psi``. Defaults to 121.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive.")
    lhs = bobkov_lhs(f, spec)
    rhs = _safe_iso(f.mean(spec))
    psi = _PsiIntegrand(f, spec)
    psi_integral, info = integrate(
        psi, -horizon, horizon, _nested_spec(spec), breakpoints=f.breakpoints
    )
    grid = jnp.linspace(-horizon, horizon, grid_size)
    min_psi = jnp.min(jax.vmap(psi)(grid))
    logger.debug(
        "Deficit %.3e, psi integral %.3e (%d panels).",
        lhs - rhs,
        psi_integral,
        info.subdivisions,
    )
    return DeficitReport(
        lhs=lhs,
        rhs=rhs,
        deficit=lhs - rhs,
        min_psi=min_psi,
        psi_integral=psi_integral,
    )


def optimal_velocity(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    tol: float = 1e-12,
    *,
    throw: bool = True,
) -> Array:
    """The unique minimizer ``v*`` of ``v -> pdf(t) sqrt(I(x)^2 + v^2) - v B_x``.

    ``v* = I(x) B_x / sqrt(pdf(t)^2 - B_x^2)``, which equals ``I(x) a(t, p, y)``.

    Args:
        t: Time coordinate.
        x: Probability strictly inside (0, 1).
        y: Running mass, strictly between 0 and ``cdf(t)``.
        tol: Slope solver tolerance. Defaults to 1e-12.
        throw: Passed to the slope solver. Defaults to True.
    """
    x = _probability_value(x, "x")
    t = arraylike_to_array(t, err_name="t", dtype=float)
    surface = b_surface(t, x, y, tol, throw=throw)
    return _iso(x) * surface.B_x / jnp.sqrt(_pdf(t) ** 2 - surface.B_x**2)


def pointwise_hjb_slack(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    v: ArrayLike,
    tol: float = 1e-12,
    *,
    throw: bool = True,
) -> Array:
    """The Bellman inequality slack for the control ``v``.

    ``pdf(t) sqrt(I(x)^2 + v^2) - (B_t + B_x v + B_y x pdf(t))``, non-negative, and
    zero exactly at ``v = optimal_velocity(t, x, y)``.
    """
    x = _probability_value(x, "x")
    t = arraylike_to_array(t, err_name="t", dtype=float)
    v = arraylike_to_array(v, err_name="v", dtype=float)
    surface = b_surface(t, x, y, tol, throw=throw)
    cost = _pdf(t) * jnp.sqrt(_iso(x) ** 2 + v**2)
    return cost - (surface.B_t + surface.B_x * v + surface.B_y * x * _pdf(t))


def _bellman_along(f: AbstractTestFunction1D, t: float, spec):
    t = jnp.asarray(t, dtype=float)
    point = DomainPoint(t, f.probit(t), f.running_mass(t, spec))
    return bellman_value(point, throw=False).M


def endpoint_limits(
    f: AbstractTestFunction1D,
    horizon: float | int = 7,
    spec: QuadratureSpec | None = None,
    *,
    step: float = 0.5,
    min_horizon: float | int = MIN_LIMIT_HORIZON,
) -> EndpointLimits:
    """The Bellman function along the trajectory of ``f`` at ``-horizon`` and
    ``horizon``, compared with its limits ``0`` and ``I(int f dgamma)``.

    If the slope is ill-conditioned at either end (deep in the tails), the horizon
    is reduced by ``step`` until it can be resolved.

    Args:
        f: The test function.
        horizon: The horizon ``T`` to try first. Defaults to 7.
        spec: Quadrature configuration. Defaults to ``QuadratureSpec()``.
        step: Horizon reduction step. Defaults to 0.5.
        min_horizon: Smallest horizon to try. Defaults to ``MIN_LIMIT_HORIZON``.

    Raises:
        ValueError: If no horizon down to ``min_horizon`` is usable.
    """
    if not 0 < min_horizon <= horizon:
        raise ValueError("Expected 0 < min_horizon <= horizon.")
    limit = _safe_iso(f.mean(spec))
    current = float(horizon)
    while True:
        low = _bellman_along(f, -current, spec)
        high = _bellman_along(f, current, spec)
        if jnp.isfinite(low) and jnp.isfinite(high):
            break
        if current - step < min_horizon:
            raise ValueError(
                f"The slope is ill-conditioned at every horizon down to {current}."
            )
        logger.info(
            "Slope ill-conditioned at horizon %s, reducing to %s.",
            current,
            current - step,
        )
        current -= step
    return EndpointLimits(
        low_end=low,
        high_end_gap=jnp.abs(high - limit),
        horizon=jnp.asarray(current),
    )


def equality_characterization(
    f: AbstractTestFunction1D,
    tol: float = 1e-6,
    grid: ArrayLike | None = None,
    spec: QuadratureSpec | None = None,
) -> CharacterizationReport:
    """Check whether ``f`` follows the optimal trajectory.

    Equality in Bobkov's inequality forces ``f'(t) = I(f(t)) a(t, p(t), y(t))``
    along the trajectory (``p = inv_cdf(f)``, ``y`` the running mass), which holds
    exactly for ``f = cdf(u t + v)``. The residual of this relation is evaluated on
    the grid; nodes where the slope is ill-conditioned are excluded.

    Args:
        f: The test function.
        tol: Tolerance on the supremum of the residual. Defaults to 1e-6.
        grid: Strictly increasing nodes. Defaults to 25 uniform nodes on [-3, 3].
        spec: Quadrature configuration for the running mass. Defaults to
            ``QuadratureSpec()``.
    """
    if grid is None:
        grid = jnp.linspace(-3, 3, 25)
    grid = arraylike_to_array(grid, err_name="grid", dtype=float)
    masses = f.running_mass_profile(grid, spec)
    points = DomainPoint(grid, f.probit(grid), masses)
    solutions = jax.vmap(lambda pt: solve_slope(pt, throw=False))(points)
    residuals = f.derivative(grid) / f.iso(grid) - solutions.a
    usable = solutions.in_domain & ~solutions.ill_conditioned
    sup_residual = jnp.max(jnp.where(usable, jnp.abs(residuals), 0.0))
    if not jnp.all(usable):
        logger.info(
            "Excluded %d ill-conditioned nodes.", int(jnp.sum(~usable))
        )
    return CharacterizationReport(
        is_optimizer=(sup_residual <= tol) & jnp.any(usable),
        sup_residual=sup_residual,
        grid=grid,
        residuals=residuals,
        usable=usable,
    )


class _TensorInner(eqx.Module):
    g: AbstractProbit2D
    x: Array

    def __call__(self, y):
        g_x, g_y = self.g.grad(self.x, y)
        iso = self.g.iso(self.x, y)
        return jnp.stack(
            [
                self.g(self.x, y),
                g_x,
                jnp.sqrt(iso**2 + g_y**2),
                jnp.sqrt(iso**2 + g_x**2 + g_y**2),
            ]
        )


class _TensorOuter(eqx.Module):
    g: AbstractProbit2D
    spec: QuadratureSpec

    def __call__(self, x):
        inner, info = gauss_weighted_integral(
            _TensorInner(self.g, x), spec=self.spec, throw=False
        )
        marginal, marginal_x, inner_bobkov, inner_lhs = inner
        outer = jnp.stack(
            [
                jnp.sqrt(_safe_iso(marginal) ** 2 + marginal_x**2),
                jnp.sqrt(inner_bobkov**2 + marginal_x**2),
                inner_lhs,
                marginal,
            ]
        )
        return _with_inner_failures(outer, info)


def tensorize_check_2d(
    g: AbstractProbit2D, spec: QuadratureSpec | None = None
) -> TensorizationReport:
    """Evaluate the tensorization chain for a two dimensional test function.

    The three steps are Bobkov's inequality for the marginal ``G``, Bobkov's
    inequality in ``y`` inside the radical, and the Minkowski integral inequality.

    Args:
        g: The test function.
        spec: Quadrature configuration (for both the inner and outer integrals).
            Defaults to ``QuadratureSpec()``.

    Raises:
        EquinoxRuntimeError: If an inner or the outer integral does not converge.
    """
    spec = QuadratureSpec() if spec is None else spec
    outer, info = gauss_weighted_integral(
        _TensorOuter(g, spec), spec=_nested_spec(spec), throw=False
    )
    outer, info = _split_inner_failures(outer, info, (4,))
    outer, _ = _checked(outer, info, throw=True)
    step_one, step_two, lhs, mean = outer
    rhs = _safe_iso(mean)
    return TensorizationReport(
        rhs=rhs,
        step_one=step_one,
        step_two=step_two,
        lhs=lhs,
        slack_one=step_one - rhs,
        slack_two=step_two - step_one,
        slack_three=lhs - step_two,
        total_deficit=lhs - rhs,
    )


DERIVATIVE_NAMES = ("a_t", "a_p", "a_y", "M_t", "M_p", "M_y")

# Below this magnitude, derivative errors are measured absolutely.
DERIVATIVE_ERROR_FLOOR = 1e-3


def derivative_errors(pt: DomainPoint, *, rel_step: float = 1e-5) -> Array:
    """Errors of the closed-form partials against central differences.

    The slope ``a`` and the Bellman function ``M`` are differenced in each of
    ``(t, p, y)``. Steps in ``t`` and ``p`` are ``rel_step * max(1, |.|)``, the step
    in ``y`` is ``rel_step * min(y, cdf(t) - y)``, keeping the stencil in the domain.

    Args:
        pt: The domain point (use ``jax.vmap`` for batches).
        rel_step: Relative finite difference step. Defaults to 1e-5.

    Returns:
        The errors ``|numeric - closed form| / |closed form|`` in the order of
        ``DERIVATIVE_NAMES``, with the denominator raised to
        ``DERIVATIVE_ERROR_FLOOR`` for partials near zero (nan where the slope is
        ill-conditioned).
    """
    evaluated = bellman_value(pt, throw=False)
    closed = jnp.stack(
        [
            *_slope_partials_at(pt.t, pt.p, evaluated.a),
            evaluated.M_t,
            evaluated.M_p,
            evaluated.M_y,
        ]
    )

    def slope_and_value(t, p, y):
        shifted = bellman_value(DomainPoint(t, p, y), throw=False)
        return jnp.stack([shifted.a, shifted.M])

    y_step = rel_step * jnp.minimum(pt.y, _cdf(pt.t) - pt.y)
    d_t = central_difference(
        lambda t: slope_and_value(t, pt.p, pt.y), pt.t, rel_step=rel_step
    )
    d_p = central_difference(
        lambda p: slope_and_value(pt.t, p, pt.y), pt.p, rel_step=rel_step
    )
    d_y = central_difference(lambda y: slope_and_value(pt.t, pt.p, y), pt.y, step=y_step)
    differences = jnp.stack([d_t, d_p, d_y])
    numeric = jnp.concatenate([differences[:, 0], differences[:, 1]])
    return jnp.abs(closed - numeric) / jnp.maximum(
        jnp.abs(closed), DERIVATIVE_ERROR_FLOOR
    )
