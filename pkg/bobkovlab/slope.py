"""The implicit slope ``a(t, p, y)`` and its closed-form partial derivatives.

For ``0 < y < cdf(t)`` the slope is the unique ``a`` with
``truncated_halfspace_mass(t, p, a) = y``; the mass is strictly decreasing in ``a``,
tending to ``cdf(t)`` as ``a -> -inf`` and to ``0`` as ``a -> inf``. The root is
bracketed by geometric expansion from ``[-1, 1]`` and polished with Brent's method,
using the bivariate normal closed form of the mass.

Example:
    .. doctest::

        >>> import jax.numpy as jnp
        >>> from bobkovlab.gauss import cdf
        >>> from bobkovlab.slope import SlopeQuery, solve_slope
        >>> q = SlopeQuery(0.5, -0.3, cdf(-0.3) * cdf(0.5))
        >>> bool(jnp.abs(solve_slope(q).a) < 1e-10)
        True
"""

import equinox as eqx
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Bool, Float, Int

from bobkovlab.gauss import _cdf, _pdf
from bobkovlab.quadrature import _halfspace_mass_closed_form
from bobkovlab.root_finding import brent_search, expand_bracket
from bobkovlab.utils import arraylike_to_array

BRACKET_LIMIT = 1e6
BOUNDARY_MARGIN = 1e-12


class DomainPoint(eqx.Module):
    """A point ``(t, p, y)`` of the Bellman domain ``0 < y < cdf(t)``.

    Construction only converts the inputs to arrays; membership of the domain is
    checked by the operations consuming the point (see ``in_domain``), so batched
    points can be built and mapped over with ``jax.vmap``.

    Args:
        t: Time coordinate.
        p: Probit coordinate.
        y: Running mass, strictly between 0 and ``cdf(t)``.
    """

    t: Array
    p: Array
    y: Array

    def __init__(self, t: ArrayLike, p: ArrayLike, y: ArrayLike):
        self.t = arraylike_to_array(t, err_name="t", dtype=float)
        self.p = arraylike_to_array(p, err_name="p", dtype=float)
        self.y = arraylike_to_array(y, err_name="y", dtype=float)

    @classmethod
    def from_fraction(cls, t: ArrayLike, p: ArrayLike, lam: ArrayLike):
        """Construct the point with ``y = lam * cdf(t)``, for ``0 < lam < 1``."""
        t = arraylike_to_array(t, err_name="t", dtype=float)
        return cls(t, p, arraylike_to_array(lam, err_name="lam", dtype=float) * _cdf(t))

    @property
    def in_domain(self) -> Array:
        finite = jnp.isfinite(self.t) & jnp.isfinite(self.p) & jnp.isfinite(self.y)
        return finite & (self.y > 0) & (self.y < _cdf(self.t))


SlopeQuery = DomainPoint


class SlopeSolution(eqx.Module):
    """The solved slope with solver diagnostics.

    Attributes:
        a: The slope (nan if the query could not be solved).
        residual: ``truncated_halfspace_mass(t, p, a) - y``.
        iterations: Bracket expansion plus Brent iterations.
        bracket: Final bracket ``[lower, upper]`` containing the root.
        ill_conditioned: Whether ``y`` is too close to ``0`` or ``cdf(t)`` for the
            slope to be resolved (the slope diverges at both ends).
        in_domain: Whether the query satisfied ``0 < y < cdf(t)``.
    """

    a: Float[Array, ""]
    residual: Float[Array, ""]
    iterations: Int[Array, ""]
    bracket: Float[Array, "2"]
    ill_conditioned: Bool[Array, ""]
    in_domain: Bool[Array, ""]


class _SlopeResidual(eqx.Module):
    """``y - mass(a)``, an increasing function of ``a``."""

    t: Array
    p: Array
    y: Array

    def __call__(self, a):
        return self.y - _halfspace_mass_closed_form(self.t, self.p, a)


@eqx.filter_jit
def _solve_slope(q: DomainPoint, tol: float, max_steps: int, *, throw: bool):
    t, p, y = q.t, q.p, q.y
    in_domain = q.in_domain
    fraction = y / _cdf(t)
    near_boundary = (fraction < BOUNDARY_MARGIN) | (1 - fraction < BOUNDARY_MARGIN)
    usable = in_domain & ~near_boundary
    y_safe = jnp.where(usable, y, 0.5 * _cdf(jnp.where(jnp.isfinite(t), t, 0.0)))
    residual_fn = _SlopeResidual(jnp.where(jnp.isfinite(t), t, 0.0), p, y_safe)

    adapt = expand_bracket(
        residual_fn, -1.0, 1.0, limit=BRACKET_LIMIT, max_steps=64, throw=False
    )
    bracketed = adapt.state.contains_root
    lower = jnp.where(bracketed, adapt.state.lower, -1.0)
    upper = jnp.where(bracketed, adapt.state.upper, 1.0)

    def solvable_fn(a):
        # Unbracketed queries are replaced by a trivial problem with root 0.
        return jnp.where(bracketed, residual_fn(a), a)

    a, brent = brent_search(
        solvable_fn, lower, upper, max_steps=max_steps, throw=False
    )
    ill_conditioned = near_boundary | ~bracketed | brent.reached_max_steps
    a = jnp.where(usable & ~ill_conditioned, a, jnp.nan)
    residual = _halfspace_mass_closed_form(t, p, a) - y
    bracket = jnp.sort(jnp.stack([brent.state.xcur, brent.state.xblk]))

    if throw:
        a = eqx.error_if(
            a,
            ~in_domain,
            "The query is outside the domain 0 < y < cdf(t) (or not finite).",
        )
        a = eqx.error_if(
            a,
            ill_conditioned,
            "The slope is ill-conditioned: y is too close to 0 or cdf(t), where the "
            "slope diverges.",
        )
        a = eqx.error_if(
            a, jnp.abs(residual) > tol, "The slope residual exceeds the tolerance."
        )
    return SlopeSolution(
        a=a,
        residual=residual,
        iterations=adapt.steps + brent.steps,
        bracket=bracket,
        ill_conditioned=ill_conditioned & in_domain,
        in_domain=in_domain,
    )


def solve_slope(
    q: SlopeQuery,
    tol: float = 1e-12,
    *,
    max_steps: int = 200,
    throw: bool = True,
) -> SlopeSolution:
    """Solve ``truncated_halfspace_mass(t, p, a) = y`` for the slope ``a``.

    Args:
        q: The query point (scalar fields; use ``jax.vmap`` for batches).
        tol: Tolerance on the absolute mass residual. Defaults to 1e-12.
        max_steps: Maximum number of Brent iterations. Defaults to 200.
        throw: Whether to raise for queries outside the domain, ill-conditioned
            queries and residuals exceeding ``tol``. If False, these are flagged
            in the returned solution (with ``a`` set to nan for unsolvable queries).
            Defaults to True.
    """
    if tol <= 0:
        raise ValueError("tol must be positive.")
    return _solve_slope(q, tol, max_steps, throw=throw)


def rotated_coords(t: ArrayLike, p: ArrayLike, a: ArrayLike) -> tuple[Array, Array]:
    """Rotate ``(p, t)`` by the angle ``arctan(a)``.

    Returns ``P = (p - a*t)/sqrt(1 + a**2)`` and ``Q = (t + a*p)/sqrt(1 + a**2)``.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    p = arraylike_to_array(p, err_name="p", dtype=float)
    a = arraylike_to_array(a, err_name="a", dtype=float)
    norm = jnp.sqrt(1 + a**2)
    return (p - a * t) / norm, (t + a * p) / norm


def _lower_partial_moment(q):
    """``pdf(q) + q*cdf(q)``, the integral of ``cdf`` up to ``q`` (always positive)."""
    return _pdf(q) + q * _cdf(q)


def slope_kernel_integrals(
    t: ArrayLike, p: ArrayLike, a: ArrayLike
) -> tuple[Array, Array]:
    """Closed forms of the two kernel integrals behind the slope derivatives.

    Returns ``K0 = int_{-inf}^t pdf((s-t)a + p) pdf(s) ds = pdf(P) cdf(Q)/sqrt(1+a^2)``
    and ``K1 = int_{-inf}^t pdf((s-t)a + p) pdf(s) (s-t) ds
    = -pdf(P) (pdf(Q) + Q cdf(Q))/(1+a^2)``. ``K1`` is the derivative of the
    truncated half-space mass in ``a``, and is strictly negative.
    """
    big_p, big_q = rotated_coords(t, p, a)
    a = jnp.asarray(a, dtype=float)
    one_plus_a2 = 1 + a**2
    k0 = _pdf(big_p) * _cdf(big_q) / jnp.sqrt(one_plus_a2)
    k1 = -_pdf(big_p) * _lower_partial_moment(big_q) / one_plus_a2
    return k0, k1


def _slope_partials_at(t, p, a):
    big_p, big_q = rotated_coords(t, p, a)
    one_plus_a2 = 1 + a**2
    denominator = _pdf(big_p) * _lower_partial_moment(big_q)
    a_t = (
        one_plus_a2
        * (_cdf(p) * _pdf(t) - a / jnp.sqrt(one_plus_a2) * _pdf(big_p) * _cdf(big_q))
        / denominator
    )
    a_p = _cdf(big_q) * jnp.sqrt(one_plus_a2) / _lower_partial_moment(big_q)
    a_y = -one_plus_a2 / denominator
    return a_t, a_p, a_y


def slope_partials(
    q: SlopeQuery, tol: float = 1e-12, *, throw: bool = True
) -> tuple[Array, Array, Array]:
    """Closed-form partial derivatives ``(a_t, a_p, a_y)`` of the implicit slope.

    Args:
        q: The query point.
        tol: Tolerance passed to :func:`solve_slope`. Defaults to 1e-12.
        throw: Passed to :func:`solve_slope`. Defaults to True.
    """
    solution = solve_slope(q, tol, throw=throw)
    return _slope_partials_at(q.t, q.p, solution.a)
