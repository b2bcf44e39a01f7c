"""The Bellman function ``M(t, p, y)``, its partials and the HJB identity.

With ``a = a(t, p, y)`` the implicit slope and ``(P, Q)`` the rotated coordinates,
``M = pdf(P) * cdf(Q)``, and

- ``M_t = pdf(P) pdf(Q)/sqrt(1 + a^2) + P pdf(t) cdf(p)``,
- ``M_p = a pdf(P) pdf(Q)/sqrt(1 + a^2)``,
- ``M_y = -P``.

These satisfy
``sqrt(pdf(t)^2 pdf(p)^2 - M_p^2) = M_t + cdf(p) pdf(t) M_y``, with both sides equal
to ``pdf(P) pdf(Q)/sqrt(1 + a^2)``. In the variables ``x = cdf(p)`` the function
``B(t, x, y) = M(t, inv_cdf(x), y)`` satisfies
``I(x) sqrt(pdf(t)^2 - B_x^2) = B_t + x pdf(t) B_y``.
"""

import equinox as eqx
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Float

from bobkovlab.gauss import Probability, _cdf, _inv_cdf, _iso, _pdf, _probability_value
from bobkovlab.slope import DomainPoint, rotated_coords, solve_slope
from bobkovlab.utils import arraylike_to_array


class BellmanEval(eqx.Module):
    """The Bellman function and its closed-form partials at a domain point.

    Attributes:
        a: The implicit slope.
        P: First rotated coordinate, ``(p - a t)/sqrt(1 + a^2)``.
        Q: Second rotated coordinate, ``(t + a p)/sqrt(1 + a^2)``.
        M: The value ``pdf(P) cdf(Q)``.
        M_t: Partial derivative in ``t``.
        M_p: Partial derivative in ``p``.
        M_y: Partial derivative in ``y``.
    """

    a: Float[Array, ""]
    P: Float[Array, ""]
    Q: Float[Array, ""]
    M: Float[Array, ""]
    M_t: Float[Array, ""]
    M_p: Float[Array, ""]
    M_y: Float[Array, ""]


class BSurfaceEval(eqx.Module):
    """``B(t, x, y) = M(t, inv_cdf(x), y)`` and its partials."""

    B: Float[Array, ""]
    B_t: Float[Array, ""]
    B_x: Float[Array, ""]
    B_y: Float[Array, ""]


def _bellman_at(t, p, a) -> BellmanEval:
    big_p, big_q = rotated_coords(t, p, a)
    norm = jnp.sqrt(1 + a**2)
    pdf_pq = _pdf(big_p) * _pdf(big_q)
    return BellmanEval(
        a=a,
        P=big_p,
        Q=big_q,
        M=_pdf(big_p) * _cdf(big_q),
        M_t=pdf_pq / norm + big_p * _pdf(t) * _cdf(p),
        M_p=a * pdf_pq / norm,
        M_y=-big_p,
    )


def bellman_value(
    pt: DomainPoint, tol: float = 1e-12, *, throw: bool = True
) -> BellmanEval:
    """Evaluate the Bellman function at a domain point.

    The slope is solved once, and the partial derivatives (closed forms in the slope)
    are included in the returned ``BellmanEval``.

    Args:
        pt: The domain point.
        tol: Slope solver tolerance. Defaults to 1e-12.
        throw: Passed to :func:`~bobkovlab.slope.solve_slope`. With False,
            unsolvable points give nan fields. Defaults to True.
    """
    solution = solve_slope(pt, tol, throw=throw)
    return _bellman_at(pt.t, pt.p, solution.a)


def bellman_partials(
    pt: DomainPoint, tol: float = 1e-12, *, throw: bool = True
) -> tuple[Array, Array, Array]:
    """The closed-form partials ``(M_t, M_p, M_y)`` at a domain point."""
    evaluated = bellman_value(pt, tol, throw=throw)
    return evaluated.M_t, evaluated.M_p, evaluated.M_y


def hjb_sides(evaluated: BellmanEval, t: ArrayLike, p: ArrayLike) -> tuple[Array, Array]:
    """The two sides of the HJB identity, without checking the radicand.

    Returns ``sqrt(pdf(t)^2 pdf(p)^2 - M_p^2)`` (nan for a negative radicand) and
    ``M_t + cdf(p) pdf(t) M_y``.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    p = arraylike_to_array(p, err_name="p", dtype=float)
    radicand = (_pdf(t) * _pdf(p)) ** 2 - evaluated.M_p**2
    lhs = jnp.sqrt(radicand)
    rhs = evaluated.M_t + _cdf(p) * _pdf(t) * evaluated.M_y
    return lhs, rhs


def hjb_residual(pt: DomainPoint, tol: float = 1e-12, *, throw: bool = True) -> Array:
    """Residual of the HJB identity at a domain point.

    Returns ``sqrt(pdf(t)^2 pdf(p)^2 - M_p^2) - (M_t + cdf(p) pdf(t) M_y)``, which
    vanishes for the Bellman function.

    Args:
        pt: The domain point.
        tol: Slope solver tolerance. Defaults to 1e-12.
        throw: Whether to raise on solver failures and negative radicands (the
            latter signals a numerical problem). Defaults to True.
    """
    evaluated = bellman_value(pt, tol, throw=throw)
    lhs, rhs = hjb_sides(evaluated, pt.t, pt.p)
    if throw:
        lhs = eqx.error_if(
            lhs,
            jnp.isnan(lhs) & ~jnp.isnan(evaluated.M_p),
            "Negative radicand in the HJB identity.",
        )
    return lhs - rhs


def b_surface(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    tol: float = 1e-12,
    *,
    throw: bool = True,
) -> BSurfaceEval:
    """Evaluate ``B(t, x, y) = M(t, inv_cdf(x), y)`` and its partials.

    ``B_t = M_t``, ``B_y = M_y`` and ``B_x = M_p/pdf(p)`` with ``p = inv_cdf(x)``.

    Args:
        t: Time coordinate.
        x: Probability strictly inside (0, 1).
        y: Running mass, strictly between 0 and ``cdf(t)``.
        tol: Slope solver tolerance. Defaults to 1e-12.
        throw: Passed to :func:`~bobkovlab.slope.solve_slope`. Defaults to True.
    """
    x = _probability_value(x, "x")
    p = _inv_cdf(x)
    evaluated = bellman_value(DomainPoint(t, p, y), tol, throw=throw)
    return BSurfaceEval(
        B=evaluated.M,
        B_t=evaluated.M_t,
        B_x=evaluated.M_p / _pdf(p),
        B_y=evaluated.M_y,
    )


def b_surface_residual(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    tol: float = 1e-12,
    *,
    throw: bool = True,
) -> Array:
    """Residual of ``I(x) sqrt(pdf(t)^2 - B_x^2) = B_t + x pdf(t) B_y``."""
    x = _probability_value(x, "x")
    t = arraylike_to_array(t, err_name="t", dtype=float)
    surface = b_surface(t, x, y, tol, throw=throw)
    lhs = _iso(x) * jnp.sqrt(_pdf(t) ** 2 - surface.B_x**2)
    return lhs - (surface.B_t + x * _pdf(t) * surface.B_y)
