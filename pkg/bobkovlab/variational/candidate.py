"""The probit-affine trajectory attaining the Bellman function."""

import jax.numpy as jnp
from jaxtyping import Array, ArrayLike

from bobkovlab.gauss import Probability, _cdf, _inv_cdf, _probability_value
from bobkovlab.slope import DomainPoint, solve_slope
from bobkovlab.utils import arraylike_to_array
from bobkovlab.variational.collocation import CollocationGrid, ControlTrajectory


def analytic_candidate(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    tol: float = 1e-12,
    *,
    throw: bool = True,
) -> tuple[Array, Array]:
    """Parameters ``(a, b)`` of the optimal trajectory ``f(s) = cdf(a s + b)``.

    ``a`` is the implicit slope at ``(t, inv_cdf(x), y)`` and ``b = inv_cdf(x) - a t``,
    so that ``f(t) = x`` and ``int_{-inf}^t f dgamma = y``.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    p = _inv_cdf(_probability_value(x, "x"))
    a = solve_slope(DomainPoint(t, p, y), tol, throw=throw).a
    return a, p - a * t


def sample_candidate(
    a: ArrayLike,
    b: ArrayLike,
    grid: CollocationGrid,
    x_end: ArrayLike | None = None,
) -> ControlTrajectory:
    """Sample ``cdf(a s + b)`` at the collocation nodes.

    Args:
        a: Slope of the probit.
        b: Intercept of the probit.
        grid: The collocation grid.
        x_end: If given, replaces the value at the last node (used to start an
            optimization exactly at the prescribed endpoint).
    """
    z = jnp.asarray(a, float) * grid.s_values + jnp.asarray(b, float)
    return ControlTrajectory(z[:-1], _cdf(z[-1]) if x_end is None else x_end)
