"""Certification of the Bellman function against the discretized variational problem.

The collocation optimum and the cost of the sampled analytic candidate are both
compared against ``B(t, x, y)``. The comparison tolerance is derived from the
refinement error of the grid, estimated from the candidate cost on the grid and on
the grid with every interval halved.
"""

import logging

import equinox as eqx
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Bool, Float

from bobkovlab.bellman import b_surface
from bobkovlab.gauss import Probability, _probability_value
from bobkovlab.utils import arraylike_to_array
from bobkovlab.variational.candidate import analytic_candidate, sample_candidate
from bobkovlab.variational.collocation import CollocationGrid, discretized_cost
from bobkovlab.variational.minimize import constrained_minimize

logger = logging.getLogger(__name__)

# Gaps up to this many refinement errors (plus an absolute floor) are accepted.
REFINEMENT_FACTOR = 2
GAP_FLOOR = 1e-6


class CertificationReport(eqx.Module):
    """Outcome of :func:`certify_value`.

    Attributes:
        optimum: The collocation optimum.
        candidate_cost: The discretized cost of the sampled analytic candidate.
        bellman: The Bellman function value it is certified against.
        optimum_gap: ``|optimum - bellman|``.
        candidate_gap: ``|candidate_cost - bellman|``.
        refinement_error: The estimated discretization error of the grid.
        tolerance: The tolerance the gaps were checked against.
        converged: Whether the optimizer converged.
        certified: Whether the optimizer converged and both gaps are within the
            tolerance.
    """

    optimum: Float[Array, ""]
    candidate_cost: Float[Array, ""]
    bellman: Float[Array, ""]
    optimum_gap: Float[Array, ""]
    candidate_gap: Float[Array, ""]
    refinement_error: Float[Array, ""]
    tolerance: Float[Array, ""]
    converged: Bool[Array, ""]
    certified: Bool[Array, ""]


def refinement_error(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    grid: CollocationGrid,
) -> Array:
    """Richardson estimate of the discretization error of the candidate cost.

    The midpoint rule is second order, so with ``c_1`` and ``c_2`` the candidate
    costs on the grid and on its refinement, the error on the grid is estimated by
    ``4/3 |c_1 - c_2|``.
    """
    a, b = analytic_candidate(t, x, y)
    coarse = discretized_cost(sample_candidate(a, b, grid), grid)
    fine_grid = grid.refined()
    fine = discretized_cost(sample_candidate(a, b, fine_grid), fine_grid)
    return 4 / 3 * jnp.abs(coarse - fine)


def certify_value(
    t: ArrayLike,
    x: ArrayLike | Probability,
    y: ArrayLike,
    grid: CollocationGrid,
    *,
    init: str = "constant",
    bellman_offset: float | int = 0,
    constraint_tol: float = 1e-8,
    gradient_tol: float = 1e-6,
    show_progress: bool = False,
) -> CertificationReport:
    """Certify ``B(t, x, y)`` as the value of the variational problem on a grid.

    Certification requires a converged collocation optimum, and both the optimum and
    the candidate cost within ``2 * refinement_error + 1e-6`` of ``B``. Failure is
    reported, never raised.

    Args:
        t: Query time, equal to the last grid node.
        x: Endpoint value in (0, 1).
        y: Running mass.
        grid: The collocation grid.
        init: Initialization passed to :func:`constrained_minimize`. Defaults to
            ``"constant"``.
        bellman_offset: Added to ``B`` before comparison. Non-zero offsets are only
            useful to check that certification can fail. Defaults to 0.
        constraint_tol: Passed to :func:`constrained_minimize`. Defaults to 1e-8.
        gradient_tol: Passed to :func:`constrained_minimize`. Defaults to 1e-6.
        show_progress: Whether to show a progress bar. Defaults to False.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    x = _probability_value(x, "x")
    y = arraylike_to_array(y, err_name="y", dtype=float)
    bellman = b_surface(t, x, y).B + bellman_offset

    a, b = analytic_candidate(t, x, y)
    candidate_cost = discretized_cost(sample_candidate(a, b, grid), grid)
    error = refinement_error(t, x, y, grid)
    tolerance = REFINEMENT_FACTOR * error + GAP_FLOOR

    result = constrained_minimize(
        t,
        x,
        y,
        grid,
        init=init,
        constraint_tol=constraint_tol,
        gradient_tol=gradient_tol,
        show_progress=show_progress,
    )
    optimum_gap = jnp.abs(result.value - bellman)
    candidate_gap = jnp.abs(candidate_cost - bellman)
    certified = result.converged & (optimum_gap <= tolerance) & (
        candidate_gap <= tolerance
    )
    logger.info(
        "Certification %s: optimum gap %.3e, candidate gap %.3e, tolerance %.3e.",
        "passed" if certified else "failed",
        optimum_gap,
        candidate_gap,
        tolerance,
    )
    return CertificationReport(
        optimum=result.value,
        candidate_cost=candidate_cost,
        bellman=bellman,
        optimum_gap=optimum_gap,
        candidate_gap=candidate_gap,
        refinement_error=error,
        tolerance=tolerance,
        converged=result.converged,
        certified=certified,
    )
