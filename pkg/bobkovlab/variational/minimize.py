"""Augmented Lagrangian minimization of the discretized variational problem."""

import logging
from typing import Literal

import equinox as eqx
import jax
import jax.numpy as jnp
import optax
import paramax
from jaxtyping import Array, ArrayLike, Bool, Float, Int, PyTree
from tqdm import tqdm

from bobkovlab.gauss import Probability, _inv_cdf, _probability_value
from bobkovlab.slope import DomainPoint
from bobkovlab.utils import arraylike_to_array, max_steps_while_loop
from bobkovlab.variational.candidate import analytic_candidate, sample_candidate
from bobkovlab.variational.collocation import (
    CollocationGrid,
    ControlTrajectory,
    discretized_constraint,
    discretized_cost,
)

logger = logging.getLogger(__name__)


class OptimizationResult(eqx.Module):
    """Result of :func:`constrained_minimize`.

    Attributes:
        value: The discretized cost of the trajectory.
        trajectory: The optimized trajectory.
        constraint_residual: ``|discretized_constraint - y|``.
        gradient_norm: Norm of the gradient of the augmented Lagrangian with respect
            to the free probits, at the final inner iteration.
        converged: Whether both the constraint and gradient tolerances were met.
        outer_iterations: Number of augmented Lagrangian iterations used.
    """

    value: Float[Array, ""]
    trajectory: ControlTrajectory
    constraint_residual: Float[Array, ""]
    gradient_norm: Float[Array, ""]
    converged: Bool[Array, ""]
    outer_iterations: Int[Array, ""]


def _is_non_trainable(leaf):
    return isinstance(leaf, paramax.NonTrainable)


def _augmented_lagrangian(params, static, grid, y, multiplier, penalty):
    traj = eqx.combine(params, static)
    violation = discretized_constraint(traj, grid) - y
    cost = discretized_cost(traj, grid)
    return cost + multiplier * violation + penalty / 2 * violation**2


def _tree_norm(tree: PyTree):
    return jnp.sqrt(sum(jnp.sum(leaf**2) for leaf in jax.tree.leaves(tree)))


@eqx.filter_jit
def _inner_minimize(
    params: PyTree,
    static: PyTree,
    grid: CollocationGrid,
    y: Array,
    multiplier: Array,
    penalty: Array,
    *,
    max_steps: int,
    gradient_tol: float,
):
    """Minimize the augmented Lagrangian over the free probits with L-BFGS."""

    def objective(params):
        return _augmented_lagrangian(params, static, grid, y, multiplier, penalty)

    optimizer = optax.lbfgs()
    value_and_grad = optax.value_and_grad_from_state(objective)

    def cond_fn(carry):
        _, state = carry
        count = optax.tree_utils.tree_get(state, "count")
        grad = optax.tree_utils.tree_get(state, "grad")
        return (count == 0) | (_tree_norm(grad) >= gradient_tol)

    def body_fn(carry):
        params, state = carry
        value, grad = value_and_grad(params, state=state)
        updates, state = optimizer.update(
            grad, state, params, value=value, grad=grad, value_fn=objective
        )
        return optax.apply_updates(params, updates), state

    result = max_steps_while_loop(
        cond_fn,
        body_fn,
        (params, optimizer.init(params)),
        max_steps=max_steps,
        throw=False,
    )
    params, state = result.state
    return params, _tree_norm(optax.tree_utils.tree_get(state, "grad"))


def constant_initialization(
    x_end: ArrayLike | Probability, y: ArrayLike, grid: CollocationGrid
) -> ControlTrajectory:
    """The trajectory constant on all free nodes, satisfying the discrete constraint.

    The constant is clipped to ``[1e-6, 1 - 1e-6]`` when the constraint cannot be
    met by a constant in (0, 1).
    """
    x_end = _probability_value(x_end, "x_end")
    y = arraylike_to_array(y, err_name="y", dtype=float)
    weights = grid.weights
    # The last interval averages the free constant with the fixed endpoint.
    free_weight = jnp.sum(weights[:-1]) + weights[-1] / 2
    constant = (y - x_end * weights[-1] / 2) / free_weight
    constant = jnp.clip(constant, 1e-6, 1 - 1e-6)
    return ControlTrajectory(jnp.full(grid.n - 1, _inv_cdf(constant)), x_end)


def constrained_minimize(
    t: ArrayLike,
    x_end: ArrayLike | Probability,
    y: ArrayLike,
    grid: CollocationGrid,
    *,
    init: Literal["constant", "candidate"] | ControlTrajectory = "constant",
    constraint_tol: float = 1e-8,
    gradient_tol: float = 1e-6,
    max_outer: int = 30,
    max_inner: int = 2000,
    initial_penalty: float = 1e2,
    show_progress: bool = False,
) -> OptimizationResult:
    """Minimize the discretized cost subject to the endpoint and running constraints.

    The endpoint ``x_end`` is fixed, and the running constraint
    ``discretized_constraint = y`` is enforced by an augmented Lagrangian. Each outer
    iteration minimizes ``cost + multiplier * c + penalty/2 * c^2`` (with ``c`` the
    constraint violation) over the free probits with L-BFGS, then updates
    ``multiplier += penalty * c``. The penalty is multiplied by 10 whenever ``|c|``
    fails to decrease by a factor of 4.

    Args:
        t: Query time, which must equal the last grid node.
        x_end: Prescribed endpoint value in (0, 1).
        y: Prescribed running mass.
        grid: The collocation grid.
        init: ``"constant"`` for the constant feasible initialization,
            ``"candidate"`` to start at the sampled analytic candidate, or an
            explicit trajectory. Defaults to ``"constant"``.
        constraint_tol: Tolerance on ``|c|``. Defaults to 1e-8.
        gradient_tol: Tolerance on the gradient norm. Defaults to 1e-6.
        max_outer: Maximum number of outer iterations. Defaults to 30.
        max_inner: Maximum number of L-BFGS iterations per outer iteration.
            Defaults to 2000.
        initial_penalty: Initial quadratic penalty. Defaults to 100.
        show_progress: Whether to show a progress bar. Defaults to False.

    Returns:
        An ``OptimizationResult``. Non-convergence is reported through
        ``converged``, with the diagnostics of the last iterate.
    """
    t = arraylike_to_array(t, err_name="t", dtype=float)
    x_end = _probability_value(x_end, "x_end")
    y = arraylike_to_array(y, err_name="y", dtype=float)
    if max_outer < 1:
        raise ValueError("max_outer must be at least 1.")
    if not jnp.isclose(grid.t, t, rtol=0, atol=1e-12):
        raise ValueError("The last grid node must equal t.")
    if not DomainPoint(t, _inv_cdf(x_end), y).in_domain:
        raise ValueError("The query is outside the domain 0 < y < cdf(t).")

    if isinstance(init, ControlTrajectory):
        traj = init
    elif init == "constant":
        traj = constant_initialization(x_end, y, grid)
    elif init == "candidate":
        a, b = analytic_candidate(t, x_end, y)
        traj = sample_candidate(a, b, grid, x_end)
    else:
        raise ValueError(f"Unknown initialization {init!r}.")

    params, static = eqx.partition(
        traj, eqx.is_inexact_array, is_leaf=_is_non_trainable
    )
    multiplier = jnp.zeros(())
    penalty = jnp.asarray(initial_penalty, dtype=float)
    previous_violation = jnp.inf
    violation = gradient_norm = jnp.asarray(jnp.inf)
    converged = False

    loop = tqdm(range(max_outer), disable=not show_progress)
    for outer in loop:
        params, gradient_norm = _inner_minimize(
            params,
            static,
            grid,
            y,
            multiplier,
            penalty,
            max_steps=max_inner,
            gradient_tol=gradient_tol,
        )
        violation = discretized_constraint(eqx.combine(params, static), grid) - y
        logger.debug(
            "Outer iteration %d: violation %.3e, gradient norm %.3e, penalty %.1e.",
            outer,
            violation,
            gradient_norm,
            penalty,
        )
        loop.set_postfix({"violation": float(violation)})
        converged = bool(
            (jnp.abs(violation) <= constraint_tol) & (gradient_norm <= gradient_tol)
        )
        if converged:
            break
        multiplier = multiplier + penalty * violation
        if jnp.abs(violation) > jnp.abs(previous_violation) / 4:
            penalty = penalty * 10
        previous_violation = violation

    traj = eqx.combine(params, static)
    if not converged:
        logger.warning(
            "Augmented Lagrangian did not converge in %d iterations: violation %.3e, "
            "gradient norm %.3e.",
            max_outer,
            violation,
            gradient_norm,
        )
    return OptimizationResult(
        value=discretized_cost(traj, grid),
        trajectory=traj,
        constraint_residual=jnp.abs(violation),
        gradient_norm=gradient_norm,
        converged=jnp.asarray(converged),
        outer_iterations=jnp.asarray(outer + 1),
    )
