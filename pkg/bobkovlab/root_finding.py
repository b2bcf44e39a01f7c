"""Bracketed root finding for scalar increasing functions.

The functions here are written with ``lax.while_loop`` so they can be used under
``jax.jit`` and ``jax.vmap``. Bracket expansion grows the interval geometrically
until it straddles the root, and Brent's method then combines inverse quadratic
interpolation, secant steps and bisection to converge superlinearly.
"""

from collections.abc import Callable

import equinox as eqx
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Real

from bobkovlab.utils import WhileResult, arraylike_to_array, max_steps_while_loop


class Bracket(eqx.Module):
    """An interval ``[lower, upper]`` with the function values at its ends.

    ``step`` is the length of the next move, should the interval not yet contain the
    root.
    """

    lower: Real[Array, ""]
    upper: Real[Array, ""]
    step: Real[Array, ""]
    fn_lower: Real[Array, ""]
    fn_upper: Real[Array, ""]

    @property
    def contains_root(self) -> Array:
        """Whether the interval contains the root of an increasing function.

        An exact zero at either end counts.
        """
        return (self.fn_lower <= 0) & (self.fn_upper >= 0)


def expand_bracket(
    fn: Callable,
    lower: ArrayLike,
    upper: ArrayLike,
    *,
    growth: float | int = 2,
    limit: float | int = jnp.inf,
    max_steps: int = 1000,
    throw: bool = True,
) -> WhileResult:
    """Move and grow ``[lower, upper]`` until it contains the root of ``fn``.

    While ``fn`` is positive at both ends the root lies below, and the interval
    becomes ``[lower - step, lower]``; while it is negative at both ends the interval
    becomes ``[upper, upper + step]``. The step starts at ``upper - lower`` and is
    multiplied by ``growth`` after each move, so the far end is reached
    geometrically while the near end tightens.

    Args:
        fn: A scalar increasing function.
        lower: Lower end of the initial interval, less than ``upper``.
        upper: Upper end of the initial interval.
        growth: Factor applied to the step after each move. Defaults to 2.
        limit: Expansion stops once either end exceeds ``limit`` in magnitude, in
            which case ``state.contains_root`` is False. Defaults to inf.
        max_steps: Maximum number of moves. Defaults to 1000.
        throw: Whether to error if ``max_steps`` is reached. Defaults to True.

    Returns:
        A ``WhileResult`` whose state is the final :class:`Bracket`.
    """
    lower = arraylike_to_array(lower, err_name="lower", dtype=float)
    upper = arraylike_to_array(upper, err_name="upper", dtype=float)
    lower = eqx.error_if(lower, lower >= upper, "Lower must be less than upper.")

    def cond_fn(bracket: Bracket):
        in_range = jnp.maximum(jnp.abs(bracket.lower), jnp.abs(bracket.upper)) <= limit
        return ~bracket.contains_root & in_range

    def body_fn(bracket: Bracket):
        downwards = bracket.fn_lower > 0
        new_end = jnp.where(
            downwards, bracket.lower - bracket.step, bracket.upper + bracket.step
        )
        fn_new = fn(new_end)
        return Bracket(
            lower=jnp.where(downwards, new_end, bracket.upper),
            upper=jnp.where(downwards, bracket.lower, new_end),
            step=bracket.step * growth,
            fn_lower=jnp.where(downwards, fn_new, bracket.fn_upper),
            fn_upper=jnp.where(downwards, bracket.fn_lower, fn_new),
        )

    init = Bracket(
        lower=lower,
        upper=upper,
        step=upper - lower,
        fn_lower=fn(lower),
        fn_upper=fn(upper),
    )
    return max_steps_while_loop(
        cond_fn, body_fn, init, max_steps=max_steps, throw=throw
    )


class BrentState(eqx.Module):
    """State for Brent's method.

    ``xcur`` is the best estimate, ``xblk`` the contrapoint (the root lies between
    them) and ``xpre`` the previous iterate.
    """

    xpre: Real[Array, ""]
    xcur: Real[Array, ""]
    xblk: Real[Array, ""]
    fpre: Real[Array, ""]
    fcur: Real[Array, ""]
    fblk: Real[Array, ""]
    spre: Real[Array, ""]
    scur: Real[Array, ""]


def _brent_prepare(state: BrentState) -> BrentState:
    """Update the contrapoint and ensure xcur is the best estimate."""
    sign_change = (
        (state.fpre != 0)
        & (state.fcur != 0)
        & (jnp.sign(state.fpre) != jnp.sign(state.fcur))
    )
    xblk = jnp.where(sign_change, state.xpre, state.xblk)
    fblk = jnp.where(sign_change, state.fpre, state.fblk)
    step = state.xcur - state.xpre
    spre = jnp.where(sign_change, step, state.spre)
    scur = jnp.where(sign_change, step, state.scur)

    swap = jnp.abs(fblk) < jnp.abs(state.fcur)
    return BrentState(
        xpre=jnp.where(swap, state.xcur, state.xpre),
        xcur=jnp.where(swap, xblk, state.xcur),
        xblk=jnp.where(swap, state.xcur, xblk),
        fpre=jnp.where(swap, state.fcur, state.fpre),
        fcur=jnp.where(swap, fblk, state.fcur),
        fblk=jnp.where(swap, state.fcur, fblk),
        spre=spre,
        scur=scur,
    )


def brent_search(
    fn: Callable,
    lower: ArrayLike,
    upper: ArrayLike,
    *,
    xtol: float = 1e-15,
    rtol: float = 4 * jnp.finfo(float).eps,
    max_steps: int = 200,
    throw: bool = True,
) -> tuple[Array, WhileResult]:
    """Brent's method for a root of ``fn`` in ``[lower, upper]``.

    The function values at ``lower`` and ``upper`` must differ in sign (or one of
    them be zero). Convergence is declared when the bracket half width falls below
    ``(xtol + rtol*|x|)/2``, or an exact root is found.

    Args:
        fn: Scalar continuous function.
        lower: One end of the bracket.
        upper: The other end of the bracket.
        xtol: Absolute tolerance on the root. Defaults to 1e-15.
        rtol: Relative tolerance on the root. Defaults to four machine epsilons.
        max_steps: Maximum number of iterations. Defaults to 200.
        throw: Whether to error if ``max_steps`` is reached. Defaults to True.

    Returns:
        A tuple, with the root and a ``WhileResult`` whose state holds the final
        bracket (``xcur`` and ``xblk``).
    """
    if xtol <= 0:
        raise ValueError("xtol must be positive.")
    lower = arraylike_to_array(lower, err_name="lower", dtype=float)
    upper = arraylike_to_array(upper, err_name="upper", dtype=float)
    f_lower, f_upper = fn(lower), fn(upper)
    # Start from the exact root if lower is one.
    lower_is_root = f_lower == 0
    lower, upper = (
        jnp.where(lower_is_root, upper, lower),
        jnp.where(lower_is_root, lower, upper),
    )
    f_lower, f_upper = (
        jnp.where(lower_is_root, f_upper, f_lower),
        jnp.where(lower_is_root, f_lower, f_upper),
    )
    init = BrentState(
        xpre=lower,
        xcur=upper,
        xblk=jnp.zeros_like(lower),
        fpre=f_lower,
        fcur=f_upper,
        fblk=jnp.zeros_like(f_lower),
        spre=jnp.zeros_like(lower),
        scur=jnp.zeros_like(lower),
    )

    def tolerance(state):
        return (xtol + rtol * jnp.abs(state.xcur)) / 2

    def cond_fn(state):
        # The loop starts from a state with xblk unset, handled by the first prepare.
        state = _brent_prepare(state)
        half_width = (state.xblk - state.xcur) / 2
        done = (state.fcur == 0) | (jnp.abs(half_width) < tolerance(state))
        return ~done

    def body_fn(state):
        state = _brent_prepare(state)
        delta = tolerance(state)
        sbis = (state.xblk - state.xcur) / 2

        # Secant when only two points are distinct, else inverse quadratic.
        secant = -state.fcur * (state.xcur - state.xpre) / (state.fcur - state.fpre)
        dpre = (state.fpre - state.fcur) / (state.xpre - state.xcur)
        dblk = (state.fblk - state.fcur) / (state.xblk - state.xcur)
        quadratic = (
            -state.fcur
            * (state.fblk * dblk - state.fpre * dpre)
            / (dblk * dpre * (state.fblk - state.fpre))
        )
        stry = jnp.where(state.xpre == state.xblk, secant, quadratic)

        try_interpolation = (jnp.abs(state.spre) > delta) & (
            jnp.abs(state.fcur) < jnp.abs(state.fpre)
        )
        accept = try_interpolation & (
            2 * jnp.abs(stry)
            < jnp.minimum(jnp.abs(state.spre), 3 * jnp.abs(sbis) - delta)
        )
        spre = jnp.where(accept, state.scur, sbis)
        scur = jnp.where(accept, stry, sbis)

        step = jnp.where(jnp.abs(scur) > delta, scur, jnp.where(sbis > 0, delta, -delta))
        xcur = state.xcur + step
        return BrentState(
            xpre=state.xcur,
            xcur=xcur,
            xblk=state.xblk,
            fpre=state.fcur,
            fcur=fn(xcur),
            fblk=state.fblk,
            spre=spre,
            scur=scur,
        )

    result = max_steps_while_loop(
        cond_fn,
        body_fn,
        init,
        max_steps=max_steps,
        throw=throw,
        error_context=" Check the function changes sign over the initial bracket.",
    )
    final = _brent_prepare(result.state)
    result = eqx.tree_at(lambda res: res.state, result, final)
    return final.xcur, result
