"""Discretization of the variational problem defining the Bellman function.

``B(t, x, y)`` is the infimum of ``int_{-inf}^t sqrt(I(f)^2 + f'^2) dgamma`` over
trajectories with ``f(t) = x`` and ``int_{-inf}^t f dgamma = y``. The line is truncated
at ``-t_low`` and both the cost and the running constraint are discretized with the
midpoint rule on a collocation grid.
"""

import equinox as eqx
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Float
from paramax import AbstractUnwrappable, Parameterize, non_trainable, unwrap

from bobkovlab.functions import _safe_iso
from bobkovlab.gauss import _cdf, _inv_cdf, _pdf, _probability_value
from bobkovlab.utils import arraylike_to_array

MIN_NODES = 64


class CollocationGrid(eqx.Module):
    """Strictly increasing collocation nodes, the last of which is the query time.

    Args:
        s_values: The nodes, at least ``MIN_NODES`` of them.
    """

    s_values: Float[Array, " n"]

    def __init__(self, s_values: ArrayLike):
        s_values = arraylike_to_array(s_values, err_name="s_values", dtype=float)
        if s_values.ndim != 1:
            raise ValueError("s_values must be one dimensional.")
        if s_values.shape[0] < MIN_NODES:
            raise ValueError(
                f"Collocation grids need at least {MIN_NODES} nodes, got "
                f"{s_values.shape[0]}."
            )
        self.s_values = eqx.error_if(
            s_values,
            jnp.any(jnp.diff(s_values) <= 0),
            "Collocation nodes must be strictly increasing.",
        )

    @classmethod
    def uniform(cls, t: ArrayLike, n: int, *, t_low: float | int = 8):
        """Uniform grid of ``n`` nodes on ``[-t_low, t]``."""
        t = arraylike_to_array(t, err_name="t", dtype=float)
        return cls(jnp.linspace(-t_low, t, n))

    @property
    def n(self) -> int:
        return self.s_values.shape[0]

    @property
    def t(self) -> Array:
        return self.s_values[-1]

    @property
    def widths(self) -> Array:
        return jnp.diff(self.s_values)

    @property
    def midpoints(self) -> Array:
        return (self.s_values[1:] + self.s_values[:-1]) / 2

    @property
    def weights(self) -> Array:
        """Midpoint rule weights ``pdf(s_mid) * width`` for the Gaussian measure."""
        return _pdf(self.midpoints) * self.widths

    def refined(self) -> "CollocationGrid":
        """The grid with the midpoint of each interval inserted."""
        interleaved = jnp.stack([self.s_values[:-1], self.midpoints], axis=1)
        return CollocationGrid(
            jnp.concatenate([interleaved.reshape(-1), self.s_values[-1:]])
        )


class ControlTrajectory(eqx.Module):
    """Values of a trajectory at the collocation nodes.

    The free values are parameterized as ``cdf(z)``, keeping them in (0, 1) without
    inequality constraints, and the endpoint is fixed (non-trainable).

    Args:
        z: Probits of the values at all nodes but the last.
        x_end: The fixed value at the last node.
    """

    free: Array | AbstractUnwrappable[Array]
    end: Array | AbstractUnwrappable[Array]

    def __init__(self, z: ArrayLike, x_end: ArrayLike):
        z = arraylike_to_array(z, err_name="z", dtype=float)
        if z.ndim != 1:
            raise ValueError("z must be one dimensional.")
        self.free = Parameterize(_cdf, z)
        self.end = non_trainable(_probability_value(x_end, "x_end"))

    @classmethod
    def from_values(cls, x_values: ArrayLike):
        """Construct from values in (0, 1) at every node."""
        x_values = arraylike_to_array(x_values, err_name="x_values", dtype=float)
        return cls(_inv_cdf(x_values[:-1]), x_values[-1])

    @property
    def x_values(self) -> Array:
        """The values at every node, including the fixed endpoint."""
        unwrapped = unwrap(self)
        return jnp.concatenate([unwrapped.free, unwrapped.end[None]])


def _check_sizes(traj: ControlTrajectory, grid: CollocationGrid):
    x_values = traj.x_values
    if x_values.shape[0] != grid.n:
        raise ValueError(
            f"The trajectory has {x_values.shape[0]} values but the grid has "
            f"{grid.n} nodes."
        )
    return x_values


def discretized_cost(traj: ControlTrajectory, grid: CollocationGrid) -> Array:
    """Midpoint rule for ``int sqrt(I(f)^2 + f'^2) dgamma`` on the grid.

    ``sum_i sqrt(I(x_mid)^2 + ((x[i+1] - x[i])/width)^2) pdf(s_mid) width``.
    """
    x_values = _check_sizes(traj, grid)
    x_mid = (x_values[1:] + x_values[:-1]) / 2
    slopes = jnp.diff(x_values) / grid.widths
    return jnp.sum(jnp.sqrt(_safe_iso(x_mid) ** 2 + slopes**2) * grid.weights)


def discretized_constraint(traj: ControlTrajectory, grid: CollocationGrid) -> Array:
    """Midpoint rule for the running mass ``int f dgamma`` on the grid."""
    x_values = _check_sizes(traj, grid)
    x_mid = (x_values[1:] + x_values[:-1]) / 2
    return jnp.sum(x_mid * grid.weights)
