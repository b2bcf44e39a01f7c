"""Scalar Gaussian special functions.

The density :func:`pdf`, distribution function :func:`cdf`, its inverse
:func:`inv_cdf` and the Gaussian isoperimetric profile
:func:`iso_profile`, ``I(x) = pdf(inv_cdf(x))``. All functions are elementwise and
can be used under ``jax.jit`` and ``jax.vmap``.

The private (underscore) variants skip input validation, and are used in inner loops
where the arguments are known to be valid.
"""

import math

import equinox as eqx
import jax
import jax.numpy as jnp
from jax.scipy.special import erfc
from jaxtyping import Array, ArrayLike

from bobkovlab.utils import arraylike_to_array

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
_ISO_BOUNDARY = 1e-15

# Wichura's AS241 (PPND16) coefficients, highest order first for jnp.polyval.
_CENTRAL_NUM = jnp.array(
    [
        2.5090809287301226727e3,
        3.3430575583588128105e4,
        6.7265770927008700853e4,
        4.5921953931549871457e4,
        1.3731693765509461125e4,
        1.9715909503065514427e3,
        1.3314166789178437745e2,
        3.3871328727963666080e0,
    ]
)
_CENTRAL_DEN = jnp.array(
    [
        5.2264952788528545610e3,
        2.8729085735721942674e4,
        3.9307895800092710610e4,
        2.1213794301586595867e4,
        5.3941960214247511077e3,
        6.8718700749205790830e2,
        4.2313330701600911252e1,
        1.0,
    ]
)
_INTERMEDIATE_NUM = jnp.array(
    [
        7.74545014278341407640e-4,
        2.27238449892691845833e-2,
        2.41780725177450611770e-1,
        1.27045825245236838258e0,
        3.64784832476320460504e0,
        5.76949722146069140550e0,
        4.63033784615654529590e0,
        1.42343711074968357734e0,
    ]
)
_INTERMEDIATE_DEN = jnp.array(
    [
        1.05075007164441684324e-9,
        5.47593808499534494600e-4,
        1.51986665636164571966e-2,
        1.48103976427480074590e-1,
        6.89767334985100004550e-1,
        1.67638483018380384940e0,
        2.05319162663775882187e0,
        1.0,
    ]
)
_TAIL_NUM = jnp.array(
    [
        2.01033439929228813265e-7,
        2.71155556874348757815e-5,
        1.24266094738807843860e-3,
        2.65321895265761230930e-2,
        2.96560571828504891230e-1,
        1.78482653991729133580e0,
        5.46378491116411436990e0,
        6.65790464350110377720e0,
    ]
)
_TAIL_DEN = jnp.array(
    [
        2.04426310338993978564e-15,
        1.42151175831644588870e-7,
        1.84631831751005468180e-5,
        7.86869131145613259100e-4,
        1.48753612908506148525e-2,
        1.36929880922735805310e-1,
        5.99832206555887937690e-1,
        1.0,
    ]
)


class Probability(eqx.Module):
    """A value strictly inside the open unit interval.

    Construction checks ``0 < value < 1``, raising an ``EquinoxRuntimeError``
    otherwise (including under ``jax.jit``).

    Args:
        value: The probability.
    """

    value: Array

    def __init__(self, value: ArrayLike):
        value = arraylike_to_array(value, err_name="value", dtype=float)
        self.value = eqx.error_if(
            value,
            ~((value > 0) & (value < 1)),
            "Probability must lie strictly inside (0, 1).",
        )


def _probability_value(x: ArrayLike | Probability, name: str) -> Array:
    if isinstance(x, Probability):
        return x.value
    x = arraylike_to_array(x, err_name=name, dtype=float)
    return eqx.error_if(
        x, ~((x > 0) & (x < 1)), f"{name} must lie strictly inside (0, 1)."
    )


def _check_finite(z: ArrayLike, name: str = "z") -> Array:
    z = arraylike_to_array(z, err_name=name, dtype=float)
    return eqx.error_if(z, ~jnp.isfinite(z), f"{name} must be finite.")


def _pdf(z):
    return jnp.exp(-0.5 * z**2 - _LOG_SQRT_2PI)


def _cdf(z):
    # The complementary form on each side keeps relative accuracy in the tails.
    lower = 0.5 * erfc(-z / _SQRT2)
    upper = 1 - 0.5 * erfc(z / _SQRT2)
    return jnp.where(z < 0, lower, upper)


def _inv_cdf_rational(p):
    q = p - 0.5
    r_central = 0.180625 - q * q
    central = (
        q * jnp.polyval(_CENTRAL_NUM, r_central) / jnp.polyval(_CENTRAL_DEN, r_central)
    )
    r = jnp.sqrt(-jnp.log(jnp.minimum(p, 1 - p)))
    intermediate = jnp.polyval(_INTERMEDIATE_NUM, r - 1.6) / jnp.polyval(
        _INTERMEDIATE_DEN, r - 1.6
    )
    tail = jnp.polyval(_TAIL_NUM, r - 5.0) / jnp.polyval(_TAIL_DEN, r - 5.0)
    outer = jnp.where(r <= 5.0, intermediate, tail)
    outer = jnp.where(q < 0, -outer, outer)
    return jnp.where(jnp.abs(q) <= 0.425, central, outer)


@jax.custom_jvp
def _inv_cdf(p):
    z = _inv_cdf_rational(p)
    # One Newton correction, evaluated on the side with the smaller tail mass.
    residual = jnp.where(z < 0, _cdf(z) - p, (1 - p) - 0.5 * erfc(z / _SQRT2))
    return z - residual / _pdf(z)


@_inv_cdf.defjvp
def _inv_cdf_jvp(primals, tangents):
    (p,), (p_dot,) = primals, tangents
    z = _inv_cdf(p)
    return z, p_dot / _pdf(z)


def _iso(x):
    return _pdf(_inv_cdf(x))


def pdf(z: ArrayLike) -> Array:
    """Standard normal density ``exp(-z**2/2)/sqrt(2*pi)``.

    Args:
        z: Finite input.
    """
    return _pdf(_check_finite(z))


def cdf(z: ArrayLike) -> Array:
    """Standard normal distribution function.

    Uses the complementary error function on both sides of zero, so the result has
    full relative accuracy in the lower tail.

    Args:
        z: Finite input.
    """
    return _cdf(_check_finite(z))


def inv_cdf(p: ArrayLike | Probability) -> Array:
    """Inverse of the standard normal distribution function.

    A rational initial approximation (Wichura's AS241) refined by one Newton step,
    so that ``cdf(inv_cdf(p))`` reproduces ``p`` to a relative error of about 1e-13.

    Args:
        p: Probability strictly inside (0, 1).
    """
    return _inv_cdf(_probability_value(p, "p"))


def iso_profile(x: ArrayLike | Probability) -> Array:
    """The Gaussian isoperimetric profile ``I(x) = pdf(inv_cdf(x))``.

    Inputs closer than 1e-15 to either boundary are rejected rather than clamped.

    Args:
        x: Probability strictly inside (0, 1).
    """
    x = _probability_value(x, "x")
    x = eqx.error_if(
        x,
        jnp.minimum(x, 1 - x) < _ISO_BOUNDARY,
        "x is too close to the boundary of (0, 1) to evaluate the isoperimetric "
        "profile.",
    )
    # pdf is even, so evaluating at the smaller of x and 1-x gives exact symmetry.
    return _iso(jnp.minimum(x, 1 - x))
