"""Seeded random corpora of test functions and domain points.

One dimensional functions are drawn from families with a clear separation between
optimizers of Bobkov's inequality (probit-affine functions and constants) and
non-optimizers (probits with a curvature bounded away from zero, blends of two
probit-affine functions with distinct slopes, and tabulated copies of these).
Probits are bounded by 4 in magnitude on ``[-8.5, 8.5]``.
"""

import jax.numpy as jnp
import jax.random as jr
from jaxtyping import PRNGKeyArray

from bobkovlab.functions import (
    AbstractProbit2D,
    AbstractTestFunction1D,
    Blend,
    Constant,
    ProbitAffine2D,
    ProbitPoly,
    ProbitSeparable,
    Tabulated,
)
from bobkovlab.slope import DomainPoint

FAMILIES_1D = ("affine", "constant", "curved", "blend", "tabulated")
TABULATED_KNOTS = jnp.linspace(-8.5, 8.5, 69)


def _uniform(key, low, high, shape=()):
    return jr.uniform(key, shape, minval=low, maxval=high)


def _random_sign(key):
    return jnp.where(jr.bernoulli(key), 1.0, -1.0)


def _draw_affine(key):
    slope_key, intercept_key = jr.split(key)
    return ProbitPoly(
        jnp.stack([_uniform(intercept_key, -0.5, 0.5), _uniform(slope_key, -0.4, 0.4)])
    )


def _draw_constant(key):
    return Constant(_uniform(key, 0.05, 0.95))


def _draw_curved(key):
    c0, c1, c2, sign, c3 = jr.split(key, 5)
    return ProbitPoly(
        jnp.stack(
            [
                _uniform(c0, -0.5, 0.5),
                _uniform(c1, -0.2, 0.2),
                _random_sign(sign) * _uniform(c2, 0.01, 0.02),
                _uniform(c3, -5e-4, 5e-4),
            ]
        )
    )


def _draw_blend(key):
    weight_key, slope_key, gap_key, intercept_key = jr.split(key, 4)
    w = _uniform(weight_key, 0.3, 0.7)
    first_slope = _uniform(slope_key, -0.4, -0.1)
    slopes = jnp.stack([first_slope, first_slope + _uniform(gap_key, 0.3, 0.5)])
    return Blend(
        jnp.stack([w, 1 - w]), slopes, _uniform(intercept_key, -0.5, 0.5, (2,))
    )


def _draw_tabulated(key):
    return Tabulated.from_function(_draw_curved(key), TABULATED_KNOTS)


_DRAWS = {
    "affine": _draw_affine,
    "constant": _draw_constant,
    "curved": _draw_curved,
    "blend": _draw_blend,
    "tabulated": _draw_tabulated,
}


def random_test_functions(
    key: PRNGKeyArray,
    n: int,
    families: tuple[str, ...] = FAMILIES_1D,
) -> list[tuple[str, AbstractTestFunction1D]]:
    """Draw ``n`` one dimensional test functions, cycling through the families.

    Args:
        key: Jax random key.
        n: Number of functions.
        families: Families to cycle through, a subset of ``FAMILIES_1D``. Defaults
            to all families.

    Returns:
        A list of ``(identifier, function)`` pairs, with identifiers such as
        ``"curved-007"``, numbered in draw order.
    """
    unknown = set(families) - set(FAMILIES_1D)
    if unknown:
        raise ValueError(f"Unknown families {sorted(unknown)}.")
    if n < 0:
        raise ValueError("n must be non-negative.")
    corpus = []
    for i, subkey in enumerate(jr.split(key, n)):
        family = families[i % len(families)]
        corpus.append((f"{family}-{i:03d}", _DRAWS[family](subkey)))
    return corpus


def is_optimizer_family(identifier: str) -> bool:
    """Whether a corpus identifier belongs to an optimizer family."""
    return identifier.split("-")[0] in ("affine", "constant")


def random_test_functions_2d(
    key: PRNGKeyArray, n: int
) -> list[tuple[str, AbstractProbit2D]]:
    """Draw ``n`` two dimensional test functions, alternating probit-affine and
    probit-separable functions.
    """
    corpus = []
    for i, subkey in enumerate(jr.split(key, n)):
        keys = jr.split(subkey, 5)
        if i % 2 == 0:
            function = ProbitAffine2D(
                _uniform(keys[0], -0.8, 0.8),
                _uniform(keys[1], -0.8, 0.8),
                _uniform(keys[2], -0.5, 0.5),
            )
            corpus.append((f"probit-affine-{i:03d}", function))
        else:
            function = ProbitSeparable(
                jnp.stack([_uniform(keys[0], 0.3, 0.6), _uniform(keys[1], -0.03, 0.03)]),
                jnp.stack(
                    [
                        _uniform(keys[2], -0.5, 0.5),
                        _uniform(keys[3], -0.3, 0.3),
                        _uniform(keys[4], -0.02, 0.02),
                    ]
                ),
            )
            corpus.append((f"probit-separable-{i:03d}", function))
    return corpus


def random_domain_points(
    key: PRNGKeyArray,
    n: int,
    *,
    t_range: tuple[float, float] = (-2.0, 2.0),
    p_range: tuple[float, float] = (-2.0, 2.0),
    lam_range: tuple[float, float] = (0.1, 0.9),
) -> DomainPoint:
    """Draw ``n`` domain points with ``y = lam * cdf(t)``, batched along axis 0.

    Args:
        key: Jax random key.
        n: Number of points.
        t_range: Range of ``t``. Defaults to (-2.0, 2.0).
        p_range: Range of ``p``. Defaults to (-2.0, 2.0).
        lam_range: Range of the mass fraction ``lam``. Defaults to (0.1, 0.9).
    """
    t_key, p_key, lam_key = jr.split(key, 3)
    return DomainPoint.from_fraction(
        _uniform(t_key, *t_range, (n,)),
        _uniform(p_key, *p_range, (n,)),
        _uniform(lam_key, *lam_range, (n,)),
    )
