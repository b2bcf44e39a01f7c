"""Gaussian-weighted integration and the truncated half-space mass.

Integrals are computed by adaptive Gauss-Kronrod (G7, K15) panels. The panel with
the largest error estimate is bisected until the summed estimate falls below the
tolerance, or until ``max_subdivisions`` panels are in use. The whole procedure is a
``lax.while_loop`` over fixed size panel arrays, so integrals can be used inside
``jax.jit`` and ``jax.vmap``, and nested (the two dimensional rule integrates an
inner adaptive integral).

Integrands may return arrays, in which case all components share the panel
refinement. Integrands that are equinox modules (or ``eqx.Partial`` objects) with
array fields avoid recompilation when only their parameters change.
"""

import math
from collections.abc import Callable

import equinox as eqx
import jax
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Bool, Float, Int

from bobkovlab.gauss import _cdf, _pdf
from bobkovlab.utils import arraylike_to_array, as_float_arrays, max_steps_while_loop

_XGK = (
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
)
_WGK = (
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
)
_WGK_CENTRE = 0.209482141084727828012999174891714
_WG = (
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
)
_WG_CENTRE = 0.417959183673469387755102040816327

_KRONROD_NODES = jnp.array([-x for x in _XGK] + [0.0] + list(reversed(_XGK)))
_KRONROD_WEIGHTS = jnp.array(list(_WGK) + [_WGK_CENTRE] + list(reversed(_WGK)))
# The Gauss nodes are every second Kronrod node.
_GAUSS_WEIGHTS = jnp.array(
    [0, _WG[0], 0, _WG[1], 0, _WG[2], 0, _WG_CENTRE, 0, _WG[2], 0, _WG[1], 0, _WG[0], 0]
)

# Half Gauss-Legendre rule of order 20 on [0, 2], for the bivariate normal.
_GL_HALF_NODES = jnp.array(
    [
        0.9931285991850949,
        0.9639719272779138,
        0.9122344282513259,
        0.8391169718222188,
        0.7463319064601508,
        0.6360536807265150,
        0.5108670019508271,
        0.3737060887154196,
        0.2277858511416451,
        0.07652652113349733,
    ]
)
_GL_HALF_WEIGHTS = jnp.array(
    [
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ]
)
_GL_NODES = jnp.concatenate([1 - _GL_HALF_NODES, 1 + _GL_HALF_NODES])
_GL_WEIGHTS = jnp.concatenate([_GL_HALF_WEIGHTS, _GL_HALF_WEIGHTS])
_TWO_PI = 2 * math.pi
_BVN_CLIP = 38.0


class QuadratureSpec(eqx.Module):
    """Configuration of the adaptive quadrature.

    Args:
        abs_tol: Target absolute error. Defaults to 1e-13.
        rel_tol: Target error relative to the magnitude of the integral. The
            refinement stops once the error estimate is below either target.
            Defaults to 1e-13.
        max_subdivisions: Maximum number of panels. Defaults to 256.
        tail_cutoff: For Gaussian-weighted integrals, the integration interval is
            intersected with ``[-tail_cutoff, tail_cutoff]``. Must be at least 8.
            Defaults to 8.5.
        initial_panels: Number of equal panels the interval is split into before
            adaptive refinement. Defaults to 8.
    """

    abs_tol: float = 1e-13
    rel_tol: float = 1e-13
    max_subdivisions: int = 256
    tail_cutoff: float | int = 8.5
    initial_panels: int = 8

    def __check_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive.")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative.")
        if self.tail_cutoff < 8:
            raise ValueError("tail_cutoff must be at least 8.")
        if not 1 <= self.initial_panels < self.max_subdivisions:
            raise ValueError(
                "initial_panels must be positive and less than max_subdivisions."
            )


class QuadratureInfo(eqx.Module):
    """Diagnostics of an adaptive integral.

    Attributes:
        error: Estimated absolute error (summed ``|K15 - G7|`` over panels).
        subdivisions: Number of panels used.
        converged: Whether the error target was met.
    """

    error: Float[Array, ""]
    subdivisions: Int[Array, ""]
    converged: Bool[Array, ""]


class _PanelState(eqx.Module):
    lowers: Array
    uppers: Array
    values: Array
    errors: Array
    count: Array


def _kronrod_panels(fn, lowers, uppers, *, weighted):
    """Apply the 15 point rule on each panel, returning values and error estimates."""
    centres = (lowers + uppers) / 2
    half_widths = (uppers - lowers) / 2
    nodes = centres[:, None] + half_widths[:, None] * _KRONROD_NODES
    evals = jax.vmap(jax.vmap(fn))(nodes)  # (panels, 15, *out_shape)
    if weighted:
        weight = _pdf(nodes).reshape(nodes.shape + (1,) * (evals.ndim - 2))
        evals = evals * weight
    scale = half_widths.reshape((-1,) + (1,) * (evals.ndim - 2))
    kronrod = scale * jnp.tensordot(evals, _KRONROD_WEIGHTS, axes=((1,), (0,)))
    gauss = scale * jnp.tensordot(evals, _GAUSS_WEIGHTS, axes=((1,), (0,)))
    errors = jnp.abs(kronrod - gauss)
    if errors.ndim > 1:
        errors = jnp.max(errors.reshape(errors.shape[0], -1), axis=1)
    return kronrod, errors


@eqx.filter_jit
def _adaptive_integral(
    fn: Callable,
    lower: Array,
    upper: Array,
    spec: QuadratureSpec,
    *,
    weighted: bool,
    breakpoints: Array | None = None,
):
    def fn_as_array(s):
        return jnp.asarray(fn(s), dtype=float)

    upper = jnp.maximum(upper, lower)
    edges = jnp.linspace(lower, upper, spec.initial_panels + 1)
    if breakpoints is not None:
        # Breakpoints outside the interval give empty panels at its ends.
        edges = jnp.sort(jnp.concatenate([edges, jnp.clip(breakpoints, lower, upper)]))
    n_init, n_max = edges.shape[0] - 1, spec.max_subdivisions
    if n_init >= n_max:
        raise ValueError(
            "max_subdivisions must exceed initial_panels plus the number of "
            "breakpoints."
        )
    values, errors = _kronrod_panels(
        fn_as_array, edges[:-1], edges[1:], weighted=weighted
    )
    pad = n_max - n_init
    init = _PanelState(
        lowers=jnp.concatenate([edges[:-1], jnp.full(pad, upper)]),
        uppers=jnp.concatenate([edges[1:], jnp.full(pad, upper)]),
        values=jnp.concatenate([values, jnp.zeros((pad,) + values.shape[1:])]),
        errors=jnp.concatenate([errors, jnp.zeros(pad)]),
        count=jnp.array(n_init),
    )

    def not_converged(state):
        magnitude = jnp.max(jnp.abs(jnp.sum(state.values, axis=0)))
        target = jnp.maximum(spec.abs_tol, spec.rel_tol * magnitude)
        return jnp.sum(state.errors) > target

    def bisect_worst(state):
        worst = jnp.argmax(state.errors)
        low, high = state.lowers[worst], state.uppers[worst]
        mid = (low + high) / 2
        halves, half_errors = _kronrod_panels(
            fn_as_array,
            jnp.stack([low, mid]),
            jnp.stack([mid, high]),
            weighted=weighted,
        )
        slots = jnp.stack([worst, state.count])
        return _PanelState(
            lowers=state.lowers.at[slots].set(jnp.stack([low, mid])),
            uppers=state.uppers.at[slots].set(jnp.stack([mid, high])),
            values=state.values.at[slots].set(halves),
            errors=state.errors.at[slots].set(half_errors),
            count=state.count + 1,
        )

    result = max_steps_while_loop(
        not_converged, bisect_worst, init, max_steps=pad, throw=False
    )
    state = result.state
    info = QuadratureInfo(
        error=jnp.sum(state.errors),
        subdivisions=state.count,
        converged=~not_converged(state),
    )
    return jnp.sum(state.values, axis=0), info


def _checked(value: Array, info: QuadratureInfo, *, throw: bool):
    if throw:
        value = eqx.error_if(
            value,
            ~info.converged,
            "Adaptive quadrature did not converge within max_subdivisions panels.",
        )
    return value, info


def gauss_weighted_integral(
    g: Callable,
    lower: ArrayLike = -jnp.inf,
    upper: ArrayLike = jnp.inf,
    spec: QuadratureSpec | None = None,
    *,
    breakpoints: ArrayLike | None = None,
    throw: bool = True,
) -> tuple[Array, QuadratureInfo]:
    """Integral of ``g(s) * pdf(s)`` over ``[lower, upper]``.

    The interval is intersected with ``[-spec.tail_cutoff, spec.tail_cutoff]``, and
    may have infinite endpoints. An empty intersection integrates to zero.

    Args:
        g: Integrand (excluding the Gaussian weight). May return an array.
        lower: Lower limit. Defaults to -inf.
        upper: Upper limit. Defaults to inf.
        spec: Quadrature configuration. Defaults to ``QuadratureSpec()``.
        breakpoints: Points where ``g`` is not smooth, added to the initial panel
            edges. Points outside the interval are ignored. Defaults to None.
        throw: Whether to error if the tolerance is not met. If False, check
            ``info.converged``. Defaults to True.

    Returns:
        The integral and a ``QuadratureInfo``.
    """
    spec = QuadratureSpec() if spec is None else spec
    lower = arraylike_to_array(lower, err_name="lower", dtype=float)
    upper = arraylike_to_array(upper, err_name="upper", dtype=float)
    lower = eqx.error_if(lower, lower >= upper, "lower must be less than upper.")
    cutoff = spec.tail_cutoff
    value, info = _adaptive_integral(
        g,
        jnp.clip(lower, -cutoff, cutoff),
        jnp.clip(upper, -cutoff, cutoff),
        spec,
        weighted=True,
        breakpoints=_as_breakpoints(breakpoints),
    )
    return _checked(value, info, throw=throw)


def integrate(
    fn: Callable,
    lower: ArrayLike,
    upper: ArrayLike,
    spec: QuadratureSpec | None = None,
    *,
    breakpoints: ArrayLike | None = None,
    throw: bool = True,
) -> tuple[Array, QuadratureInfo]:
    """Unweighted integral of ``fn`` over the finite interval ``[lower, upper]``.

    Args:
        fn: Integrand. May return an array.
        lower: Finite lower limit.
        upper: Finite upper limit, greater than ``lower``.
        spec: Quadrature configuration (``tail_cutoff`` is unused). Defaults to
            ``QuadratureSpec()``.
        breakpoints: Points where ``fn`` is not smooth, added to the initial panel
            edges. Defaults to None.
        throw: Whether to error if the tolerance is not met. Defaults to True.

    Returns:
        The integral and a ``QuadratureInfo``.
    """
    spec = QuadratureSpec() if spec is None else spec
    lower, upper = as_float_arrays(lower, upper, names=("lower", "upper"))
    lower = eqx.error_if(lower, lower >= upper, "lower must be less than upper.")
    value, info = _adaptive_integral(
        fn,
        lower,
        upper,
        spec,
        weighted=False,
        breakpoints=_as_breakpoints(breakpoints),
    )
    return _checked(value, info, throw=throw)


def _as_breakpoints(breakpoints):
    if breakpoints is None:
        return None
    breakpoints = arraylike_to_array(breakpoints, err_name="breakpoints", dtype=float)
    if breakpoints.ndim != 1:
        raise ValueError("breakpoints must be one dimensional.")
    return breakpoints


def _with_inner_failures(value: Array, info: QuadratureInfo) -> Array:
    """Flatten ``value`` and append whether the integral that produced it failed.

    Used by integrands that are themselves adaptive integrals. The appended
    component integrates to a positive value exactly when some inner integral did
    not converge.
    """
    failed = jnp.where(info.converged, 0.0, 1.0)
    return jnp.concatenate([jnp.ravel(value), failed[None]])


def _split_inner_failures(
    value: Array, info: QuadratureInfo, shape: tuple[int, ...]
) -> tuple[Array, QuadratureInfo]:
    """Undo ``_with_inner_failures`` after the outer integral.

    Returns the outer value reshaped to ``shape``, and ``info`` with ``converged``
    False if any inner integral failed.
    """
    inner_converged = value[-1] == 0
    info = eqx.tree_at(lambda i: i.converged, info, info.converged & inner_converged)
    return value[:-1].reshape(shape), info


class _InnerIntegral(eqx.Module):
    g: Callable
    spec: QuadratureSpec

    def __call__(self, x):
        value, info = _adaptive_integral(
            lambda y: self.g(x, y),
            jnp.array(-self.spec.tail_cutoff, dtype=float),
            jnp.array(self.spec.tail_cutoff, dtype=float),
            self.spec,
            weighted=True,
        )
        return _with_inner_failures(value, info)


def gauss_weighted_integral_2d(
    g: Callable,
    spec: QuadratureSpec | None = None,
    *,
    throw: bool = True,
) -> tuple[Array, QuadratureInfo]:
    """Integral of ``g(x, y)`` against the standard Gaussian measure on the plane.

    The adaptive rule is applied in ``y`` for each ``x`` node of the adaptive rule in
    ``x``, on the square truncated at ``spec.tail_cutoff``.

    Args:
        g: Integrand of two scalar arguments. May return an array.
        spec: Quadrature configuration. Defaults to ``QuadratureSpec()``.
        throw: Whether to error if the outer integral or any inner integral does
            not meet the tolerance. Defaults to True.

    Returns:
        The integral and the ``QuadratureInfo`` of the outer integral, with
        ``converged`` False if any inner integral failed.
    """
    spec = QuadratureSpec() if spec is None else spec
    zero = jnp.zeros(())
    shape = jax.eval_shape(g, zero, zero).shape
    value, info = gauss_weighted_integral(
        _InnerIntegral(g, spec), spec=spec, throw=False
    )
    value, info = _split_inner_failures(value, info, shape)
    return _checked(value, info, throw=throw)


class _HalfspaceIntegrand(eqx.Module):
    t: Array
    p: Array
    a: Array

    def __call__(self, s):
        return _cdf((s - self.t) * self.a + self.p)


def truncated_halfspace_mass(
    t: ArrayLike,
    p: ArrayLike,
    a: ArrayLike,
    spec: QuadratureSpec | None = None,
) -> Array:
    """Gaussian measure of ``{(s, u): s <= t, u <= (s - t) * a + p}`` by quadrature.

    This is the independent quadrature path; the slope solver uses
    :func:`truncated_halfspace_mass_closed_form`.

    Args:
        t: Truncation point.
        p: Intercept of the line at ``s = t``.
        a: Slope of the line.
        spec: Quadrature configuration. Defaults to ``QuadratureSpec()``.
    """
    t, p, a = as_float_arrays(t, p, a, names=("t", "p", "a"))
    value, _ = gauss_weighted_integral(_HalfspaceIntegrand(t, p, a), upper=t, spec=spec)
    return value


@jnp.vectorize
def _bvnu(dh, dk, r):
    """Upper orthant probability ``P(X > dh, Y > dk)`` for ``|r| <= 1``."""
    h, k = dh, dk
    hk = h * k

    # Moderate correlation: integrate over the correlation parameter directly.
    hs = (h * h + k * k) / 2
    asr = jnp.arcsin(r) / 2
    sn = jnp.sin(asr * _GL_NODES)
    moderate = jnp.sum(_GL_WEIGHTS * jnp.exp((sn * hk - hs) / (1 - sn**2)))
    moderate = moderate * asr / _TWO_PI + _cdf(-h) * _cdf(-k)

    # Strong correlation: expansion about |r| = 1.
    k = jnp.where(r < 0, -k, k)
    hk = jnp.where(r < 0, -hk, hk)
    one_minus_r2 = jnp.maximum(1 - r * r, jnp.finfo(float).tiny)
    a = jnp.sqrt(one_minus_r2)
    bs = (h - k) ** 2
    asr = -(bs / one_minus_r2 + hk) / 2
    c = (4 - hk) / 8
    d = (12 - hk) / 80
    strong = jnp.where(
        asr > -100,
        a
        * jnp.exp(asr)
        * (1 - c * (bs - one_minus_r2) * (1 - d * bs) / 3 + c * d * one_minus_r2**2),
        0.0,
    )
    b = jnp.sqrt(bs)
    sp = math.sqrt(_TWO_PI) * _cdf(-b / a)
    strong = jnp.where(
        hk > -100,
        strong - jnp.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs) / 3),
        strong,
    )
    half_a = a / 2
    xs = (half_a * _GL_NODES) ** 2
    asr = -(bs / xs + hk) / 2
    sp = 1 + c * xs * (1 + 5 * d * xs)
    rs = jnp.sqrt(1 - xs)
    ep = jnp.exp(-(hk / 2) * xs / (1 + rs) ** 2) / rs
    terms = jnp.where(asr > -100, jnp.exp(asr) * (sp - ep) * _GL_WEIGHTS, 0.0)
    strong = (half_a * jnp.sum(terms) - strong) / _TWO_PI
    strong = jnp.where(jnp.abs(r) < 1, strong, 0.0)

    positive = strong + _cdf(-jnp.maximum(h, k))
    between = jnp.where(h < 0, _cdf(k) - _cdf(h), _cdf(-h) - _cdf(-k))
    negative = jnp.where(h >= k, -strong, between - strong)
    strong = jnp.where(r > 0, positive, negative)

    return jnp.clip(jnp.where(jnp.abs(r) < 0.925, moderate, strong), 0, 1)


def _bvn_cdf(h, k, rho):
    h = jnp.clip(h, -_BVN_CLIP, _BVN_CLIP)
    k = jnp.clip(k, -_BVN_CLIP, _BVN_CLIP)
    return _bvnu(-h, -k, rho)


def bvn_cdf(h: ArrayLike, k: ArrayLike, rho: ArrayLike) -> Array:
    """Standard bivariate normal distribution function ``P(X <= h, Y <= k)``.

    Drezner-Wesolowsky quadrature over the correlation parameter, with Genz's
    expansion for strong correlations, using a 20 point Gauss-Legendre rule
    throughout. Infinite ``h`` and ``k`` are supported.

    Args:
        h: Upper limit for the first coordinate.
        k: Upper limit for the second coordinate.
        rho: Correlation, with ``|rho| < 1``.
    """
    h = arraylike_to_array(h, err_name="h", dtype=float)
    k = arraylike_to_array(k, err_name="k", dtype=float)
    rho = arraylike_to_array(rho, err_name="rho", dtype=float)
    rho = eqx.error_if(rho, ~(jnp.abs(rho) < 1), "rho must satisfy |rho| < 1.")
    h = eqx.error_if(h, jnp.isnan(h) | jnp.isnan(k), "h and k must not be nan.")
    return _bvn_cdf(h, k, rho)


def _halfspace_mass_closed_form(t, p, a):
    norm = jnp.sqrt(1 + a**2)
    return _bvn_cdf(t, (p - a * t) / norm, -a / norm)


def truncated_halfspace_mass_closed_form(
    t: ArrayLike, p: ArrayLike, a: ArrayLike
) -> Array:
    """Truncated half-space mass via the bivariate normal distribution function.

    Rotating coordinates, ``(s, (u - a*s)/sqrt(1 + a**2))`` is a standard normal
    pair with correlation ``-a/sqrt(1 + a**2)``, so the mass equals
    ``bvn_cdf(t, (p - a*t)/sqrt(1 + a**2), -a/sqrt(1 + a**2))``.

    Args:
        t: Truncation point.
        p: Intercept of the line at ``s = t``.
        a: Slope of the line.
    """
    t, p, a = as_float_arrays(t, p, a, names=("t", "p", "a"))
    return _halfspace_mass_closed_form(t, p, a)
