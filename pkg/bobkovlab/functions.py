"""Smooth test functions with values in (0, 1), used to exercise Bobkov's inequality.

One dimensional functions subclass :class:`AbstractTestFunction1D`, implementing the
value and derivative. The probit ``inv_cdf(f)``, the isoperimetric profile
``I(f)`` and the running Gaussian mass ``int_{-inf}^t f dgamma`` have default
implementations, which families override where closed forms are available.

Two dimensional functions are of the form ``g = cdf(h(x, y))`` for a smooth
probit ``h``, see :class:`AbstractProbit2D`.

Functions can also be built from short text specifications, see
:func:`parse_function_spec` and :func:`parse_function_spec_2d`.
"""

from abc import abstractmethod

import equinox as eqx
import jax
import jax.numpy as jnp
from jaxtyping import Array, ArrayLike, Float

from bobkovlab.gauss import _cdf, _inv_cdf, _iso, _pdf
from bobkovlab.quadrature import (
    QuadratureSpec,
    _halfspace_mass_closed_form,
    gauss_weighted_integral,
)
from bobkovlab.utils import arraylike_to_array

TABULATED_CLAMP = 1e-9


def _safe_iso(x):
    """``I(x)``, extended by zero at (and beyond) the boundary of (0, 1)."""
    inside = (x > 0) & (x < 1)
    return jnp.where(inside, _iso(jnp.where(inside, x, 0.5)), 0.0)


def _all_zero(arr) -> bool:
    """Whether a concrete array is all zero (False for traced arrays)."""
    try:
        return bool(jnp.all(arr == 0))
    except jax.errors.ConcretizationTypeError:
        return False


class AbstractTestFunction1D(eqx.Module):
    """Abstract class for one dimensional test functions ``f: R -> (0, 1)``.

    Concrete implementations must implement ``__call__`` and ``derivative``, which
    act elementwise.
    """

    @abstractmethod
    def __call__(self, t: ArrayLike) -> Array:
        """The value ``f(t)``."""

    @abstractmethod
    def derivative(self, t: ArrayLike) -> Array:
        """The derivative ``f'(t)``."""

    def probit(self, t: ArrayLike) -> Array:
        """The probit ``inv_cdf(f(t))``."""
        return _inv_cdf(self(t))

    def iso(self, t: ArrayLike) -> Array:
        """The isoperimetric profile of the value, ``I(f(t))``."""
        return _safe_iso(self(t))

    @property
    def breakpoints(self) -> Float[Array, " m"] | None:
        """Points where ``f`` is not smooth (None if it is smooth everywhere)."""
        return None

    def running_mass(self, t: ArrayLike, spec: QuadratureSpec | None = None) -> Array:
        """The running Gaussian mass ``int_{-inf}^t f(s) pdf(s) ds``.

        Args:
            t: Upper limit (a scalar).
            spec: Quadrature configuration, used when no closed form is available.
                Defaults to ``QuadratureSpec()``.
        """
        t = arraylike_to_array(t, err_name="t", dtype=float)
        value, _ = gauss_weighted_integral(
            self, upper=t, spec=spec, breakpoints=self.breakpoints
        )
        return value

    def running_mass_profile(
        self, ts: ArrayLike, spec: QuadratureSpec | None = None
    ) -> Array:
        """Running masses at strictly increasing nodes ``ts``.

        The masses are accumulated over consecutive segments, so each part of the
        line is integrated once.
        """
        ts = arraylike_to_array(ts, err_name="ts", dtype=float)
        ts = eqx.error_if(ts, jnp.any(jnp.diff(ts) <= 0), "ts must be increasing.")
        lowers = jnp.concatenate([jnp.array([-jnp.inf]), ts[:-1]])

        def segment(lower, upper):
            value, _ = gauss_weighted_integral(
                self, lower, upper, spec, breakpoints=self.breakpoints
            )
            return value

        return jnp.cumsum(jax.vmap(segment)(lowers, ts))

    def mean(self, spec: QuadratureSpec | None = None) -> Array:
        """The Gaussian mean ``int f dgamma``."""
        value, _ = gauss_weighted_integral(
            self, spec=spec, breakpoints=self.breakpoints
        )
        return value


class ProbitPoly(AbstractTestFunction1D):
    """``f(t) = cdf(c0 + c1 t + c2 t^2 + c3 t^3)``.

    With ``c2 = c3 = 0`` this is the probit-affine family ``cdf(u t + v)``, for which
    the running mass has a closed form.

    Args:
        coeffs: Up to four coefficients, in increasing order of degree.
    """

    coeffs: Float[Array, "4"]
    affine: bool = eqx.field(static=True)

    def __init__(self, coeffs: ArrayLike):
        coeffs = arraylike_to_array(coeffs, err_name="coeffs", dtype=float)
        coeffs = jnp.atleast_1d(coeffs)
        if coeffs.ndim != 1 or not 1 <= coeffs.shape[0] <= 4:
            raise ValueError("Expected between one and four coefficients.")
        self.coeffs = jnp.pad(coeffs, (0, 4 - coeffs.shape[0]))
        self.affine = _all_zero(self.coeffs[2:])

    @classmethod
    def affine_family(cls, slope: ArrayLike, intercept: ArrayLike):
        """Construct ``cdf(slope * t + intercept)``."""
        return cls(jnp.stack([jnp.asarray(intercept, float), jnp.asarray(slope, float)]))

    def probit(self, t: ArrayLike) -> Array:
        return jnp.polyval(self.coeffs[::-1], jnp.asarray(t, float))

    def _probit_derivative(self, t):
        c = self.coeffs
        return c[1] + 2 * c[2] * t + 3 * c[3] * t**2

    def __call__(self, t: ArrayLike) -> Array:
        return _cdf(self.probit(t))

    def derivative(self, t: ArrayLike) -> Array:
        t = jnp.asarray(t, float)
        return _pdf(self.probit(t)) * self._probit_derivative(t)

    def iso(self, t: ArrayLike) -> Array:
        return _pdf(self.probit(t))

    def running_mass(self, t: ArrayLike, spec: QuadratureSpec | None = None) -> Array:
        if not self.affine:
            return super().running_mass(t, spec)
        t = arraylike_to_array(t, err_name="t", dtype=float)
        intercept, slope = self.coeffs[0], self.coeffs[1]
        return _halfspace_mass_closed_form(t, slope * t + intercept, slope)

    def running_mass_profile(
        self, ts: ArrayLike, spec: QuadratureSpec | None = None
    ) -> Array:
        if not self.affine:
            return super().running_mass_profile(ts, spec)
        return self.running_mass(ts, spec)

    def mean(self, spec: QuadratureSpec | None = None) -> Array:
        if not self.affine:
            return super().mean(spec)
        intercept, slope = self.coeffs[0], self.coeffs[1]
        return _cdf(intercept / jnp.sqrt(1 + slope**2))


class Constant(AbstractTestFunction1D):
    """The constant function ``f(t) = c`` for ``0 < c < 1``."""

    c: Float[Array, ""]

    def __init__(self, c: ArrayLike):
        c = arraylike_to_array(c, err_name="c", dtype=float)
        self.c = eqx.error_if(c, ~((c > 0) & (c < 1)), "c must lie in (0, 1).")

    def __call__(self, t: ArrayLike) -> Array:
        return jnp.full(jnp.shape(t), self.c)

    def derivative(self, t: ArrayLike) -> Array:
        return jnp.zeros(jnp.shape(t))

    def probit(self, t: ArrayLike) -> Array:
        return jnp.full(jnp.shape(t), _inv_cdf(self.c))

    def running_mass(self, t: ArrayLike, spec: QuadratureSpec | None = None) -> Array:
        return self.c * _cdf(jnp.asarray(t, float))

    def running_mass_profile(
        self, ts: ArrayLike, spec: QuadratureSpec | None = None
    ) -> Array:
        return self.running_mass(ts, spec)

    def mean(self, spec: QuadratureSpec | None = None) -> Array:
        return self.c


class Blend(AbstractTestFunction1D):
    """Convex combination ``sum_i w_i cdf(u_i t + v_i)``.

    Args:
        weights: Positive weights summing to one.
        slopes: The slopes ``u_i``.
        intercepts: The intercepts ``v_i``.
    """

    weights: Float[Array, " k"]
    slopes: Float[Array, " k"]
    intercepts: Float[Array, " k"]

    def __init__(self, weights: ArrayLike, slopes: ArrayLike, intercepts: ArrayLike):
        weights = arraylike_to_array(weights, err_name="weights", dtype=float)
        slopes = arraylike_to_array(slopes, err_name="slopes", dtype=float)
        intercepts = arraylike_to_array(intercepts, err_name="intercepts", dtype=float)
        if not (weights.ndim == 1 and weights.shape == slopes.shape == intercepts.shape):
            raise ValueError(
                "weights, slopes and intercepts must be one dimensional arrays of the "
                "same length."
            )
        weights = eqx.error_if(
            weights,
            jnp.any(weights <= 0) | (jnp.abs(jnp.sum(weights) - 1) > 1e-12),
            "Blend weights must be positive and sum to one.",
        )
        self.weights, self.slopes, self.intercepts = weights, slopes, intercepts

    def _arguments(self, t):
        return jnp.asarray(t, float)[..., None] * self.slopes + self.intercepts

    def __call__(self, t: ArrayLike) -> Array:
        return jnp.sum(self.weights * _cdf(self._arguments(t)), axis=-1)

    def derivative(self, t: ArrayLike) -> Array:
        return jnp.sum(self.weights * self.slopes * _pdf(self._arguments(t)), axis=-1)

    def running_mass(self, t: ArrayLike, spec: QuadratureSpec | None = None) -> Array:
        t = arraylike_to_array(t, err_name="t", dtype=float)[..., None]
        masses = _halfspace_mass_closed_form(
            t, t * self.slopes + self.intercepts, self.slopes
        )
        return jnp.sum(self.weights * masses, axis=-1)

    def running_mass_profile(
        self, ts: ArrayLike, spec: QuadratureSpec | None = None
    ) -> Array:
        return self.running_mass(ts, spec)

    def mean(self, spec: QuadratureSpec | None = None) -> Array:
        means = _cdf(self.intercepts / jnp.sqrt(1 + self.slopes**2))
        return jnp.sum(self.weights * means)


def _pchip_slopes(knots, values):
    """Shape preserving (Fritsch-Carlson) derivative estimates at the knots."""
    widths = jnp.diff(knots)
    secants = jnp.diff(values) / widths
    w1 = 2 * widths[1:] + widths[:-1]
    w2 = widths[1:] + 2 * widths[:-1]
    same_sign = secants[:-1] * secants[1:] > 0
    safe_left = jnp.where(same_sign, secants[:-1], 1.0)
    safe_right = jnp.where(same_sign, secants[1:], 1.0)
    interior = jnp.where(
        same_sign, (w1 + w2) / (w1 / safe_left + w2 / safe_right), 0.0
    )

    def end_slope(h0, h1, m0, m1):
        d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
        d = jnp.where(jnp.sign(d) != jnp.sign(m0), 0.0, d)
        return jnp.where(
            (jnp.sign(m0) != jnp.sign(m1)) & (jnp.abs(d) > 3 * jnp.abs(m0)), 3 * m0, d
        )

    first = end_slope(widths[0], widths[1], secants[0], secants[1])
    last = end_slope(widths[-1], widths[-2], secants[-1], secants[-2])
    return jnp.concatenate([first[None], interior, last[None]])


class Tabulated(AbstractTestFunction1D):
    """Monotone cubic (PCHIP) interpolation of samples, clamped to ``[eps, 1-eps]``.

    Outside the knot range the function is constant, equal to the end values.

    Args:
        knots: Strictly increasing sample locations (at least three).
        values: Samples in (0, 1).
    """

    knots: Float[Array, " n"]
    values: Float[Array, " n"]
    slopes: Float[Array, " n"]

    def __init__(self, knots: ArrayLike, values: ArrayLike):
        knots = arraylike_to_array(knots, err_name="knots", dtype=float)
        values = arraylike_to_array(values, err_name="values", dtype=float)
        if knots.ndim != 1 or knots.shape != values.shape or knots.shape[0] < 3:
            raise ValueError(
                "knots and values must be matching one dimensional arrays with at "
                "least three elements."
            )
        knots = eqx.error_if(
            knots, jnp.any(jnp.diff(knots) <= 0), "knots must be strictly increasing."
        )
        self.knots = knots
        self.values = jnp.clip(values, TABULATED_CLAMP, 1 - TABULATED_CLAMP)
        self.slopes = _pchip_slopes(self.knots, self.values)

    def _hermite(self, t):
        t = jnp.asarray(t, float)
        inside = (t >= self.knots[0]) & (t <= self.knots[-1])
        idx = jnp.clip(jnp.searchsorted(self.knots, t) - 1, 0, len(self.knots) - 2)
        x0, x1 = self.knots[idx], self.knots[idx + 1]
        y0, y1 = self.values[idx], self.values[idx + 1]
        d0, d1 = self.slopes[idx], self.slopes[idx + 1]
        h = x1 - x0
        s = jnp.clip((t - x0) / h, 0, 1)
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        value = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
        derivative = (
            (6 * s**2 - 6 * s) * y0 / h
            + (3 * s**2 - 4 * s + 1) * d0
            + (-6 * s**2 + 6 * s) * y1 / h
            + (3 * s**2 - 2 * s) * d1
        )
        end_value = jnp.where(t < self.knots[0], self.values[0], self.values[-1])
        return jnp.where(inside, value, end_value), jnp.where(inside, derivative, 0.0)

    def __call__(self, t: ArrayLike) -> Array:
        value, _ = self._hermite(t)
        return jnp.clip(value, TABULATED_CLAMP, 1 - TABULATED_CLAMP)

    def derivative(self, t: ArrayLike) -> Array:
        value, derivative = self._hermite(t)
        clamped = (value < TABULATED_CLAMP) | (value > 1 - TABULATED_CLAMP)
        return jnp.where(clamped, 0.0, derivative)

    @property
    def breakpoints(self) -> Float[Array, " n"]:
        return self.knots

    @classmethod
    def from_function(
        cls, function: AbstractTestFunction1D, knots: ArrayLike
    ) -> "Tabulated":
        """Tabulate another test function at the given knots."""
        knots = arraylike_to_array(knots, err_name="knots", dtype=float)
        return cls(knots, function(knots))


class AbstractProbit2D(eqx.Module):
    """Abstract class for ``g(x, y) = cdf(h(x, y))`` with a smooth probit ``h``.

    Concrete implementations must implement ``probit`` and ``probit_grad``.
    """

    @abstractmethod
    def probit(self, x: ArrayLike, y: ArrayLike) -> Array:
        """The probit ``h(x, y)``."""

    @abstractmethod
    def probit_grad(self, x: ArrayLike, y: ArrayLike) -> tuple[Array, Array]:
        """The partial derivatives ``(h_x, h_y)``."""

    def __call__(self, x: ArrayLike, y: ArrayLike) -> Array:
        return _cdf(self.probit(x, y))

    def grad(self, x: ArrayLike, y: ArrayLike) -> tuple[Array, Array]:
        """The partial derivatives ``(g_x, g_y)``."""
        density = _pdf(self.probit(x, y))
        h_x, h_y = self.probit_grad(x, y)
        return density * h_x, density * h_y

    def iso(self, x: ArrayLike, y: ArrayLike) -> Array:
        """The isoperimetric profile of the value, ``I(g(x, y))``."""
        return _pdf(self.probit(x, y))


AbstractTestFunction2D = AbstractProbit2D


class ProbitAffine2D(AbstractProbit2D):
    """``g(x, y) = cdf(alpha x + beta y + c)``."""

    alpha: Float[Array, ""]
    beta: Float[Array, ""]
    c: Float[Array, ""]

    def __init__(self, alpha: ArrayLike, beta: ArrayLike, c: ArrayLike):
        self.alpha = arraylike_to_array(alpha, err_name="alpha", dtype=float)
        self.beta = arraylike_to_array(beta, err_name="beta", dtype=float)
        self.c = arraylike_to_array(c, err_name="c", dtype=float)

    def probit(self, x: ArrayLike, y: ArrayLike) -> Array:
        return self.alpha * jnp.asarray(x, float) + self.beta * jnp.asarray(y, float) + self.c

    def probit_grad(self, x: ArrayLike, y: ArrayLike) -> tuple[Array, Array]:
        shape = jnp.broadcast_shapes(jnp.shape(x), jnp.shape(y))
        return jnp.full(shape, self.alpha), jnp.full(shape, self.beta)


class ProbitSeparable(AbstractProbit2D):
    """``g(x, y) = cdf(u(x) y + v(x))`` for polynomials ``u`` and ``v``.

    Args:
        u_coeffs: Coefficients of ``u``, in increasing order of degree.
        v_coeffs: Coefficients of ``v``, in increasing order of degree.
    """

    u_coeffs: Float[Array, " m"]
    v_coeffs: Float[Array, " n"]

    def __init__(self, u_coeffs: ArrayLike, v_coeffs: ArrayLike):
        self.u_coeffs = jnp.atleast_1d(
            arraylike_to_array(u_coeffs, err_name="u_coeffs", dtype=float)
        )
        self.v_coeffs = jnp.atleast_1d(
            arraylike_to_array(v_coeffs, err_name="v_coeffs", dtype=float)
        )

    @staticmethod
    def _poly(coeffs, x):
        return jnp.polyval(coeffs[::-1], x)

    @staticmethod
    def _poly_derivative(coeffs, x):
        if coeffs.shape[0] == 1:
            return jnp.zeros_like(x)
        powers = jnp.arange(1, coeffs.shape[0])
        return jnp.polyval((powers * coeffs[1:])[::-1], x)

    def probit(self, x: ArrayLike, y: ArrayLike) -> Array:
        x, y = jnp.asarray(x, float), jnp.asarray(y, float)
        return self._poly(self.u_coeffs, x) * y + self._poly(self.v_coeffs, x)

    def probit_grad(self, x: ArrayLike, y: ArrayLike) -> tuple[Array, Array]:
        x, y = jnp.asarray(x, float), jnp.asarray(y, float)
        h_x = self._poly_derivative(self.u_coeffs, x) * y + self._poly_derivative(
            self.v_coeffs, x
        )
        h_y = self._poly(self.u_coeffs, x) * jnp.ones_like(y)
        return h_x, h_y


def is_probit_affine(function: AbstractTestFunction1D | AbstractProbit2D) -> bool:
    """Whether a function is structurally in the probit-affine (optimizer) family.

    Used to label corpora; the numerical classification lives in the verifier.
    """
    if isinstance(function, Constant | ProbitAffine2D):
        return True
    if isinstance(function, ProbitPoly):
        return function.affine
    if isinstance(function, ProbitSeparable):
        return bool(
            jnp.all(function.u_coeffs[1:] == 0) & jnp.all(function.v_coeffs[2:] == 0)
        )
    if isinstance(function, Blend):
        return bool(jnp.all(function.slopes == function.slopes[0]) & jnp.all(
            function.intercepts == function.intercepts[0]
        ))
    return False


def _parse_numbers(body: str, text: str) -> list[float]:
    numbers = []
    for token in body.split(","):
        try:
            numbers.append(float(token))
        except ValueError:
            raise ValueError(
                f"Could not parse {token.strip()!r} as a number in {text!r}."
            ) from None
    return numbers


def parse_function_spec(text: str) -> AbstractTestFunction1D:
    """Build a one dimensional test function from a text specification.

    The grammar is ``family:arguments`` with families

    - ``probit-poly:c0,c1[,c2[,c3]]``, giving ``cdf(c0 + c1 t + ...)``,
    - ``const:c``,
    - ``blend:w1,u1,v1;w2,u2,v2;...``, giving ``sum_i w_i cdf(u_i t + v_i)``,
    - ``tab:t1,f1;t2,f2;...``, a monotone cubic interpolation of samples.

    Raises:
        ValueError: If the text cannot be parsed, naming the offending token.
    """
    family, sep, body = text.strip().partition(":")
    if not sep or not body:
        raise ValueError(f"Expected 'family:arguments', got {text!r}.")
    if family == "probit-poly":
        coeffs = _parse_numbers(body, text)
        if not 1 <= len(coeffs) <= 4:
            raise ValueError(f"probit-poly takes one to four coefficients, in {text!r}.")
        return ProbitPoly(jnp.array(coeffs))
    if family == "const":
        numbers = _parse_numbers(body, text)
        if len(numbers) != 1:
            raise ValueError(f"const takes a single number, in {text!r}.")
        (c,) = numbers
        if not 0 < c < 1:
            raise ValueError(f"The constant {c!r} must lie in (0, 1).")
        return Constant(c)
    if family in ("blend", "tab"):
        rows = [_parse_numbers(part, text) for part in body.split(";")]
        width = 3 if family == "blend" else 2
        for part, row in zip(body.split(";"), rows, strict=True):
            if len(row) != width:
                raise ValueError(f"Expected {width} numbers in {part!r} of {text!r}.")
        columns = jnp.array(rows).T
        if family == "tab":
            return Tabulated(columns[0], columns[1])
        if jnp.any(columns[0] <= 0) or abs(float(jnp.sum(columns[0])) - 1) > 1e-12:
            raise ValueError(f"Blend weights must be positive and sum to one: {text!r}.")
        return Blend(columns[0], columns[1], columns[2])
    raise ValueError(f"Unknown function family {family!r} in {text!r}.")


def parse_function_spec_2d(text: str) -> AbstractProbit2D:
    """Build a two dimensional test function from a text specification.

    Families are ``probit-affine:alpha,beta,c`` and
    ``probit-separable:u0,u1,...|v0,v1,...``.

    Raises:
        ValueError: If the text cannot be parsed, naming the offending token.
    """
    family, sep, body = text.strip().partition(":")
    if not sep or not body:
        raise ValueError(f"Expected 'family:arguments', got {text!r}.")
    if family == "probit-affine":
        numbers = _parse_numbers(body, text)
        if len(numbers) != 3:
            raise ValueError(f"probit-affine takes three numbers, in {text!r}.")
        return ProbitAffine2D(*numbers)
    if family == "probit-separable":
        u_part, sep, v_part = body.partition("|")
        if not sep:
            raise ValueError(f"Expected 'u-coefficients|v-coefficients' in {text!r}.")
        return ProbitSeparable(
            jnp.array(_parse_numbers(u_part, text)),
            jnp.array(_parse_numbers(v_part, text)),
        )
    raise ValueError(f"Unknown function family {family!r} in {text!r}.")
