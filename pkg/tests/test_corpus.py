import jax.numpy as jnp
import jax.random as jr
import pytest

from bobkovlab.corpus import (
    FAMILIES_1D,
    is_optimizer_family,
    random_domain_points,
    random_test_functions,
    random_test_functions_2d,
)
from bobkovlab.functions import is_probit_affine
from bobkovlab.gauss import cdf


def test_random_test_functions():
    corpus = random_test_functions(jr.key(0), 12)
    identifiers = [identifier for identifier, _ in corpus]
    assert len(set(identifiers)) == 12
    assert identifiers[:5] == [f"{family}-{i:03d}" for i, family in enumerate(FAMILIES_1D)]

    ts = jnp.linspace(-8.5, 8.5, 101)
    for identifier, f in corpus:
        values = f(ts)
        assert jnp.all((values > 0) & (values < 1))
        if identifier.startswith(("affine", "constant", "curved", "blend")):
            assert is_probit_affine(f) == is_optimizer_family(identifier)


def test_random_test_functions_reproducible():
    first = random_test_functions(jr.key(42), 5)
    second = random_test_functions(jr.key(42), 5)
    ts = jnp.linspace(-2, 2, 5)
    for (id_1, f_1), (id_2, f_2) in zip(first, second, strict=True):
        assert id_1 == id_2
        assert jnp.all(f_1(ts) == f_2(ts))


def test_random_test_functions_families():
    corpus = random_test_functions(jr.key(0), 4, families=("curved",))
    assert all(identifier.startswith("curved") for identifier, _ in corpus)

    with pytest.raises(ValueError, match="Unknown families"):
        random_test_functions(jr.key(0), 4, families=("wiggly",))


def test_is_optimizer_family():
    assert is_optimizer_family("affine-003")
    assert is_optimizer_family("constant-000")
    assert not is_optimizer_family("tabulated-004")


def test_random_test_functions_2d():
    corpus = random_test_functions_2d(jr.key(0), 4)
    assert [identifier.rsplit("-", 1)[0] for identifier, _ in corpus] == [
        "probit-affine",
        "probit-separable",
    ] * 2
    for identifier, g in corpus:
        assert is_probit_affine(g) == identifier.startswith("probit-affine")


def test_random_domain_points():
    points = random_domain_points(jr.key(3), 100, t_range=(-1.0, 1.0))
    assert points.t.shape == (100,)
    assert jnp.all(points.in_domain)
    assert jnp.all(jnp.abs(points.t) <= 1)
    lam = points.y / cdf(points.t)
    assert jnp.all((lam > 0.1 - 1e-12) & (lam < 0.9 + 1e-12))
