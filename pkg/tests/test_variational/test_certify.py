import jax.numpy as jnp
import jax.random as jr
import pytest

from bobkovlab.corpus import random_domain_points
from bobkovlab.gauss import cdf
from bobkovlab.quadrature import truncated_halfspace_mass_closed_form
from bobkovlab.variational import CollocationGrid, certify_value, refinement_error

certify_test_cases = [
    # t, x, lam
    (0.5, 0.6, 0.5),
    (-0.8, 0.25, 0.3),
]


@pytest.mark.parametrize(("t", "x", "lam"), certify_test_cases)
def test_certify_value(t, x, lam):
    y = lam * cdf(t)
    report = certify_value(t, x, y, CollocationGrid.uniform(t, 512))
    assert report.certified
    assert report.converged
    assert report.optimum_gap <= 2e-3
    assert report.candidate_gap <= 2e-3
    assert report.tolerance == pytest.approx(2 * report.refinement_error + 1e-6)


special_points = [
    # t, x, y: the endpoint of cdf(0.7 s + 0.2), and a horizontal slope.
    (1.0, float(cdf(0.9)), float(truncated_halfspace_mass_closed_form(1.0, 0.9, 0.7))),
    (0.3, 0.4, 0.4 * float(cdf(0.3))),
]


@pytest.mark.parametrize(("t", "x", "y"), special_points)
def test_certify_value_special_points(t, x, y):
    report = certify_value(t, x, y, CollocationGrid.uniform(t, 512))
    assert report.certified
    assert report.optimum_gap <= 2e-3


_points = random_domain_points(
    jr.key(10), 10, t_range=(-1.0, 1.0), p_range=(-1.0, 1.0), lam_range=(0.2, 0.8)
)
seeded_points = [
    (float(t), float(cdf(p)), float(y))
    for t, p, y in zip(_points.t, _points.p, _points.y, strict=True)
]


@pytest.mark.parametrize(("t", "x", "y"), seeded_points)
def test_certify_value_seeded(t, x, y):
    coarse = certify_value(t, x, y, CollocationGrid.uniform(t, 512))
    assert coarse.certified
    assert coarse.optimum_gap <= 2e-3
    assert coarse.candidate_gap <= 2e-3

    fine = certify_value(t, x, y, CollocationGrid.uniform(t, 1024))
    assert fine.converged
    assert fine.optimum_gap <= 5e-4
    assert fine.candidate_gap <= 5e-4
    # B is the infimum, so discrete optima only fall below it by the
    # discretization error.
    assert fine.optimum >= fine.bellman - 1e-4


def test_certify_value_offset_fails():
    t, x, y = 0.5, 0.6, 0.5 * cdf(0.5)
    report = certify_value(
        t, x, y, CollocationGrid.uniform(t, 256), bellman_offset=0.1
    )
    assert not report.certified
    assert report.candidate_gap > 0.05


def test_refinement_error_decreases():
    t, x, y = 0.5, 0.6, 0.5 * cdf(0.5)
    coarse = refinement_error(t, x, y, CollocationGrid.uniform(t, 128))
    fine = refinement_error(t, x, y, CollocationGrid.uniform(t, 256))
    assert 0 < fine < coarse / 2
    assert jnp.isfinite(coarse)
