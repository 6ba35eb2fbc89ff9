from __future__ import annotations

import math

import numpy as np
import pytest

from critflow import build_atlas
from critflow import builtin
from critflow import classify
from critflow import ComponentRef
from critflow import components_at
from critflow import continue_branch
from critflow import ContinuationError
from critflow import cost
from critflow import find_critical
from critflow import lift
from critflow import lusin_diagnostic
from critflow import transversality
from critflow._critical_atlas import DEGENERATE
from critflow._critical_atlas import follow
from critflow._critical_atlas import MAX
from critflow._critical_atlas import MIN
from critflow._critical_atlas import sheet_span
from critflow._critical_atlas import snap

T_STAR = 2.0 / (3.0 * math.sqrt(3.0))


@pytest.fixture(scope='session')
def tilted():
    return builtin('tilted_double_well', {'horizon': 1.0})


@pytest.fixture(scope='session')
def tilted_atlas(tilted):
    return build_atlas(tilted, rho=10.0)


@pytest.fixture(scope='session')
def hat():
    return builtin('mexican_hat')


@pytest.fixture(scope='session')
def hat_atlas(hat):
    return build_atlas(hat, rho=10.0)


def test_find_critical_tilted(tilted):
    points = find_critical(tilted, 0.0, np.linspace(-2.0, 2.0, 9)[:, None])
    found = sorted((float(p.u[0]), p.classification) for p in points)
    assert [label for _, label in found] == [MIN, MAX, MIN]
    np.testing.assert_allclose([u for u, _ in found], [-1.0, 0.0, 1.0], atol=1e-9)
    assert all(p.residual <= 1e-9 for p in points)


def test_find_critical_needs_seeds(tilted):
    with pytest.raises(ValueError):
        find_critical(tilted, 0.0, [])


def test_classify_fold_point(tilted):
    point = classify(tilted, T_STAR, [-1.0 / math.sqrt(3.0)])
    assert point.classification == DEGENERATE
    assert point.kernel_dim == 1
    assert point.degenerate
    assert point.to_dict()['classification'] == DEGENERATE


def test_tilted_atlas_structure(tilted_atlas):
    assert len(tilted_atlas.branches) == 1
    assert tilted_atlas.fold_count == 2
    fold_times = sorted(sample.t for sample in tilted_atlas.branches[0].folds)
    assert fold_times[0] == pytest.approx(-T_STAR, abs=1e-6)
    assert fold_times[1] == pytest.approx(T_STAR, abs=1e-6)
    assert tilted_atlas.coverage['misses'] == 0


def test_folds_coincide_with_degeneracy(tilted, tilted_atlas):
    branch = tilted_atlas.branches[0]
    fold_times = [sample.t for sample in branch.folds]
    for sample in branch.samples:
        degenerate = classify(tilted, sample.t, sample.u).degenerate
        if sample.fold:
            assert degenerate
        elif degenerate:
            assert min(abs(sample.t - t) for t in fold_times) < 1e-6


def test_fold_transversality(tilted, tilted_atlas):
    fold = max(tilted_atlas.branches[0].folds, key=lambda sample: sample.t)
    report = transversality(tilted, classify(tilted, fold.t, fold.u))
    assert report.kernel_dim == 1
    assert abs(report.t2_value) == pytest.approx(1.0, abs=1e-6)
    assert report.t3_value == pytest.approx(-2.0 * math.sqrt(3.0), abs=1e-4)
    assert report.passed(full=True)


def test_nondegenerate_point_passes(tilted):
    report = transversality(tilted, classify(tilted, 0.0, [1.0]))
    assert report.kernel_dim == 0
    assert report.passed(full=True)


@pytest.mark.parametrize(
    ('t', 'count'),
    [(0.0, 3), (0.5, 1), (-0.5, 1)],
    ids=['three_sheets', 'right_well_only', 'left_well_only'],
)
def test_components_at(tilted_atlas, t, count):
    components = components_at(tilted_atlas, t)
    assert len(components) == count
    assert all(c.kind == ComponentRef.CRITICAL for c in components)


def test_sheet_of_left_well_ends_at_fold(tilted_atlas):
    component, distance = snap(tilted_atlas, 0.2, np.array([-0.9]))
    assert distance < 0.1
    lower, upper = sheet_span(tilted_atlas, component.component_id)
    assert lower < 0.0
    assert upper == pytest.approx(T_STAR, abs=1e-6)
    assert follow(tilted_atlas, component.component_id, 0.5) is None
    at_fold = follow(tilted_atlas, component.component_id, upper)
    assert at_fold.representative[0] == pytest.approx(-1.0 / math.sqrt(3.0), abs=1e-4)


def test_lift(tilted, tilted_atlas):
    singleton = lift(tilted_atlas, 0.0, [0.5])
    assert not singleton.critical
    assert singleton.kind == ComponentRef.SINGLETON
    np.testing.assert_array_equal(singleton.representative, [0.5])

    well = lift(tilted_atlas, 0.0, [1.0])
    assert well.critical
    assert well.component_id is not None
    assert well.point.classification == MIN


def test_continue_branch_rejects_noncritical_start(tilted):
    with pytest.raises(ContinuationError):
        continue_branch(tilted, classify(tilted, 0.0, [0.5]))


def test_build_atlas_rejects_small_rho(tilted):
    with pytest.raises(ValueError):
        build_atlas(tilted, rho=1.0)


def test_mexican_hat_continuum(hat_atlas):
    assert len(hat_atlas.continua) == 1
    circle = hat_atlas.continua[0]
    assert circle.closed
    assert circle.t is None
    radii = np.linalg.norm(circle.points, axis=1)
    np.testing.assert_allclose(radii, 1.0, atol=1e-6)


def test_mexican_hat_circle_fails_time_transversality(hat, hat_atlas):
    point = classify(hat, 0.0, hat_atlas.continua[0].points[0])
    report = transversality(hat, point)
    assert report.kernel_dim == 1
    assert not report.passes_t2


def test_lusin_diagnostic(hat, hat_atlas):
    diagnostic = lusin_diagnostic(hat, hat_atlas, 0.0)
    assert diagnostic['distinct'] == 2
    np.testing.assert_allclose(sorted(diagnostic['values']), [0.0, 0.25], atol=1e-9)
    assert diagnostic['outer_estimate'] == pytest.approx(0.0, abs=1e-8)
    assert diagnostic['clean']


def test_cost_origin_to_circle(hat, hat_atlas):
    components = components_at(hat_atlas, 0.0)
    origin = next(c for c in components if c.continuum is None)
    circle = next(c for c in components if c.continuum is not None)
    result = cost(hat, hat_atlas, 0.0, origin, circle, cross_check=False)
    assert result.value == pytest.approx(0.25, abs=1e-3)
    assert result.lower_bound_gap >= -1e-8


def test_atlas_to_dict(tilted_atlas):
    payload = tilted_atlas.to_dict()
    assert payload['model'] == 'tilted_double_well'
    assert len(payload['branches']) == 1
    assert sum(s['fold'] for s in payload['branches'][0]['samples']) == 2
