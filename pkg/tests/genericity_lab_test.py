from __future__ import annotations

import numpy as np
import pytest

from critflow import build_atlas
from critflow import builtin
from critflow import components_at
from critflow import DimensionMismatchError
from critflow import perturb
from critflow import Perturbation
from critflow import sample_test
from critflow._critical_atlas import _sublevel_radius
from critflow._genericity_lab import degenerate_points
from critflow._genericity_lab import LINEAR_QUADRATIC


@pytest.fixture(scope='session')
def tilted():
    return builtin('tilted_double_well', {'horizon': 1.0})


@pytest.fixture(scope='session')
def hat():
    return builtin('mexican_hat')


def test_zero_perturbation_is_identity(hat):
    zero = perturb(hat, Perturbation(linear=np.zeros(2)))
    rng = np.random.default_rng(5)
    for u in rng.normal(size=(20, 2)):
        assert zero.eval_energy(0.3, u) == hat.eval_energy(0.3, u)
        np.testing.assert_array_equal(zero.eval_gradient(0.3, u), hat.eval_gradient(0.3, u))
        np.testing.assert_array_equal(zero.eval_hessian(0.3, u), hat.eval_hessian(0.3, u))
    assert zero.lambda_bound == hat.lambda_bound
    assert zero.name == 'mexican_hat+perturbation'


def test_perturbed_gradient(hat):
    p = Perturbation(
        linear=np.array([0.1, -0.2]),
        quadratic_vectors=(np.array([0.3, 0.1]),),
    )
    perturbed = perturb(hat, p)
    k = p.matrix()
    u = np.array([0.7, -0.4])
    np.testing.assert_allclose(
        perturbed.eval_gradient(0.0, u), hat.eval_gradient(0.0, u) + p.linear + k @ u,
    )
    assert perturbed.eval_energy(0.0, u) == pytest.approx(
        hat.eval_energy(0.0, u) + p.linear @ u + 0.5 * u @ k @ u,
    )
    np.testing.assert_allclose(perturbed.eval_hessian(0.0, u), hat.eval_hessian(0.0, u) + k)
    assert perturbed.eval_power(0.0, u) == hat.eval_power(0.0, u)
    assert perturbed.params['perturbation']['linear'] == [0.1, -0.2]


def test_indefinite_quadratic_raises_lambda(hat):
    p = Perturbation(linear=np.zeros(2), diagonal=np.array([-0.5, 0.2]))
    perturbed = perturb(hat, p)
    assert perturbed.lambda_bound == pytest.approx(hat.lambda_bound + 0.5)
    assert perturbed.energy_floor < hat.energy_floor


def test_perturbed_floor_follows_sublevel(hat):
    y = np.array([0.06, -0.08])
    perturbed = perturb(hat, Perturbation(linear=y), rho=10.0)
    diameter = 2.0 * _sublevel_radius(hat, 10.0)
    assert perturbed.energy_floor == pytest.approx(hat.energy_floor - 0.1 * diameter)
    wider = perturb(hat, Perturbation(linear=y), rho=50.0)
    assert wider.energy_floor < perturbed.energy_floor
    rng = np.random.default_rng(2)
    for u in rng.uniform(-3.0, 3.0, size=(200, 2)):
        assert perturbed.eval_energy(0.0, u) >= perturbed.energy_floor


@pytest.mark.parametrize(
    'p',
    [
        Perturbation(linear=np.zeros(3)),
        Perturbation(linear=np.zeros(2), quadratic_vectors=(np.zeros(1),)),
        Perturbation(linear=np.zeros(2), diagonal=np.zeros(4)),
    ],
    ids=['linear', 'quadratic', 'diagonal'],
)
def test_perturbation_dimension(hat, p):
    with pytest.raises(DimensionMismatchError):
        perturb(hat, p)


def test_linear_term_breaks_circle(hat):
    perturbed = perturb(hat, Perturbation(linear=np.array([0.05, 0.0])))
    atlas = build_atlas(perturbed, rho=10.0)
    assert not atlas.continua
    components = components_at(atlas, 0.0)
    assert len(components) == 3
    assert not degenerate_points(atlas)


def test_degenerate_points_of_tilted(tilted):
    points = degenerate_points(build_atlas(tilted, rho=10.0))
    assert len(points) == 2
    np.testing.assert_allclose(
        sorted(abs(p.u[0]) for p in points), [1.0 / np.sqrt(3.0)] * 2, atol=5e-3,
    )


@pytest.mark.parametrize(
    ('kwargs', 'message'),
    [
        ({'radius': 0.1, 'count': 0}, 'count'),
        ({'radius': 0.1, 'count': 2, 'mode': 'cubic'}, 'mode'),
        ({'radius': -0.1, 'count': 2}, 'radius'),
    ],
    ids=['count', 'mode', 'radius'],
)
def test_sample_test_arguments(hat, kwargs, message):
    with pytest.raises(ValueError) as excinfo:
        sample_test(hat, **kwargs)
    assert message in str(excinfo.value)


def test_unperturbed_circle_fails(hat):
    result = sample_test(hat, radius=0.0, count=2)
    assert result['failed'] == 2
    assert result['pass_fraction'] == 0.0
    assert len(result['samples']) == 2
    assert result['samples'][0]['status'] == 'fail'


@pytest.mark.slow
def test_sample_test_is_seeded(tilted):
    first = sample_test(tilted, radius=0.1, count=4, seed=7)
    second = sample_test(tilted, radius=0.1, count=4, seed=7)
    assert [s['perturbation'] for s in first['samples']] == \
        [s['perturbation'] for s in second['samples']]
    assert first['pass_fraction'] == second['pass_fraction']


@pytest.mark.slow
def test_tilted_is_generic(tilted):
    result = sample_test(tilted, radius=0.1, count=100, seed=0)
    assert result['passed'] + result['failed'] + result['inconclusive'] == 100
    assert result['pass_fraction'] >= 0.95


@pytest.mark.slow
@pytest.mark.parametrize('mode', ['linear', LINEAR_QUADRATIC])
def test_perturbed_hat_is_generic(hat, mode):
    result = sample_test(hat, radius=0.1, count=100, seed=1, mode=mode)
    assert result['mode'] == mode
    assert result['pass_fraction'] >= 0.9
