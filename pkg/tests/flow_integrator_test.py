from __future__ import annotations

import numpy as np
import pytest

from critflow import builtin
from critflow import descend
from critflow import dissipation_measure
from critflow import energy_identity_residual
from critflow import EnergyModel
from critflow import FlowConfig
from critflow import integrate
from critflow import NewtonDivergenceError
from critflow import shifted_energy
from critflow import StepSizeError
from critflow._flow_integrator import gronwall_ratio
from critflow._flow_integrator import young_gap


@pytest.fixture(scope='session')
def tilted():
    return builtin('tilted_double_well', {'horizon': 1.0})


@pytest.fixture(scope='session')
def bowl():
    return builtin('quadratic_bowl')


@pytest.fixture(scope='session')
def tilted_flow(tilted):
    return integrate(tilted, FlowConfig(epsilon=0.05, step=1e-4), [-1.0])


def test_energy_identity_converges(tilted, tilted_flow):
    coarse = energy_identity_residual(tilted, tilted_flow)
    fine = energy_identity_residual(
        tilted, integrate(tilted, FlowConfig(epsilon=0.05, step=5e-5), [-1.0]),
    )
    assert coarse < 1e-3
    assert fine <= 0.6 * coarse


def test_trajectory_shape(tilted_flow):
    assert len(tilted_flow) == 10001
    assert tilted_flow.times[0] == 0.0
    assert tilted_flow.horizon == pytest.approx(1.0)
    assert tilted_flow.dim == 1
    assert tilted_flow.dissipation_density[0] == 0.0
    assert tilted_flow.masses().shape == (10000,)
    assert tilted_flow.model == 'tilted_double_well'


def test_tilted_flow_crosses_to_right_well(tilted_flow):
    assert tilted_flow.states[0, 0] == -1.0
    assert tilted_flow.states[-1, 0] > 1.0


def test_bowl_matches_implicit_euler(bowl):
    eps, tau = 0.1, 1e-3
    traj = integrate(bowl, FlowConfig(epsilon=eps, step=tau), [1.0])
    k = np.arange(len(traj))
    np.testing.assert_allclose(traj.states[:, 0], (eps / (eps + tau)) ** k, rtol=1e-9)
    assert np.all(np.diff(traj.energies) <= 0)


def test_state_at_interpolates(bowl):
    traj = integrate(bowl, FlowConfig(epsilon=0.1, step=1e-2), [1.0])
    middle = 0.5 * (traj.states[3] + traj.states[4])
    np.testing.assert_allclose(traj.state_at(0.035), middle)


def test_dissipation_bookkeeping(tilted, tilted_flow):
    total = float(np.sum(tilted_flow.masses()))
    assert dissipation_measure(tilted_flow, (0.0, 1.0)) == pytest.approx(total)
    assert dissipation_measure(tilted_flow, (2.0, 3.0)) == 0.0
    assert young_gap(tilted_flow) >= 0.0
    assert gronwall_ratio(tilted, tilted_flow) <= 1.0 + 1e-12


@pytest.mark.parametrize(
    ('epsilon', 'step'),
    [(0.0, 1e-3), (0.1, 0.0), (-0.1, 1e-3)],
    ids=['zero_eps', 'zero_step', 'negative_eps'],
)
def test_flow_config_rejects_nonpositive(epsilon, step):
    with pytest.raises(StepSizeError):
        FlowConfig(epsilon=epsilon, step=step)


def test_step_constraint(tilted):
    with pytest.raises(StepSizeError) as excinfo:
        integrate(tilted, FlowConfig(epsilon=0.01, step=0.02), [-1.0])
    assert 'lambda' in str(excinfo.value)


def test_step_warning(tilted, caplog):
    with caplog.at_level('WARNING', logger='critflow'):
        FlowConfig(epsilon=0.01, step=0.015).check(tilted)
    assert 'nonconvex' in caplog.text


def test_newton_divergence_reports_step():
    model = EnergyModel(
        dim=1,
        horizon=1.0,
        eval_energy=lambda t, u: 0.0,
        eval_power=lambda t, u: 0.0,
        eval_gradient=lambda t, u: np.array([np.nan]),
        eval_hessian=lambda t, u: np.eye(1),
        lambda_bound=0.0,
        power_constant=0.0,
        energy_floor=0.0,
    )
    with pytest.raises(NewtonDivergenceError) as excinfo:
        integrate(model, FlowConfig(epsilon=0.1, step=0.1), [0.5])
    assert excinfo.value.step == 1
    assert str(excinfo.value).startswith('Newton solve diverged at step 1')


def test_refinement_adds_nodes(tilted):
    base = integrate(tilted, FlowConfig(epsilon=0.01, step=1e-3), [-1.0])
    refined = integrate(tilted, FlowConfig(epsilon=0.01, step=1e-3, refine=True), [-1.0])
    assert len(refined) > len(base)
    assert refined.times[-1] == pytest.approx(base.times[-1])
    assert np.all(np.diff(refined.times) > 0)


def test_descend_reaches_minimum(tilted):
    path = descend(tilted, 0.0, [0.3])
    assert path.converged
    assert not path.escaped
    assert path.endpoint[0] == pytest.approx(1.0, abs=1e-8)
    assert path.arclength == pytest.approx(0.7, abs=1e-6)


def test_descend_escapes_sublevel(tilted):
    u = np.array([2.5])
    path = descend(tilted, 0.0, u, rho=shifted_energy(tilted, 0.0, u) - 0.5)
    assert path.escaped
    assert not path.converged


@pytest.mark.parametrize(
    ('name', 'u0'),
    [('quadratic_bowl', [1.0]), ('mexican_hat', [0.2, 0.1]), ('mexican_hat', [1.5, -0.5])],
    ids=['bowl', 'hat_inside', 'hat_outside'],
)
def test_autonomous_energy_nonincreasing(name, u0):
    model = builtin(name)
    assert model.autonomous
    traj = integrate(model, FlowConfig(epsilon=0.05, step=1e-3), u0)
    assert np.all(np.diff(traj.energies) <= 1e-12)
    assert traj.energies[-1] < traj.energies[0]
