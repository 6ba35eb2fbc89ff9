from __future__ import annotations

import math

import numpy as np
import pytest

from critflow import build_atlas
from critflow import builtin
from critflow import dissipation_localization
from critflow import EnergyModel
from critflow import extract_limit
from critflow import FlowConfig
from critflow import graph_hausdorff
from critflow import integrate
from critflow import sweep
from critflow import SweepError
from critflow._viscosity_limit import _extrapolate
from critflow._viscosity_limit import ExitKind
from critflow._viscosity_limit import jump_windows
from critflow._viscosity_limit import worker_count

T_STAR = 2.0 / (3.0 * math.sqrt(3.0))


@pytest.fixture(scope='session')
def tilted():
    return builtin('tilted_double_well', {'horizon': 1.0})


@pytest.fixture(scope='session')
def tilted_sweep(tilted):
    return sweep(tilted, [-1.0], [0.1, 0.03, 0.01, 0.003, 0.001])


@pytest.fixture(scope='session')
def tilted_limit(tilted, tilted_sweep):
    return extract_limit(tilted_sweep, build_atlas(tilted, rho=10.0))


@pytest.fixture(scope='session')
def bowl():
    return builtin('quadratic_bowl')


@pytest.fixture(scope='session')
def bowl_sweep(bowl):
    return sweep(bowl, [1.0], [0.1, 0.03, 0.01])


@pytest.fixture(scope='session')
def bowl_limit(bowl, bowl_sweep):
    return extract_limit(bowl_sweep, build_atlas(bowl, rho=10.0))


@pytest.mark.parametrize(
    'epsilons',
    [[], [0.1, 0.1], [0.1, -0.01], [0.01, 0.1]],
    ids=['empty', 'repeated', 'negative', 'increasing'],
)
def test_sweep_rejects_epsilons(bowl, epsilons):
    with pytest.raises(SweepError):
        sweep(bowl, [1.0], epsilons)


def test_sweep_records_failures():
    model = EnergyModel(
        dim=1,
        horizon=0.1,
        eval_energy=lambda t, u: 0.0,
        eval_power=lambda t, u: 0.0,
        eval_gradient=lambda t, u: np.array([np.nan]),
        eval_hessian=lambda t, u: np.eye(1),
        lambda_bound=0.0,
        power_constant=0.0,
        energy_floor=0.0,
    )
    with pytest.raises(SweepError) as excinfo:
        sweep(model, [0.5], [0.1, 0.05])
    assert 'failed' in str(excinfo.value)


def test_extract_limit_needs_two_viscosities(bowl):
    result = sweep(bowl, [1.0], [0.1])
    assert len(result.trajectories) == 1
    with pytest.raises(SweepError):
        extract_limit(result, build_atlas(bowl, rho=10.0))


def test_sweep_keeps_order(bowl_sweep):
    assert bowl_sweep.epsilons == [0.1, 0.03, 0.01]
    assert [traj.epsilon for traj in bowl_sweep.trajectories] == bowl_sweep.epsilons
    assert bowl_sweep.smallest.epsilon == 0.01
    assert not bowl_sweep.failures


def test_bowl_dissipation_closed_form(bowl):
    eps, tau = 0.01, 5e-4
    traj = integrate(bowl, FlowConfig(epsilon=eps, step=tau), [1.0])
    assert float(np.sum(traj.masses())) == pytest.approx(1.0 / (2.0 + tau / eps), rel=1e-9)


def test_windows_on_bowl(bowl_sweep):
    windows = jump_windows(bowl_sweep.smallest)
    assert len(windows) == 1
    lower, upper = windows[0]
    assert lower == 0.0
    assert upper == pytest.approx(0.25, abs=0.02)


def test_no_windows_at_rest(bowl):
    traj = integrate(bowl, FlowConfig(epsilon=0.01, step=1e-3), [0.0])
    assert jump_windows(traj) == []


def test_windows_scale_with_state(bowl):
    config = FlowConfig(epsilon=0.01, step=5e-4)
    large = jump_windows(integrate(bowl, config, [1.0]))
    small = jump_windows(integrate(bowl, config, [1e-3]))
    assert len(large) == 1
    assert len(small) == 1
    assert small[0][0] == large[0][0] == 0.0
    assert small[0][1] == pytest.approx(large[0][1], abs=2e-3)


def test_extrapolate():
    assert _extrapolate([0.1, 0.01], [1.1, 1.01], 1.0) == pytest.approx(1.0)
    assert _extrapolate([0.1, 0.01], [None, 2.0], 1.0) == 2.0
    assert _extrapolate([0.1], [None], 1.0) is None


def test_bowl_initial_jump(bowl_limit):
    assert len(bowl_limit.jumps) == 1
    assert bowl_limit.interior_jumps == []
    jump = bowl_limit.jumps[0]
    assert jump.exit_kind == ExitKind.INITIAL
    assert jump.t_jump == 0.0
    assert jump.t_extrapolated == 0.0
    assert not jump.left_component.critical
    assert jump.energy_drop == pytest.approx(0.5, abs=1e-8)
    assert jump.cost_value == pytest.approx(0.5, abs=1e-8)
    assert bowl_limit.bv_balance_residual < 1e-2
    assert bowl_limit.criticality_constant < 1.0
    assert not bowl_limit.nondeterministic


def test_bowl_localization(bowl_sweep, bowl_limit):
    report = dissipation_localization(bowl_sweep, bowl_limit)
    assert report['target'] == pytest.approx(0.5, abs=1e-8)
    assert len(report['rows']) == 3
    last = report['rows'][-1]
    assert last['windows'] == 1
    assert last['inside'] == pytest.approx(0.5, abs=0.02)
    assert last['outside'] < 1e-6
    assert report['converged']


def test_hausdorff_basics(bowl_sweep):
    coarse, _, fine = bowl_sweep.trajectories
    assert graph_hausdorff(fine, fine) == 0.0
    assert graph_hausdorff(coarse, fine) == graph_hausdorff(fine, coarse)
    assert graph_hausdorff(coarse, fine) > 0.0


def test_hausdorff_shrinks_with_eps(bowl_sweep):
    coarse, middle, fine = bowl_sweep.trajectories
    assert graph_hausdorff(middle, fine) < graph_hausdorff(coarse, fine)


def test_hausdorff_two_dimensional():
    model = builtin('double_well_2d')
    a = integrate(model, FlowConfig(epsilon=0.05, step=1e-3), [0.5, 0.5])
    b = integrate(model, FlowConfig(epsilon=0.02, step=1e-3), [0.5, 0.5])
    assert graph_hausdorff(a, a) == 0.0
    assert graph_hausdorff(a, b) == pytest.approx(graph_hausdorff(b, a))
    assert graph_hausdorff(a, b) > 0.0


def test_hausdorff_needs_shared_horizon(bowl):
    a = integrate(bowl, FlowConfig(epsilon=0.1, step=1e-2), [1.0])
    b = integrate(builtin('quadratic_bowl', {'horizon': 2.0}), FlowConfig(epsilon=0.1, step=1e-2), [1.0])
    with pytest.raises(ValueError):
        graph_hausdorff(a, b)


def test_worker_count(monkeypatch):
    monkeypatch.setenv('CRITFLOW_THREADS', '2')
    assert worker_count() == 2
    monkeypatch.setenv('CRITFLOW_THREADS', '0')
    assert worker_count() == 1
    monkeypatch.delenv('CRITFLOW_THREADS')
    assert 1 <= worker_count() <= 4


def test_worker_count_ignores_garbage(monkeypatch, caplog):
    monkeypatch.setenv('CRITFLOW_THREADS', 'many')
    with caplog.at_level('WARNING', logger='critflow'):
        assert 1 <= worker_count() <= 4
    assert 'CRITFLOW_THREADS' in caplog.text


@pytest.mark.slow
def test_tilted_single_fold_jump(tilted_limit):
    assert len(tilted_limit.interior_jumps) == 1
    jump = tilted_limit.interior_jumps[0]
    assert jump.resolved
    assert jump.exit_kind == ExitKind.FOLD
    assert jump.t_jump == pytest.approx(T_STAR, abs=5e-3)
    assert jump.left_component.representative[0] == pytest.approx(-1.0 / math.sqrt(3.0), abs=1e-2)
    assert jump.right_component.representative[0] == pytest.approx(2.0 / math.sqrt(3.0), abs=1e-2)
    assert jump.window[0] < T_STAR < jump.window[1]


@pytest.mark.slow
def test_tilted_jump_relation(tilted_limit):
    jump = tilted_limit.interior_jumps[0]
    assert jump.energy_drop == pytest.approx(0.75, abs=1e-2)
    assert jump.cost_value == pytest.approx(0.75, abs=1e-2)
    assert abs(jump.cost_value - jump.energy_drop) <= 1e-3
    assert jump.local_mu_mass == pytest.approx(0.75, abs=0.05)


@pytest.mark.slow
def test_tilted_limit_balance(tilted_limit):
    assert tilted_limit.bv_balance_residual <= 1e-2
    assert tilted_limit.stable_jump_count
    assert not tilted_limit.nondeterministic
    states = tilted_limit.limit_states[:, 0]
    before = tilted_limit.times < T_STAR - 1e-3
    after = tilted_limit.times > T_STAR + 1e-3
    assert np.all(states[before] < 0.0)
    assert np.all(states[after] > 1.0)


@pytest.mark.slow
def test_tilted_barycenters_approach_fold(tilted_limit):
    jump = tilted_limit.interior_jumps[0]
    delays = [b - T_STAR for b in jump.barycenters[-2:]]
    assert all(d > 0 for d in delays)
    assert delays[1] < delays[0]
    assert jump.t_extrapolated == pytest.approx(T_STAR, abs=0.02)


@pytest.mark.slow
def test_tilted_limit_to_dict(tilted_limit):
    payload = tilted_limit.to_dict()
    assert len(payload['jumps']) == len(tilted_limit.jumps)
    assert payload['jumps'][0]['exit_kind'] == ExitKind.FOLD
    assert payload['stable_jump_count']
