from __future__ import annotations

import json
import math
from os import path

import numpy as np
import pytest

from critflow import builtin
from critflow import FlowConfig
from critflow import integrate
from critflow import Output
from critflow import PandasNotSupported
from critflow import trajectory_table
from critflow._export import curve_table
from critflow._export import mass_table
from critflow._export import pandas_installed
from critflow._export import plot_trajectory
from critflow._export import to_json
from critflow._export import write_json
from critflow._transition_cost import make_curve

if pandas_installed:
    import pandas


@pytest.fixture(scope='session')
def model():
    return builtin('double_well_2d')


@pytest.fixture(scope='session')
def traj(model):
    return integrate(model, FlowConfig(epsilon=0.05, step=1e-2), [0.5, 0.5])


def test_trajectory_csv(traj):
    lines = trajectory_table(traj).splitlines()
    assert lines[0] == 't,u_1,u_2,energy,slope,power,dissipation_density'
    assert len(lines) == len(traj) + 1
    values = [float(value) for value in lines[-1].split(',')]
    assert values[0] == traj.times[-1]
    assert values[1:3] == traj.states[-1].tolist()
    assert values[3] == traj.energies[-1]


def test_trajectory_dict(traj):
    table = trajectory_table(traj, output_type=Output.DICT)
    assert list(table) == ['t', 'u_1', 'u_2', 'energy', 'slope', 'power', 'dissipation_density']
    assert table['dissipation_density'][0] == 0.0
    assert len(table['t']) == len(traj)


@pytest.mark.pandas
@pytest.mark.skipif(pandas_installed is False, reason='requires pandas')
def test_trajectory_dataframe(traj):
    frame = trajectory_table(traj, output_type=Output.DATAFRAME)
    assert isinstance(frame, pandas.DataFrame)
    assert frame.shape == (len(traj), 7)


def test_dataframe_without_pandas(traj, monkeypatch):
    monkeypatch.setattr('critflow._export.pandas_installed', False)
    with pytest.raises(PandasNotSupported):
        trajectory_table(traj, output_type=Output.DATAFRAME)


def test_curve_table(model):
    nodes = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    table = curve_table(make_curve(model, 0.0, nodes, (None, None)), Output.DICT)
    assert table['s'] == [0.0, 0.5, 1.0]
    assert table['theta_2'] == [0.0, 0.0, 0.0]
    assert table['energy'] == [-0.25, 0.0, -0.25]


def test_mass_table():
    localization = {'rows': [
        {'epsilon': 0.1, 'inside': 0.4, 'outside': 0.1, 'windows': 1},
        {'epsilon': 0.01, 'inside': 0.49, 'outside': 0.01, 'windows': 1},
    ]}
    lines = mass_table(localization).splitlines()
    assert lines[0] == 'epsilon,inside,outside,windows'
    assert lines[2] == '0.01,0.48999999999999999,0.01,1'


def test_to_json_plain_values():
    payload = {
        'b': np.float64(1.5),
        'a': math.inf,
        'c': np.arange(3),
        'd': np.bool_(True),
        'e': (np.int64(4), float('nan')),
    }
    text = to_json(payload)
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {'a': None, 'b': 1.5, 'c': [0, 1, 2], 'd': True, 'e': [4, None]}


def test_write_json(tmp_path):
    target = write_json(str(tmp_path), 'x.json', {'value': 0.1})
    with open(target, encoding='utf-8') as handle:
        content = handle.read()
    assert content.endswith('}\n')
    assert json.loads(content) == {'value': 0.1}


def test_svg_is_reproducible(tmp_path, traj):
    first = plot_trajectory(str(tmp_path), traj, name='a.svg')
    second = plot_trajectory(str(tmp_path), traj, name='b.svg')
    with open(first, 'rb') as a, open(second, 'rb') as b:
        assert a.read() == b.read()
    assert path.getsize(first) > 0
