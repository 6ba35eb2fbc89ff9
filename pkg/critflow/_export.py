"""
CSV, JSON and SVG writers for trajectories, witness curves, atlases and
reports.
"""
from __future__ import annotations

import json
import math
from csv import QUOTE_MINIMAL
from csv import writer
from io import StringIO
from os.path import join

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._exceptions import PandasNotSupported  # noqa: E402

try:
    import pandas as pd

    pandas_installed = True
except ModuleNotFoundError:
    pandas_installed = False

__all__ = ['Output', 'trajectory_table', 'curve_table', 'mass_table',
           'to_json', 'write_json', 'write_text', 'plot_trajectory',
           'plot_energy', 'plot_atlas', 'plot_masses']

FLOAT_FORMAT = '%.17g'
SVG_METADATA = {'Date': None}

plt.rcParams['svg.hashsalt'] = 'critflow'


class Output:
    DATAFRAME = 'data.frame'
    DICT = 'dict'
    STRING = 'string'


def _columns_to_csv(columns):
    header = list(columns)
    rows = zip(*(columns[name] for name in header))
    out = StringIO()
    table = writer(out, lineterminator='\n', quoting=QUOTE_MINIMAL)
    table.writerow(header)
    table.writerows([FLOAT_FORMAT % value for value in row] for row in rows)
    return out.getvalue()


def _columns_to_frame(columns):
    if not pandas_installed:
        raise PandasNotSupported()
    return pd.DataFrame(columns)


def _render(columns, output_type):
    return {
        Output.DATAFRAME: lambda: _columns_to_frame(columns),
        Output.DICT: lambda: {name: list(values) for name, values in columns.items()},
        Output.STRING: lambda: _columns_to_csv(columns),
    }[output_type]()


def trajectory_table(traj, output_type=Output.STRING):
    """Columns t, u_1..u_d, energy, slope, power, dissipation_density."""
    columns = {'t': traj.times.tolist()}
    for i in range(traj.dim):
        columns[f'u_{i + 1}'] = traj.states[:, i].tolist()
    columns['energy'] = traj.energies.tolist()
    columns['slope'] = traj.slopes.tolist()
    columns['power'] = traj.powers.tolist()
    columns['dissipation_density'] = traj.dissipation_density.tolist()
    return _render(columns, output_type)


def curve_table(curve, output_type=Output.STRING):
    """Witness curve columns s, theta_1..theta_d, slope, energy."""
    nodes = np.asarray(curve.nodes)
    columns = {'s': np.asarray(curve.params).tolist()}
    for i in range(nodes.shape[1]):
        columns[f'theta_{i + 1}'] = nodes[:, i].tolist()
    columns['slope'] = np.asarray(curve.slopes).tolist()
    columns['energy'] = np.asarray(curve.energies).tolist()
    return _render(columns, output_type)


def mass_table(localization, output_type=Output.STRING):
    rows = localization['rows']
    columns = {
        'epsilon': [row['epsilon'] for row in rows],
        'inside': [row['inside'] for row in rows],
        'outside': [row['outside'] for row in rows],
        'windows': [row['windows'] for row in rows],
    }
    return _render(columns, output_type)


def _plain(value):
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def to_json(payload):
    """Sorted keys, full precision floats, null for non-finite numbers."""
    return json.dumps(_plain(payload), sort_keys=True, indent=2, allow_nan=False)


def write_text(directory, name, text):
    path = join(directory, name)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(text)
    return path


def write_json(directory, name, payload):
    return write_text(directory, name, to_json(payload) + '\n')


def _save(fig, directory, name):
    path = join(directory, name)
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_trajectory(directory, traj, name='plot.svg'):
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in range(traj.dim):
        ax.plot(traj.times, traj.states[:, i], linewidth=1, label=f'u_{i + 1}')
    ax.set_xlabel('t')
    ax.set_ylabel('u')
    ax.set_title(f'{traj.model}, eps={traj.epsilon:g}')
    if traj.dim <= 8:
        ax.legend(loc='best', fontsize='small')
    return _save(fig, directory, name)


def plot_energy(directory, traj, jumps=(), name='energy.svg'):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(traj.times, traj.energies, linewidth=1)
    for jump in jumps:
        ax.axvline(jump.t_jump, color='tab:red', linestyle='--', linewidth=0.8)
    ax.set_xlabel('t')
    ax.set_ylabel('E(t, u)')
    return _save(fig, directory, name)


def plot_atlas(directory, atlas, name='atlas.svg'):
    fig, ax = plt.subplots(figsize=(6, 4))
    for branch in atlas.branches:
        points = branch.points
        ax.plot(points[:, 0], points[:, 1], linewidth=1)
        folds = [(p.t, p.u[0]) for p in branch.folds]
        if folds:
            ax.scatter(*zip(*folds), color='tab:red', s=12, zorder=3)
    ax.set_xlabel('t')
    ax.set_ylabel('u_1')
    return _save(fig, directory, name)


def plot_masses(directory, localization, name='masses.svg'):
    rows = localization['rows']
    fig, ax = plt.subplots(figsize=(6, 4))
    eps = [row['epsilon'] for row in rows]
    ax.loglog(eps, [max(row['inside'], 1e-16) for row in rows], marker='o', label='inside')
    ax.loglog(eps, [max(row['outside'], 1e-16) for row in rows], marker='s', label='outside')
    ax.set_xlabel('eps')
    ax.set_ylabel('mu_eps mass')
    ax.legend(loc='best', fontsize='small')
    return _save(fig, directory, name)
