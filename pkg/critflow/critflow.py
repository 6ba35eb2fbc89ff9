#!/usr/bin/env python
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from functools import wraps

import matplotlib
import numpy as np
import scipy
from packaging.version import parse
from packaging.version import Version

from . import _logging
from ._critical_atlas import build_atlas
from ._critical_atlas import transversality
from ._energy_model import builtin
from ._energy_model import check_consistency
from ._exceptions import ConfigError
from ._exceptions import CritflowException
from ._exceptions import ModelError
from ._export import curve_table
from ._export import mass_table
from ._export import plot_atlas
from ._export import plot_energy
from ._export import plot_masses
from ._export import plot_trajectory
from ._export import trajectory_table
from ._export import write_json
from ._export import write_text
from ._flow_integrator import energy_identity_residual
from ._flow_integrator import FlowConfig
from ._flow_integrator import gronwall_ratio
from ._flow_integrator import integrate
from ._flow_integrator import young_gap
from ._genericity_lab import degenerate_points
from ._genericity_lab import sample_test
from ._transition_cost import TransitionGraph
from ._viscosity_limit import dissipation_localization
from ._viscosity_limit import extract_limit
from ._viscosity_limit import graph_hausdorff
from ._viscosity_limit import sweep
from ._viscosity_limit import worker_count

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

SCENARIOS = ('flow', 'sweep', 'atlas', 'cost', 'jumps', 'generic', 'report')
TOP_LEVEL_KEYS = {'scenario', 'output_dir', 'seed', 'model', 'params'}
PARAM_TYPES = {
    'epsilon': float,
    'epsilons': list,
    'u0': (float, list),
    'step': float,
    'base_step': float,
    'refine': bool,
    'rho': float,
    't_grid': int,
    'seed_grid': int,
    'arc_step': float,
    't': float,
    'radius': float,
    'count': int,
    'mode': str,
    'samples': int,
    'cross_check': bool,
    'plots': bool,
}
DEFAULT_EPSILONS = (0.1, 0.03, 0.01, 0.003)
NUMPY_MIN_VERSION = Version('1.22')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ScenarioFailure(Exception):
    def __init__(self, scenario, error):
        self.scenario = scenario
        self.error = error
        self.args = (scenario, error)


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    model: str
    model_params: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    output_dir: str = 'out'
    seed: int = 0

    def param(self, name, default=None):
        return self.params.get(name, default)

    def to_dict(self):
        return {
            'scenario': self.scenario,
            'model': {'name': self.model, 'params': dict(self.model_params)},
            'params': dict(self.params),
            'output_dir': self.output_dir,
            'seed': self.seed,
        }


def run_once(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        if not kwargs.pop('cached', False) or wrapper._result is wrapper:
            wrapper._result = func(*args, **kwargs)
        return wrapper._result

    wrapper._result = wrapper
    return wrapper


@run_once
def dependency_versions():
    versions = {
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'matplotlib': matplotlib.__version__,
    }
    if parse(versions['numpy']) < NUMPY_MIN_VERSION:
        _logging.warning(
            'numpy %s is older than the tested minimum %s',
            versions['numpy'], NUMPY_MIN_VERSION,
        )
    return versions


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_param(name, value):
    expected = PARAM_TYPES.get(name)
    if expected is None:
        raise ConfigError('unknown scenario parameter', f'params.{name}')
    kinds = expected if isinstance(expected, tuple) else (expected,)
    for kind in kinds:
        if kind is float and _is_number(value):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is list and isinstance(value, list):
            if not all(_is_number(item) for item in value):
                raise ConfigError('expected a list of numbers', f'params.{name}')
            return [float(item) for item in value]
        if kind is bool and isinstance(value, bool):
            return value
        if kind is str and isinstance(value, str):
            return value
    raise ConfigError(
        f'expected {" or ".join(kind.__name__ for kind in kinds)}, '
        f'got {type(value).__name__}',
        f'params.{name}',
    )


def parse_config(raw):
    """Validates a decoded config mapping into a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError('config must be a table')
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f'unknown keys: {", ".join(sorted(unknown))}')

    scenario = raw.get('scenario')
    if scenario not in SCENARIOS:
        raise ConfigError(f'unknown scenario {scenario!r}', 'scenario')

    model = raw.get('model')
    if not isinstance(model, dict) or not isinstance(model.get('name'), str):
        raise ConfigError('missing model name', 'model.name')
    model_params = model.get('params', {})
    if not isinstance(model_params, dict):
        raise ConfigError('expected a table', 'model.params')

    params = raw.get('params', {})
    if not isinstance(params, dict):
        raise ConfigError('expected a table', 'params')
    params = {name: _check_param(name, value) for name, value in params.items()}

    seed = raw.get('seed', 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError('expected an integer', 'seed')
    output_dir = raw.get('output_dir', 'out')
    if not isinstance(output_dir, str):
        raise ConfigError('expected a path', 'output_dir')

    return RunConfig(
        scenario=scenario,
        model=model['name'],
        model_params=dict(model_params),
        params=params,
        output_dir=output_dir,
        seed=seed,
    )


def load_config(path):
    """Reads a TOML or (by the .json suffix) JSON run configuration."""
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as e:
        raise ConfigError(f'cannot read config: {e.strerror}', str(path))

    try:
        if str(path).endswith('.json'):
            raw = json.loads(data.decode('utf-8'))
        else:
            raw = tomllib.loads(data.decode('utf-8'))
    except (ValueError, UnicodeDecodeError) as e:
        raise ConfigError(f'cannot parse config: {e}', str(path))
    return parse_config(raw)


def _u0(config, model):
    value = config.param('u0')
    if value is None:
        raise ConfigError('u0 is required for this scenario', 'params.u0')
    return np.atleast_1d(np.asarray(value, dtype=float))


def _atlas(config, model):
    return build_atlas(
        model,
        rho=config.param('rho', 10.0),
        t_grid=config.param('t_grid', 5),
        seed_grid=config.param('seed_grid', 7),
        arc_step=config.param('arc_step', 0.01),
        seed=config.seed,
    )


def _run_flow(config, model, out, plots):
    eps = config.param('epsilon', 0.1)
    step = config.param('step', min(1e-3, eps / 20.0))
    traj = integrate(
        model, FlowConfig(epsilon=eps, step=step, refine=config.param('refine', False)),
        _u0(config, model),
    )
    write_text(out, 'trajectory.csv', trajectory_table(traj))
    if plots:
        plot_trajectory(out, traj)
        plot_energy(out, traj)
    return {
        'nodes': len(traj),
        'epsilon': eps,
        'energy_identity_residual': energy_identity_residual(model, traj),
        'young_gap': young_gap(traj),
        'gronwall_ratio': gronwall_ratio(model, traj),
        'final_state': traj.states[-1],
    }


def _sweep(config, model):
    return sweep(
        model,
        _u0(config, model),
        config.param('epsilons', list(DEFAULT_EPSILONS)),
        {
            'base_step': config.param('base_step', 1e-3),
            'refine': config.param('refine', False),
        },
    )


def _run_sweep(config, model, out, plots):
    result = _sweep(config, model)
    rows = []
    for eps, traj in zip(result.epsilons, result.trajectories):
        rows.append({
            'epsilon': eps,
            'nodes': len(traj),
            'energy_identity_residual': energy_identity_residual(model, traj),
            'final_state': traj.states[-1],
        })
        write_text(out, f'trajectory_eps{eps:g}.csv', trajectory_table(traj))
    distances = [
        graph_hausdorff(a, b)
        for a, b in zip(result.trajectories, result.trajectories[1:])
    ]
    if plots:
        plot_trajectory(out, result.smallest)
    return {
        'trajectories': rows,
        'graph_hausdorff': distances,
        'failures': {f'{eps:g}': reason for eps, reason in result.failures.items()},
    }


def _run_atlas(config, model, out, plots):
    atlas = _atlas(config, model)
    write_json(out, 'atlas.json', atlas.to_dict())
    if plots and model.dim >= 1:
        plot_atlas(out, atlas)
    return {
        'branches': len(atlas.branches),
        'folds': atlas.fold_count,
        'continua': len(atlas.continua),
        'isolated': len(atlas.isolated),
        'coverage': atlas.coverage,
    }


def _run_cost(config, model, out, plots):
    atlas = _atlas(config, model)
    t = config.param('t', 0.0)
    graph = TransitionGraph(model, atlas, t)
    matrix = graph.cost_matrix()
    for (i, j), curve in sorted(graph.edges.items()):
        write_text(out, f'witness_{i}_{j}.csv', curve_table(curve))
    payload = {
        't': t,
        'components': [c.to_dict() for c in graph.components],
        'costs': [[value if math.isfinite(value) else None for value in row] for row in matrix],
        'edges': [[i, j] for i, j in sorted(graph.edges)],
        'escapes': len(graph.escapes),
        'unresolved': len(graph.unresolved),
    }
    write_json(out, 'costs.json', payload)
    return {'components': len(graph.components), 'edges': len(graph.edges)}


def _run_jumps(config, model, out, plots):
    result = _sweep(config, model)
    atlas = _atlas(config, model)
    limit = extract_limit(result, atlas, cross_check=config.param('cross_check', False))
    localization = dissipation_localization(result, limit)
    write_json(out, 'jumps.json', {
        'jumps': [jump.to_dict() for jump in limit.jumps],
        'interior_jumps': len(limit.interior_jumps),
    })
    write_json(out, 'limit.json', limit.to_dict())
    write_text(out, 'masses.csv', mass_table(localization))
    write_json(out, 'localization.json', localization)
    if plots:
        plot_energy(out, result.smallest, limit.jumps)
        plot_masses(out, localization)
    return {
        'jumps': len(limit.jumps),
        'interior_jumps': len(limit.interior_jumps),
        'bv_balance_residual': limit.bv_balance_residual,
        'converged': localization['converged'],
    }


def _run_generic(config, model, out, plots):
    report = sample_test(
        model,
        radius=config.param('radius', 0.1),
        count=config.param('count', 20),
        seed=config.seed,
        mode=config.param('mode', 'linear'),
    )
    write_json(out, 'generic.json', report)
    return {
        'pass_fraction': report['pass_fraction'],
        'inconclusive': report['inconclusive'],
    }


def _run_report(config, model, out, plots):
    consistency = check_consistency(
        model,
        samples=config.param('samples', 200),
        seed=config.seed,
        sublevel=config.param('rho', 10.0),
    )
    atlas = _atlas(config, model)
    verdicts = [
        {'point': point.to_dict(), 'transversality': transversality(model, point).to_dict()}
        for point in degenerate_points(atlas)
    ]
    write_json(out, 'report.json', {
        'consistency': consistency.to_dict(),
        'atlas': {
            'branches': len(atlas.branches),
            'folds': atlas.fold_count,
            'continua': len(atlas.continua),
        },
        'degenerate_points': verdicts,
    })
    if plots:
        plot_atlas(out, atlas)
    return {'consistency_passed': consistency.passed, 'degenerate_points': len(verdicts)}


RUNNERS = {
    'flow': _run_flow,
    'sweep': _run_sweep,
    'atlas': _run_atlas,
    'cost': _run_cost,
    'jumps': _run_jumps,
    'generic': _run_generic,
    'report': _run_report,
}


def run(config, plots=True):
    """
    Executes the configured scenario and writes its artifacts plus
    manifest.json into ``config.output_dir``.
    """
    try:
        model = builtin(config.model, config.model_params)
    except ModelError as e:
        raise ConfigError(str(e), 'model')
    os.makedirs(config.output_dir, exist_ok=True)
    plots = plots and config.param('plots', True)
    started = time.time()
    status = 'ok'
    summary = {}
    try:
        summary = RUNNERS[config.scenario](config, model, config.output_dir, plots)
    except ConfigError:
        status = 'invalid'
        raise
    except (CritflowException, np.linalg.LinAlgError, FloatingPointError) as e:
        status = 'failed'
        write_json(config.output_dir, 'failure.json', {
            'scenario': config.scenario,
            'error': type(e).__name__,
            'message': str(e),
        })
        raise ScenarioFailure(config.scenario, e)
    finally:
        write_json(config.output_dir, 'manifest.json', {
            'config': config.to_dict(),
            'versions': dependency_versions(cached=True),
            'threads': worker_count(),
            'status': status,
            'summary': summary,
            'timestamp': started,
            'wall_time': time.time() - started,
        })
    return summary


def _parser():
    parser = argparse.ArgumentParser(
        prog='critflow',
        description='Vanishing-viscosity gradient flow experiments',
    )
    parser.add_argument('--config', required=True, help='TOML or JSON run configuration')
    parser.add_argument('--output', help='output directory (overrides output_dir)')
    parser.add_argument('--seed', type=int, help='seed (overrides the config)')
    parser.add_argument('--quiet', action='store_true', help='only report errors')
    parser.add_argument('--no-plots', action='store_true', help='skip SVG figures')
    parser.add_argument('--trace', action='store_true', help='log every solver iteration')
    return parser


def _enable_logging(quiet, trace=False):
    logger = logging.getLogger('critflow')
    if quiet or any(getattr(h, '_critflow_cli', False) for h in logger.handlers):
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s'))
    handler._critflow_cli = True
    if trace:
        _logging.enable_trace(True, handler)
        return
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


def main(argv=None):
    args = _parser().parse_args(argv)
    _enable_logging(args.quiet, args.trace)

    try:
        config = load_config(args.config)
        if args.output is not None:
            config = replace(config, output_dir=args.output)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        run(config, plots=not args.no_plots)
    except ConfigError as e:
        print(f'ConfigError: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioFailure as e:
        print(f'{type(e.error).__name__}: {e.error}', file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == '__main__':
    raise SystemExit(main())
