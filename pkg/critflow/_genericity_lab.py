"""
Generic perturbations E + <y, u> + K(u, u) / 2 and the sampling test of the
transversality conditions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from dataclasses import field
from multiprocessing.pool import ThreadPool

import numpy as np

from . import _logging
from ._critical_atlas import _sublevel_radius
from ._critical_atlas import build_atlas
from ._critical_atlas import classify
from ._critical_atlas import transversality
from ._exceptions import CritflowException
from ._exceptions import DimensionMismatchError
from ._viscosity_limit import worker_count

__all__ = ['Perturbation', 'perturb', 'degenerate_points', 'sample_test',
           'LINEAR', 'LINEAR_QUADRATIC']

LINEAR = 'linear'
LINEAR_QUADRATIC = 'linear_quadratic'
MODES = (LINEAR, LINEAR_QUADRATIC)

SUBLEVEL_RHO = 10.0
QUADRATIC_RANK = 2
SAMPLE_ATLAS = {'t_grid': 2, 'seed_grid': 5, 'arc_step': 0.05, 'probes': 2}


@dataclass(frozen=True, eq=False)
class Perturbation:
    linear: np.ndarray
    quadratic_vectors: tuple = ()
    radius: float = 0.0
    diagonal: np.ndarray | None = None

    @property
    def dim(self):
        return len(self.linear)

    def matrix(self):
        """K as a d x d matrix: sum of w w^T plus diag(z)."""
        k = np.zeros((self.dim, self.dim))
        for w in self.quadratic_vectors:
            k += np.outer(w, w)
        if self.diagonal is not None:
            k += np.diag(self.diagonal)
        return k

    def to_dict(self):
        return {
            'linear': np.asarray(self.linear).tolist(),
            'quadratic_vectors': [np.asarray(w).tolist() for w in self.quadratic_vectors],
            'radius': self.radius,
            'diagonal': None if self.diagonal is None else np.asarray(self.diagonal).tolist(),
        }


def _check_dims(model, p):
    vectors = [p.linear, *p.quadratic_vectors]
    if p.diagonal is not None:
        vectors.append(p.diagonal)
    for vector in vectors:
        if np.shape(vector) != (model.dim,):
            raise DimensionMismatchError(
                f'perturbation of {model.name} needs {model.dim}-vectors, '
                f'got shape {np.shape(vector)}',
            )


def perturb(model, p, rho=SUBLEVEL_RHO):
    """
    The model with energy E + <y, u> + K(u, u) / 2, gradient DE + y + Ku
    and Hessian D2E + K. The power is unchanged.

    The floor drops by |y| D plus the negative part of K times D^2 / 2, with
    D the diameter of the unperturbed sublevel {shifted energy <= rho}.
    """
    _check_dims(model, p)
    y = np.asarray(p.linear, dtype=float)
    k = p.matrix()
    smallest = float(np.linalg.eigvalsh(k)[0]) if model.dim else 0.0
    negative = max(0.0, -smallest)
    floor = model.energy_floor
    if np.any(y) or negative:
        diameter = 2.0 * _sublevel_radius(model, rho)
        floor -= np.linalg.norm(y) * diameter + 0.5 * negative * diameter ** 2

    def energy(t, u):
        return model.eval_energy(t, u) + float(y @ u) + 0.5 * float(u @ k @ u)

    def gradient(t, u):
        return model.eval_gradient(t, u) + y + k @ u

    def hessian(t, u):
        return model.eval_hessian(t, u) + k

    return dataclasses.replace(
        model,
        eval_energy=energy,
        eval_gradient=gradient,
        eval_hessian=hessian,
        lambda_bound=model.lambda_bound + negative,
        energy_floor=float(floor),
        name=f'{model.name}+perturbation',
        params={**model.params, 'perturbation': p.to_dict()},
        minimal_selection=None,
    )


def degenerate_points(atlas):
    """Degenerate critical points of an atlas: folds, continua, isolated points."""
    model = atlas.model
    points = []
    for branch in atlas.branches:
        for sample in branch.folds:
            points.append(classify(model, sample.t, sample.u))
    for continuum in atlas.continua:
        t = 0.0 if continuum.t is None else continuum.t
        points.append(classify(model, t, continuum.points[0]))
    points.extend(point for point in atlas.isolated if point.degenerate)
    return points


def _ball(rng, dim, radius):
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    if norm == 0:
        return np.zeros(dim)
    return radius * rng.uniform() ** (1.0 / dim) * direction / norm


def _draw(rng, dim, radius, mode):
    linear = _ball(rng, dim, radius)
    vectors = ()
    if mode == LINEAR_QUADRATIC:
        vectors = tuple(_ball(rng, dim, np.sqrt(radius)) for _ in range(QUADRATIC_RANK))
    return Perturbation(linear=linear, quadratic_vectors=vectors, radius=radius)


@dataclass
class _Verdict:
    index: int
    perturbation: Perturbation
    status: str
    degenerate: int = 0
    reports: list = field(default_factory=list)
    reason: str | None = None

    def to_dict(self):
        return {
            'index': self.index,
            'perturbation': self.perturbation.to_dict(),
            'status': self.status,
            'degenerate_points': self.degenerate,
            'reports': [report.to_dict() for report in self.reports],
            'reason': self.reason,
        }


def _judge(model, index, p, full, atlas_options):
    try:
        perturbed = perturb(model, p, rho=atlas_options.get('rho', SUBLEVEL_RHO))
        atlas = build_atlas(perturbed, **atlas_options)
    except (CritflowException, ValueError, np.linalg.LinAlgError) as e:
        return _Verdict(index, p, 'inconclusive', reason=str(e))
    if not atlas.branches and not atlas.continua and not atlas.isolated:
        return _Verdict(index, p, 'inconclusive', reason='empty atlas')

    points = degenerate_points(atlas)
    reports = [transversality(perturbed, point) for point in points]
    status = 'pass' if all(report.passed(full) for report in reports) else 'fail'
    return _Verdict(index, p, status, len(points), reports)


def sample_test(model, radius, count, seed=0, mode=LINEAR, atlas_options=None):
    """
    Draws ``count`` perturbations from the ball of the given radius, builds
    each perturbed atlas and checks every degenerate point for a simple kernel
    and a nonzero time derivative, plus the cubic term in linear_quadratic
    mode. Inconclusive samples are left out of the pass fraction.
    """
    if count < 1:
        raise ValueError(f'count must be at least 1, got {count}')
    if mode not in MODES:
        raise ValueError(f'unknown mode {mode!r}, expected one of {MODES}')
    if radius < 0:
        raise ValueError(f'radius must be nonnegative, got {radius}')

    options = {**SAMPLE_ATLAS, **(atlas_options or {})}
    rng = np.random.default_rng(seed)
    draws = [_draw(rng, model.dim, radius, mode) for _ in range(count)]
    full = mode == LINEAR_QUADRATIC

    def judge(item):
        index, p = item
        return _judge(model, index, p, full, options)

    with ThreadPool(min(worker_count(), count)) as pool:
        verdicts = pool.map(judge, enumerate(draws))

    passed = sum(v.status == 'pass' for v in verdicts)
    failed = sum(v.status == 'fail' for v in verdicts)
    inconclusive = count - passed - failed
    conclusive = passed + failed
    fraction = passed / conclusive if conclusive else None
    _logging.info(
        'genericity %s radius=%g mode=%s: %d pass, %d fail, %d inconclusive',
        model.name, radius, mode, passed, failed, inconclusive,
    )
    return {
        'model': model.name,
        'radius': radius,
        'count': count,
        'seed': seed,
        'mode': mode,
        'passed': passed,
        'failed': failed,
        'inconclusive': inconclusive,
        'pass_fraction': fraction,
        'samples': [verdict.to_dict() for verdict in verdicts],
    }
