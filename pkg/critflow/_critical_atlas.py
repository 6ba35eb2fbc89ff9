"""
Critical points DE(t, u) = 0: deflated Newton search, pseudo-arclength
continuation in (t, u), fold refinement, fixed-time continua and the
transversality checks on degenerate points.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from dataclasses import field

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from . import _logging
from ._energy_model import as_state
from ._energy_model import shifted_energy
from ._energy_model import time_gradient
from ._exceptions import ContinuationError

__all__ = ['CriticalPoint', 'BranchSample', 'CriticalBranch',
           'CriticalContinuum', 'ComponentRef', 'Atlas',
           'TransversalityReport', 'classify', 'find_critical',
           'continue_branch', 'trace_continuum', 'build_atlas',
           'components_at', 'lift', 'snap', 'transversality',
           'lusin_diagnostic', 'follow', 'sheet_span']

CRITICAL_TOL = 1e-9
DEGENERACY_FACTOR = 1e-6
TRANSVERSALITY_TOL = 1e-6
FOLD_TOL = 1e-10
LUSIN_CLUSTER_TOL = 1e-8
TIME_STEP = 1e-5
CUBIC_STEP = 1e-4

MIN = 'nondegenerate_min'
SADDLE = 'nondegenerate_saddle'
MAX = 'nondegenerate_max'
DEGENERATE = 'degenerate'

SHEET_ID = re.compile(r'^b(\d+)s(\d+)$')


def critical_bound(u, tol=CRITICAL_TOL):
    return tol * (1.0 + float(np.linalg.norm(u)))


@dataclass(frozen=True, eq=False)
class CriticalPoint:
    t: float
    u: np.ndarray
    residual: float
    spectrum: np.ndarray
    kernel_dim: int
    morse_index: int
    classification: str
    degeneracy_tol: float = 0.0

    @property
    def degenerate(self):
        return self.kernel_dim > 0

    def to_dict(self):
        return {
            't': self.t,
            'u': self.u.tolist(),
            'residual': self.residual,
            'spectrum': self.spectrum.tolist(),
            'kernel_dim': self.kernel_dim,
            'morse_index': self.morse_index,
            'classification': self.classification,
        }


@dataclass(frozen=True, eq=False)
class BranchSample:
    s: float
    t: float
    u: np.ndarray
    tangent: np.ndarray
    spectrum: np.ndarray
    fold: bool = False

    def to_dict(self):
        return {
            's': self.s,
            't': self.t,
            'u': self.u.tolist(),
            'spectrum': self.spectrum.tolist(),
            'fold': self.fold,
        }


@dataclass(eq=False)
class CriticalBranch:
    samples: list
    stops: tuple = ('span', 'span')
    truncated: bool = False
    closed: bool = False

    @property
    def folds(self):
        return [sample for sample in self.samples if sample.fold]

    @property
    def points(self):
        """Samples as rows (t, u_1, ..., u_d)."""
        return np.array([np.concatenate(([p.t], p.u)) for p in self.samples])

    def sheets(self):
        """Index ranges between consecutive folds, ends inclusive."""
        cuts = [i for i, p in enumerate(self.samples) if p.fold]
        bounds = sorted({0, len(self.samples) - 1, *cuts})
        return [(a, b) for a, b in zip(bounds, bounds[1:])] or [(0, 0)]

    def to_dict(self):
        return {
            'samples': [sample.to_dict() for sample in self.samples],
            'stops': list(self.stops),
            'truncated': self.truncated,
            'closed': self.closed,
        }


@dataclass(eq=False)
class CriticalContinuum:
    """
    A curve of critical points at one fixed time, traced along the
    Hessian kernel. ``t`` is None when the model is autonomous.
    """

    t: float | None
    points: np.ndarray
    closed: bool

    def valid_at(self, t):
        return self.t is None or abs(self.t - t) <= 1e-12

    def distance(self, u):
        return _polyline_distance(self.points, u, self.closed)

    def to_dict(self):
        return {
            't': self.t,
            'points': self.points.tolist(),
            'closed': self.closed,
        }


@dataclass(frozen=True, eq=False)
class ComponentRef:
    kind: str
    t: float
    representative: np.ndarray
    component_id: str | None = None
    point: CriticalPoint | None = None
    continuum: CriticalContinuum | None = None

    CRITICAL = 'critical_component'
    SINGLETON = 'noncritical_singleton'

    @property
    def critical(self):
        return self.kind == self.CRITICAL

    def distance(self, u):
        if self.continuum is not None:
            return self.continuum.distance(u)
        return float(np.linalg.norm(np.asarray(u) - self.representative))

    def to_dict(self):
        return {
            'kind': self.kind,
            't': self.t,
            'representative': self.representative.tolist(),
            'component_id': self.component_id,
            'classification': self.point.classification if self.point else None,
        }


@dataclass(eq=False)
class Atlas:
    model: object
    rho: float
    branches: list
    isolated: list = field(default_factory=list)
    continua: list = field(default_factory=list)
    window: tuple = (0.0, 1.0)
    arc_step: float = 0.01
    coverage: dict = field(default_factory=dict)

    @property
    def fold_count(self):
        return sum(len(branch.folds) for branch in self.branches)

    def to_dict(self):
        return {
            'model': self.model.name,
            'rho': self.rho,
            'window': list(self.window),
            'branches': [branch.to_dict() for branch in self.branches],
            'isolated': [point.to_dict() for point in self.isolated],
            'continua': [continuum.to_dict() for continuum in self.continua],
            'coverage': dict(self.coverage),
        }


@dataclass(frozen=True)
class TransversalityReport:
    kernel_dim: int
    t2_value: float | None
    t3_value: float | None
    passes_t1: bool
    passes_t2: bool
    passes_t3: bool

    def passed(self, full=False):
        ok = self.passes_t1 and self.passes_t2
        return ok and self.passes_t3 if full else ok

    def to_dict(self):
        return {
            'kernel_dim': self.kernel_dim,
            't2_value': self.t2_value,
            't3_value': self.t3_value,
            'passes_t1': self.passes_t1,
            'passes_t2': self.passes_t2,
            'passes_t3': self.passes_t3,
        }


def _polyline_distance(points, u, closed=False):
    if len(points) == 1:
        return float(np.linalg.norm(points[0] - u))
    starts = points if closed else points[:-1]
    ends = np.roll(points, -1, axis=0) if closed else points[1:]
    edges = ends - starts
    lengths = np.einsum('ij,ij->i', edges, edges)
    weights = np.einsum('ij,ij->i', u - starts, edges) / np.where(lengths > 0, lengths, 1.0)
    weights = np.clip(weights, 0.0, 1.0)
    nearest = starts + weights[:, None] * edges
    return float(np.min(np.linalg.norm(nearest - u, axis=1)))


def _solve(matrix, rhs):
    try:
        return np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(matrix, rhs, rcond=None)[0]


def _kernel_vector(hessian):
    values, vectors = np.linalg.eigh(hessian)
    v = vectors[:, int(np.argmin(np.abs(values)))]
    if v[int(np.argmax(np.abs(v)))] < 0:
        v = -v
    return v


def classify(model, t, u):
    u = as_state(model, u)
    hessian = model.eval_hessian(t, u)
    spectrum = np.linalg.eigvalsh(hessian)
    tol = DEGENERACY_FACTOR * (1.0 + float(np.abs(spectrum).max()))
    kernel_dim = int(np.sum(np.abs(spectrum) <= tol))
    morse_index = int(np.sum(spectrum < -tol))

    if kernel_dim:
        label = DEGENERATE
    elif morse_index == 0:
        label = MIN
    elif morse_index == model.dim:
        label = MAX
    else:
        label = SADDLE

    return CriticalPoint(
        t=float(t),
        u=u,
        residual=float(np.linalg.norm(model.eval_gradient(t, u))),
        spectrum=spectrum,
        kernel_dim=kernel_dim,
        morse_index=morse_index,
        classification=label,
        degeneracy_tol=tol,
    )


def _deflation(u, roots, power=2, shift=1.0):
    """Deflation factor prod(|u - r|^-p + shift) and its log-gradient."""
    factor = 1.0
    log_gradient = np.zeros_like(u)
    for root in roots:
        diff = u - root
        distance = max(float(diff @ diff), 1e-300)
        term = distance ** (-power / 2) + shift
        factor *= term
        log_gradient += -power * distance ** (-power / 2 - 1) * diff / term
    return factor, log_gradient


def _polish(model, t, u, max_iter=60):
    """Minimum-norm Newton at fixed t while the residual keeps decreasing."""
    residual = float(np.linalg.norm(model.eval_gradient(t, u)))
    for _ in range(max_iter):
        if residual == 0.0:
            break
        step = np.linalg.lstsq(
            model.eval_hessian(t, u), -model.eval_gradient(t, u), rcond=None,
        )[0]
        candidate = u + step
        candidate_residual = float(np.linalg.norm(model.eval_gradient(t, candidate)))
        if not candidate_residual < residual:
            break
        u, residual = candidate, candidate_residual
    return u, residual


def _newton_root(model, t, seed, roots, tol, max_iter):
    u = np.array(seed, dtype=float)
    for _ in range(max_iter):
        gradient = model.eval_gradient(t, u)
        if np.linalg.norm(gradient) <= critical_bound(u, tol):
            return _polish(model, t, u)[0]

        step = _solve(model.eval_hessian(t, u), -gradient)
        if roots:
            _, log_gradient = _deflation(u, roots)
            denominator = 1.0 - float(log_gradient @ step)
            if abs(denominator) > 1e-12:
                step = step / denominator

        def merit(v):
            value = float(np.linalg.norm(model.eval_gradient(t, v)))
            return _deflation(v, roots)[0] * value if roots else value

        current = merit(u)
        alpha = 1.0
        while alpha > 1e-8:
            candidate = u + alpha * step
            if merit(candidate) < current:
                break
            alpha *= 0.5
        else:
            return None
        u = candidate
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) > 1e8:
            return None
    return None


def find_critical(model, t, seeds, tol=CRITICAL_TOL, max_iter=100):
    """
    Deflated Newton from every seed; roots already found at this time
    deflate the merit function of later seeds.
    """
    seeds = [as_state(model, seed) for seed in seeds]
    if not seeds:
        raise ValueError('find_critical needs at least one seed')

    roots = []
    for seed in seeds:
        root = _newton_root(model, t, seed, roots, tol, max_iter)
        if root is None:
            _logging.trace('no root from seed %s at t=%g', seed, t)
            continue
        if np.linalg.norm(model.eval_gradient(t, root)) > critical_bound(root, tol):
            continue
        if any(np.linalg.norm(root - other) <= 1e-6 * (1.0 + np.linalg.norm(root))
               for other in roots):
            continue
        roots.append(root)
    return [classify(model, t, root) for root in roots]


def _tangent(model, t, u, previous=None):
    """
    Unit null vector of [d_t DE | D^2E] and the kernel dimension of that
    extended Jacobian.
    """
    jacobian = np.column_stack((time_gradient(model, t, u), model.eval_hessian(t, u)))
    _, singular, vt = np.linalg.svd(jacobian)
    tol = 1e-8 * (1.0 + float(singular.max()))
    kernel = 1 + int(np.sum(singular <= tol))
    tangent = vt[-1]
    if previous is not None:
        if tangent @ previous < 0:
            tangent = -tangent
    elif abs(tangent[0]) > 1e-12:
        tangent = tangent * np.sign(tangent[0])
    elif tangent[int(np.argmax(np.abs(tangent)))] < 0:
        tangent = -tangent
    return tangent, kernel


def _correct(model, predicted, tangent, tol, max_iter=20):
    """Newton on (DE(x) = 0, <tangent, x - predicted> = 0)."""
    x = predicted.copy()
    dim = len(x) - 1
    for _ in range(max_iter):
        t, u = x[0], x[1:]
        gradient = model.eval_gradient(t, u)
        constraint = float(tangent @ (x - predicted))
        if np.linalg.norm(gradient) <= critical_bound(u, tol) and abs(constraint) < 1e-12:
            return x
        jacobian = np.zeros((dim + 1, dim + 1))
        jacobian[:dim, 0] = time_gradient(model, t, u)
        jacobian[:dim, 1:] = model.eval_hessian(t, u)
        jacobian[dim] = tangent
        x = x + _solve(jacobian, -np.append(gradient, constraint))
        if not np.all(np.isfinite(x)):
            return None
    t, u = x[0], x[1:]
    if np.linalg.norm(model.eval_gradient(t, u)) <= critical_bound(u, tol):
        return x
    return None


def _sample(model, s, x, tangent, fold=False):
    t, u = float(x[0]), x[1:].copy()
    return BranchSample(
        s=float(s),
        t=t,
        u=u,
        tangent=tangent,
        spectrum=np.linalg.eigvalsh(model.eval_hessian(t, u)),
        fold=fold,
    )


def _refine_fold(model, x, tangent, h, tol):
    """Bisection on the sign of t'(s) between x and the point h ahead."""
    lower, upper = 0.0, h
    best = None
    for _ in range(200):
        sigma = 0.5 * (lower + upper)
        point = _correct(model, x + sigma * tangent, tangent, tol)
        if point is None:
            break
        direction, _ = _tangent(model, point[0], point[1:], tangent)
        best = (sigma, point, direction)
        if abs(direction[0]) < FOLD_TOL:
            break
        if np.sign(direction[0]) == np.sign(tangent[0]):
            lower = sigma
        else:
            upper = sigma
        if upper - lower < 1e-15:
            break
    return best


def _trace(model, x, tangent, sign, arc_step, s_limit, rho, window, tol, max_samples):
    samples = []
    start = x.copy()
    direction = sign * tangent
    h = arc_step
    s = 0.0
    reason = 'span'

    while len(samples) < max_samples:
        if s >= s_limit:
            break
        point = _correct(model, x + h * direction, direction, tol)
        if point is None:
            h *= 0.5
            if h < arc_step * 1e-4:
                reason = 'corrector'
                break
            continue

        t, u = point[0], point[1:]
        if not window[0] <= t <= window[1]:
            reason = 'window'
            break
        if shifted_energy(model, t, u) > rho:
            reason = 'sublevel'
            break
        new_direction, kernel = _tangent(model, t, u, direction)
        if kernel >= 2:
            reason = 'tangent'
            break

        if direction[0] * new_direction[0] < 0:
            refined = _refine_fold(model, x, direction, h, tol)
            if refined is not None:
                sigma, fold_point, fold_direction = refined
                samples.append(
                    _sample(model, sign * (s + sigma), fold_point, sign * fold_direction, True),
                )

        step = float(np.linalg.norm(point - x))
        s += step
        samples.append(_sample(model, sign * s, point, sign * new_direction))
        x, direction = point, new_direction
        h = min(arc_step, 1.5 * h)

        if len(samples) > 3 and np.linalg.norm(point - start) < 1.5 * arc_step:
            reason = 'closed'
            break

    return samples, reason


def continue_branch(
        model,
        start,
        arc_step=0.01,
        s_span=(-50.0, 50.0),
        rho=math.inf,
        window=None,
        tol=CRITICAL_TOL,
        max_samples=100000,
):
    """
    Pseudo-arclength continuation of the critical set through ``start``.

    Both directions are traced until the sublevel, the time window or the
    arclength span ends the branch. Sign changes of t'(s) are bisected to
    fold samples with |t'| < 1e-10.
    """
    if start.residual > critical_bound(start.u, tol):
        raise ContinuationError(
            f'start point residual {start.residual:.3e} exceeds the critical bound',
        )
    if window is None:
        window = (-model.horizon, 2.0 * model.horizon)

    x = np.concatenate(([start.t], start.u))
    tangent, kernel = _tangent(model, start.t, start.u)
    if kernel >= 2:
        _logging.debug('tangent undefined at t=%g u=%s', start.t, start.u)
        return CriticalBranch(
            samples=[_sample(model, 0.0, x, tangent)],
            stops=('tangent', 'tangent'),
            truncated=True,
        )

    first = _sample(model, 0.0, x, tangent, fold=abs(tangent[0]) < FOLD_TOL and start.degenerate)
    forward, forward_reason = _trace(
        model, x, tangent, 1.0, arc_step, s_span[1], rho, window, tol, max_samples,
    )
    if forward_reason == 'closed':
        backward, backward_reason = [], 'closed'
    else:
        backward, backward_reason = _trace(
            model, x, tangent, -1.0, arc_step, -s_span[0], rho, window, tol, max_samples,
        )

    samples = backward[::-1] + [first] + forward
    branch = CriticalBranch(
        samples=samples,
        stops=(backward_reason, forward_reason),
        truncated='corrector' in (backward_reason, forward_reason) or
        'tangent' in (backward_reason, forward_reason),
        closed=forward_reason == 'closed',
    )
    _logging.debug(
        'branch from t=%g: %d samples, %d folds, stops %s',
        start.t, len(samples), len(branch.folds), branch.stops,
    )
    return branch


def trace_continuum(model, start, arc_step=0.05, max_points=5000, tol=CRITICAL_TOL):
    """
    Follows a fixed-time curve of critical points along the Hessian kernel,
    correcting with minimum-norm Newton steps.
    """
    t = start.t
    u = start.u.copy()
    direction = _kernel_vector(model.eval_hessian(t, u))
    points = [u]
    closed = False
    h = arc_step

    while len(points) < max_points:
        candidate, residual = _polish(model, t, u + h * direction)
        moved = float(np.linalg.norm(candidate - u))
        if residual > critical_bound(candidate, tol) or not 0.25 * h < moved < 2.0 * h:
            h *= 0.5
            if h < arc_step * 1e-3:
                break
            continue
        point = classify(model, t, candidate)
        if not point.degenerate:
            break
        new_direction = _kernel_vector(model.eval_hessian(t, candidate))
        if new_direction @ direction < 0:
            new_direction = -new_direction
        points.append(candidate)
        u, direction = candidate, new_direction
        h = min(arc_step, 1.5 * h)
        if len(points) > 3 and np.linalg.norm(candidate - start.u) < 1.5 * arc_step:
            closed = True
            break

    return CriticalContinuum(
        t=None if model.autonomous else t,
        points=np.array(points),
        closed=closed,
    )


def _sublevel_radius(model, rho):
    directions = [np.eye(model.dim)[i] for i in range(min(model.dim, 4))]
    directions.append(np.ones(model.dim) / math.sqrt(model.dim))
    radius = 1.0
    for t in (0.0, model.horizon):
        for direction in directions:
            for sign in (1.0, -1.0):
                r = 0.5
                while r < 1e4 and shifted_energy(model, t, sign * r * direction) <= rho:
                    r *= 1.25
                radius = max(radius, r)
    return radius


def _seeds(model, radius, seed_grid, rng):
    axis = np.linspace(-radius, radius, seed_grid)
    if seed_grid ** model.dim <= 4096:
        mesh = np.meshgrid(*([axis] * model.dim), indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=1)
    ones = np.ones(model.dim)
    scattered = rng.uniform(-radius, radius, size=(seed_grid ** 2, model.dim))
    return np.vstack([np.outer(axis, ones), scattered])


def _covered(atlas, t, u, tol):
    point = np.concatenate(([t], u))
    for branch in atlas.branches:
        distances = np.linalg.norm(branch.points - point, axis=1)
        if distances.min() <= tol:
            return True
    return any(
        continuum.valid_at(t) and continuum.distance(u) <= tol
        for continuum in atlas.continua
    )


def _merge_branches(branches, tol):
    kept = []
    for branch in branches:
        points = branch.points
        duplicate = any(
            max(directed_hausdorff(points, other.points)[0],
                directed_hausdorff(other.points, points)[0]) < tol
            for other in kept
        )
        if not duplicate:
            kept.append(branch)
    return kept


def build_atlas(
        model,
        rho=10.0,
        t_grid=5,
        seed_grid=7,
        arc_step=0.01,
        margin=None,
        continuum_step=0.05,
        probes=8,
        seed=0,
):
    """
    Seeds find_critical on a t x u grid covering {shifted energy <= rho},
    continues every root that no earlier branch or continuum covers, merges
    duplicated branches and probes the result with fresh random seeds.
    """
    if not rho > 1:
        raise ValueError(f'rho must exceed 1, got {rho}')

    margin = model.horizon if margin is None else margin
    window = (-margin, model.horizon + margin)
    rng = np.random.default_rng(seed)
    radius = _sublevel_radius(model, rho)
    seeds = _seeds(model, radius, seed_grid, rng)
    atlas = Atlas(model=model, rho=rho, branches=[], window=window, arc_step=arc_step)
    times = np.linspace(0.0, model.horizon, max(1, t_grid))

    for t in times:
        for point in find_critical(model, t, seeds):
            if shifted_energy(model, t, point.u) > rho:
                continue
            if _covered(atlas, t, point.u, arc_step):
                continue
            _, kernel = _tangent(model, t, point.u)
            if kernel >= 2:
                continuum = trace_continuum(model, point, continuum_step)
                if len(continuum.points) > 1:
                    atlas.continua.append(continuum)
                else:
                    atlas.isolated.append(point)
                continue
            atlas.branches.append(
                continue_branch(model, point, arc_step, rho=rho, window=window),
            )

    atlas.branches = _merge_branches(atlas.branches, 1e-6)
    atlas.coverage = _coverage(atlas, radius, probes, rng)
    _logging.info(
        'atlas %s rho=%g: %d branches, %d folds, %d continua, %d isolated',
        model.name, rho, len(atlas.branches), atlas.fold_count,
        len(atlas.continua), len(atlas.isolated),
    )
    return atlas


def _coverage(atlas, radius, probes, rng):
    model = atlas.model
    misses = 0
    roots = 0
    worst = 0.0
    for _ in range(probes):
        t = float(rng.uniform(0.0, model.horizon))
        seeds = rng.uniform(-radius, radius, size=(4, model.dim))
        for point in find_critical(model, t, seeds):
            if shifted_energy(model, t, point.u) > atlas.rho:
                continue
            roots += 1
            components = components_at(atlas, t)
            distance = min((c.distance(point.u) for c in components), default=math.inf)
            worst = max(worst, distance)
            if distance > max(1e-6, atlas.arc_step):
                misses += 1
    return {'probes': probes, 'roots': roots, 'misses': misses, 'max_distance': worst}


def _sheet_point(model, branch, sheet, t):
    lower, upper = sheet
    samples = branch.samples[lower:upper + 1]
    ts = np.array([p.t for p in samples])
    if not ts.min() - 1e-14 <= t <= ts.max() + 1e-14:
        return None
    for a, b in zip(samples, samples[1:]):
        if min(a.t, b.t) - 1e-14 <= t <= max(a.t, b.t) + 1e-14:
            span = b.t - a.t
            weight = 0.0 if span == 0 else (t - a.t) / span
            guess = a.u + weight * (b.u - a.u)
            break
    else:
        guess = samples[0].u
    u, residual = _polish(model, t, guess.copy(), max_iter=30)
    if residual > critical_bound(u):
        return None
    return u


def components_at(atlas, t):
    """
    The component class of C(t) seen by the atlas: sheet crossings polished
    at fixed t, coincident crossings merged, plus the continua valid at t.
    """
    model = atlas.model
    components = []
    for k, branch in enumerate(atlas.branches):
        for j, sheet in enumerate(branch.sheets()):
            u = _sheet_point(model, branch, sheet, t)
            if u is None:
                continue
            if any(c.distance(u) <= 1e-7 * (1.0 + np.linalg.norm(u)) for c in components):
                continue
            components.append(ComponentRef(
                kind=ComponentRef.CRITICAL,
                t=float(t),
                representative=u,
                component_id=f'b{k}s{j}',
                point=classify(model, t, u),
            ))
    for j, continuum in enumerate(atlas.continua):
        if continuum.valid_at(t):
            components.append(ComponentRef(
                kind=ComponentRef.CRITICAL,
                t=float(t),
                representative=continuum.points[0],
                component_id=f'loop{j}',
                point=classify(model, t, continuum.points[0]),
                continuum=continuum,
            ))
    for j, point in enumerate(atlas.isolated):
        if abs(point.t - t) <= 1e-12:
            components.append(ComponentRef(
                kind=ComponentRef.CRITICAL,
                t=float(t),
                representative=point.u,
                component_id=f'iso{j}',
                point=point,
            ))
    return components


def snap(atlas, t, u, components=None):
    """Nearest atlas component at time t and its distance from u."""
    components = components_at(atlas, t) if components is None else components
    if not components:
        return None, math.inf
    distances = [component.distance(u) for component in components]
    best = int(np.argmin(distances))
    return components[best], distances[best]


def lift(atlas, t, u, tol=1e-6):
    """
    U(t) for a state u: its atlas component when u is critical, the
    singleton {u} otherwise.
    """
    model = atlas.model
    u = as_state(model, u)
    if np.linalg.norm(model.eval_gradient(t, u)) > critical_bound(u, tol):
        return ComponentRef(kind=ComponentRef.SINGLETON, t=float(t), representative=u)

    component, distance = snap(atlas, t, u)
    limit = tol * (1.0 + np.linalg.norm(u))
    if component is not None and component.continuum is not None:
        limit = max(limit, atlas.arc_step)
    if component is not None and distance <= limit:
        return component
    _logging.warning('critical point at t=%g is not covered by the atlas', t)
    return ComponentRef(
        kind=ComponentRef.CRITICAL,
        t=float(t),
        representative=u,
        point=classify(model, t, u),
    )


def _cubic_term(model, t, u, v, h):
    def directional(step):
        return float(model.eval_gradient(t, u + step * v) @ v)

    centre = directional(0.0)
    return (directional(h) - 2.0 * centre + directional(-h)) / (h * h)


def transversality(model, cp, tol=TRANSVERSALITY_TOL):
    if cp.kernel_dim == 0:
        return TransversalityReport(0, None, None, True, True, True)
    if cp.kernel_dim >= 2:
        return TransversalityReport(cp.kernel_dim, None, None, False, False, False)

    v = _kernel_vector(model.eval_hessian(cp.t, cp.u))
    mixed = (
        model.eval_gradient(cp.t + TIME_STEP, cp.u) -
        model.eval_gradient(cp.t - TIME_STEP, cp.u)
    ) / (2.0 * TIME_STEP)
    t2 = float(mixed @ v)
    coarse = _cubic_term(model, cp.t, cp.u, v, CUBIC_STEP)
    fine = _cubic_term(model, cp.t, cp.u, v, 0.5 * CUBIC_STEP)
    t3 = (4.0 * fine - coarse) / 3.0

    return TransversalityReport(
        kernel_dim=1,
        t2_value=t2,
        t3_value=t3,
        passes_t1=True,
        passes_t2=abs(t2) > tol,
        passes_t3=abs(t3) > tol,
    )


def lusin_diagnostic(model, atlas, t):
    """
    Energy values of the atlas at time t clustered at 1e-8, with the total
    length of the clusters as an outer estimate of the value set.
    """
    components = components_at(atlas, t)
    values = []
    spreads = []
    for component in components:
        if component.continuum is not None:
            energies = [model.eval_energy(t, p) for p in component.continuum.points]
        else:
            energies = [model.eval_energy(t, component.representative)]
        values.extend(energies)
        spreads.append(max(energies) - min(energies))

    clusters = []
    for value in sorted(values):
        if clusters and value - clusters[-1][-1] <= LUSIN_CLUSTER_TOL:
            clusters[-1].append(value)
        else:
            clusters.append([value])

    outer = float(sum(cluster[-1] - cluster[0] for cluster in clusters))
    return {
        't': float(t),
        'values': [float(np.mean(cluster)) for cluster in clusters],
        'distinct': len(clusters),
        'components': len(components),
        'outer_estimate': outer,
        'clean': all(spread <= LUSIN_CLUSTER_TOL for spread in spreads),
    }


def sheet_span(atlas, component_id):
    """Time range covered by the sheet or continuum behind an atlas id."""
    match = SHEET_ID.match(component_id or '')
    if match is None:
        if component_id and component_id.startswith('loop'):
            continuum = atlas.continua[int(component_id[4:])]
            if continuum.t is None:
                return atlas.window
            return continuum.t, continuum.t
        return None
    branch = atlas.branches[int(match.group(1))]
    lower, upper = branch.sheets()[int(match.group(2))]
    times = [sample.t for sample in branch.samples[lower:upper + 1]]
    return min(times), max(times)


def follow(atlas, component_id, t):
    """
    The component carrying ``component_id`` at another time t, following
    its sheet; None once the sheet has ended.
    """
    model = atlas.model
    match = SHEET_ID.match(component_id or '')
    if match is None:
        if component_id and component_id.startswith('loop'):
            continuum = atlas.continua[int(component_id[4:])]
            if not continuum.valid_at(t):
                return None
            return ComponentRef(
                kind=ComponentRef.CRITICAL,
                t=float(t),
                representative=continuum.points[0],
                component_id=component_id,
                point=classify(model, t, continuum.points[0]),
                continuum=continuum,
            )
        return None

    branch = atlas.branches[int(match.group(1))]
    sheet = branch.sheets()[int(match.group(2))]
    u = _sheet_point(model, branch, sheet, t)
    if u is None:
        return None
    return ComponentRef(
        kind=ComponentRef.CRITICAL,
        t=float(t),
        representative=u,
        component_id=component_id,
        point=classify(model, t, u),
    )
