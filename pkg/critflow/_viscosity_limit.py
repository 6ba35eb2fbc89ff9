"""
Vanishing-viscosity sweeps, limit extraction, jump certification and
graph diagnostics.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from dataclasses import field
from multiprocessing.pool import ThreadPool

import numpy as np
from scipy.spatial import cKDTree

from . import _logging
from ._critical_atlas import ComponentRef
from ._critical_atlas import critical_bound
from ._critical_atlas import follow
from ._critical_atlas import lift
from ._critical_atlas import sheet_span
from ._critical_atlas import snap
from ._critical_atlas import transversality
from ._energy_model import as_state
from ._exceptions import CritflowException
from ._exceptions import SweepError
from ._flow_integrator import dissipation_measure
from ._flow_integrator import FlowConfig
from ._flow_integrator import integrate
from ._transition_cost import cost

__all__ = ['SweepResult', 'JumpRecord', 'LimitEstimate', 'sweep',
           'extract_limit', 'dissipation_localization', 'graph_hausdorff',
           'jump_windows', 'worker_count']

DEFAULT_BASE_STEP = 1e-3
STEP_RATIO = 20.0
SPEED_FACTOR = 10.0
REST_TOL = 1e-12
MIN_WINDOW_STEPS = 20
SNAP_RADIUS = 0.2
LIMIT_SAMPLES = 400


class ExitKind:
    FOLD = 'fold'
    SADDLE = 'saddle'
    INITIAL = 'initial'
    UNKNOWN = 'unknown'


def worker_count():
    """Threads for concurrent units, capped by CRITFLOW_THREADS."""
    configured = os.environ.get('CRITFLOW_THREADS')
    if configured:
        try:
            return max(1, int(configured))
        except ValueError:
            _logging.warning('ignoring CRITFLOW_THREADS=%r', configured)
    return min(4, os.cpu_count() or 1)


@dataclass(eq=False)
class SweepResult:
    model: object
    epsilons: list
    trajectories: list
    u0: np.ndarray
    failures: dict = field(default_factory=dict)

    @property
    def smallest(self):
        return self.trajectories[-1]


@dataclass(eq=False)
class JumpRecord:
    t_jump: float
    left_component: ComponentRef | None
    right_component: ComponentRef | None
    energy_drop: float | None
    cost_value: float | None
    local_mu_mass: float
    window: tuple
    exit_kind: str = ExitKind.UNKNOWN
    barycenters: list = field(default_factory=list)
    t_extrapolated: float | None = None
    resolved: bool = True

    def to_dict(self):
        return {
            't_jump': self.t_jump,
            'left_component': self.left_component.to_dict() if self.left_component else None,
            'right_component': self.right_component.to_dict() if self.right_component else None,
            'energy_drop': self.energy_drop,
            'cost_value': self.cost_value,
            'local_mu_mass': self.local_mu_mass,
            'window': list(self.window),
            'exit_kind': self.exit_kind,
            'barycenters': list(self.barycenters),
            't_extrapolated': self.t_extrapolated,
            'resolved': self.resolved,
        }


@dataclass(eq=False)
class LimitEstimate:
    times: np.ndarray
    limit_states: np.ndarray
    jumps: list
    bv_balance_residual: float
    criticality_constant: float = 0.0
    cross_validation_gap: float = 0.0
    jump_counts: list = field(default_factory=list)
    nondeterministic: bool = False

    @property
    def interior_jumps(self):
        return [jump for jump in self.jumps if jump.exit_kind != ExitKind.INITIAL]

    @property
    def stable_jump_count(self):
        return len(self.jump_counts) < 2 or self.jump_counts[-1] == self.jump_counts[-2]

    def to_dict(self):
        return {
            'times': self.times.tolist(),
            'states': self.limit_states.tolist(),
            'jumps': [jump.to_dict() for jump in self.jumps],
            'bv_balance_residual': self.bv_balance_residual,
            'criticality_constant': self.criticality_constant,
            'cross_validation_gap': self.cross_validation_gap,
            'jump_counts': list(self.jump_counts),
            'stable_jump_count': self.stable_jump_count,
            'nondeterministic': self.nondeterministic,
        }


def sweep(model, u0, epsilons, step_policy=None):
    """
    One trajectory per epsilon with step min(base_step, eps / 20), run on a
    thread pool. Failed trajectories are recorded and dropped.
    """
    policy = {'base_step': DEFAULT_BASE_STEP, 'refine': False}
    policy.update(step_policy or {})
    epsilons = [float(eps) for eps in epsilons]
    if not epsilons or any(eps <= 0 for eps in epsilons):
        raise SweepError('epsilons must be positive and nonempty')
    if any(a <= b for a, b in zip(epsilons, epsilons[1:])):
        raise SweepError('epsilons must be strictly decreasing')
    u0 = as_state(model, u0)

    def run(eps):
        config = FlowConfig(
            epsilon=eps,
            step=min(policy['base_step'], eps / STEP_RATIO),
            refine=policy['refine'],
        )
        try:
            return integrate(model, config, u0)
        except CritflowException as e:
            return e

    with ThreadPool(min(worker_count(), len(epsilons))) as pool:
        results = pool.map(run, epsilons)

    kept_eps, kept, failures = [], [], {}
    for eps, result in zip(epsilons, results):
        if isinstance(result, Exception):
            _logging.warning('trajectory eps=%g failed: %s', eps, result)
            failures[eps] = str(result)
        else:
            kept_eps.append(eps)
            kept.append(result)
    if not kept:
        raise SweepError('every trajectory of the sweep failed')
    _logging.info('sweep %s: %d trajectories', model.name, len(kept))
    return SweepResult(model, kept_eps, kept, u0, failures)


def _half_width(traj):
    eps = traj.epsilon
    return max(5.0 * eps * math.log(1.0 / eps), MIN_WINDOW_STEPS * float(np.max(traj.steps)))


def jump_windows(traj):
    """
    Maximal runs of nodes moving faster than ten times the median speed,
    widened by max(5 eps log(1/eps), 20 steps) and merged.

    The median is floored at extent / horizon, the speed that crosses the
    range of visited states once, so the threshold scales with the model.
    """
    extent = float(np.linalg.norm(np.ptp(traj.states, axis=0)))
    if extent <= REST_TOL * (1.0 + float(np.linalg.norm(traj.states[0]))):
        return []
    speeds = np.linalg.norm(np.diff(traj.states, axis=0), axis=1) / traj.steps
    threshold = SPEED_FACTOR * max(float(np.median(speeds)), extent / traj.horizon)
    fast = np.flatnonzero(speeds > threshold) + 1
    if not len(fast):
        return []

    half = _half_width(traj)
    runs = np.split(fast, np.flatnonzero(np.diff(fast) > 1) + 1)
    windows = []
    for run in runs:
        lower = max(0.0, traj.times[run[0] - 1] - half)
        upper = min(traj.horizon, traj.times[run[-1]] + half)
        if windows and lower <= windows[-1][1]:
            windows[-1] = (windows[-1][0], max(windows[-1][1], upper))
        else:
            windows.append((lower, upper))
    return windows


def _barycenter(traj, window):
    masses = traj.masses()
    times = traj.times[1:]
    inside = (times >= window[0]) & (times <= window[1])
    total = float(np.sum(masses[inside]))
    if total <= 0:
        return 0.5 * (window[0] + window[1])
    return float(np.sum(times[inside] * masses[inside]) / total)


def _match(windows, barycenters, target):
    if not windows:
        return None, None
    best = int(np.argmin([abs(b - target) for b in barycenters]))
    return windows[best], barycenters[best]


def _extrapolate(epsilons, values, power):
    """Linear extrapolation to eps = 0 in eps**power from the two smallest."""
    pairs = [(eps ** power, v) for eps, v in zip(epsilons, values) if v is not None]
    if len(pairs) < 2:
        return pairs[-1][1] if pairs else None
    (x1, y1), (x2, y2) = pairs[-2], pairs[-1]
    if x1 == x2:
        return y2
    return float(y2 - x2 * (y1 - y2) / (x1 - x2))


def _resolve_jump(model, atlas, traj, window, barycenter, initial):
    """U(t-), U(t+), the limit jump time and the exit kind for one window."""
    lower, upper = window
    kind = ExitKind.UNKNOWN
    if initial:
        left = lift(atlas, 0.0, traj.states[0])
        t_jump = 0.0
        kind = ExitKind.INITIAL
    else:
        left, distance = snap(atlas, lower, traj.state_at(lower))
        if left is None or distance > SNAP_RADIUS:
            return None, None, barycenter, kind
        t_jump = barycenter
        span = sheet_span(atlas, left.component_id)
        # the left sheet ends at a fold inside the window
        if span is not None and lower <= span[1] < barycenter:
            t_jump = span[1]
            kind = ExitKind.FOLD
        left = follow(atlas, left.component_id, t_jump)
        if left is None:
            return None, None, t_jump, kind
        if kind == ExitKind.UNKNOWN:
            kind = _exit_kind(left)

    right, distance = snap(atlas, upper, traj.state_at(upper))
    if right is None or distance > SNAP_RADIUS:
        return left, None, t_jump, kind
    right = follow(atlas, right.component_id, t_jump)
    return left, right, t_jump, kind


def _exit_kind(left):
    if left.point is None:
        return ExitKind.UNKNOWN
    if left.point.degenerate:
        return ExitKind.FOLD
    if left.point.morse_index >= 1:
        return ExitKind.SADDLE
    return ExitKind.UNKNOWN


def extract_limit(sweep_result, atlas, cross_check=False):
    """
    Jumps from the fast windows of the smallest-eps trajectory, resolved
    against the atlas; the limit curve follows atlas sheets between jumps.
    """
    if len(sweep_result.trajectories) < 2:
        raise SweepError('extract_limit needs at least two viscosities')

    model = sweep_result.model
    trajectories = sweep_result.trajectories
    epsilons = sweep_result.epsilons
    traj = sweep_result.smallest
    u0 = sweep_result.u0
    windows = jump_windows(traj)
    per_eps = [jump_windows(other) for other in trajectories]
    per_eps_bary = [[_barycenter(other, w) for w in ws] for other, ws in zip(trajectories, per_eps)]
    u0_critical = np.linalg.norm(model.eval_gradient(0.0, u0)) <= critical_bound(u0, 1e-6)

    jumps = []
    nondeterministic = False
    for window in windows:
        barycenter = _barycenter(traj, window)
        initial = window[0] <= 0.0 and not u0_critical
        left, right, t_jump, kind = _resolve_jump(
            model, atlas, traj, window, barycenter, initial,
        )
        if (left is not None and right is not None and
                left.component_id is not None and
                left.component_id == right.component_id):
            _logging.debug('window %s stays on %s: not a jump', window, left.component_id)
            continue

        barycenters = [_match(ws, bs, barycenter)[1] for ws, bs in zip(per_eps, per_eps_bary)]
        power = 2.0 / 3.0 if kind == ExitKind.FOLD else 1.0
        extrapolated = 0.0 if kind == ExitKind.INITIAL else _extrapolate(epsilons, barycenters, power)

        resolved = left is not None and right is not None
        drop = value = None
        if resolved:
            drop = float(
                model.eval_energy(t_jump, left.representative) -
                model.eval_energy(t_jump, right.representative),
            )
            result = cost(model, atlas, t_jump, left, right, cross_check=cross_check)
            value = result.value
            if value is None:
                resolved = False
            if kind == ExitKind.FOLD and left.point is not None:
                report = transversality(model, left.point)
                nondeterministic |= not report.passes_t2
        else:
            _logging.warning('jump near t=%g is unresolved by the atlas', barycenter)

        jumps.append(JumpRecord(
            t_jump=float(t_jump),
            left_component=left,
            right_component=right,
            energy_drop=drop,
            cost_value=value,
            local_mu_mass=dissipation_measure(traj, window),
            window=window,
            exit_kind=kind,
            barycenters=barycenters,
            t_extrapolated=extrapolated,
            resolved=resolved,
        ))

    times, states, residual = _limit_curve(model, atlas, traj, u0, jumps)
    off = np.ones(len(traj.times), dtype=bool)
    for lower, upper in windows:
        off &= ~((traj.times >= lower) & (traj.times <= upper))
    slopes = traj.slopes[off]
    constant = float(slopes.max() / math.sqrt(traj.epsilon)) if len(slopes) else 0.0

    estimate = LimitEstimate(
        times=times,
        limit_states=states,
        jumps=jumps,
        bv_balance_residual=residual,
        criticality_constant=constant,
        cross_validation_gap=_cross_gap(traj, trajectories[-2], windows, per_eps[-2]),
        jump_counts=[len(ws) for ws in per_eps],
        nondeterministic=nondeterministic,
    )
    _logging.info(
        'limit of %s: %d jumps, bv residual %.3e',
        model.name, len(jumps), estimate.bv_balance_residual,
    )
    return estimate


def _cross_gap(traj, other, windows, other_windows):
    times = np.linspace(0.0, traj.horizon, LIMIT_SAMPLES)
    keep = np.ones(len(times), dtype=bool)
    for lower, upper in [*windows, *other_windows]:
        keep &= ~((times >= lower) & (times <= upper))
    gaps = [
        np.linalg.norm(traj.state_at(t) - other.state_at(t)) for t in times[keep]
    ]
    return float(max(gaps, default=0.0))


def _limit_curve(model, atlas, traj, u0, jumps):
    """
    Samples the limit curve along atlas sheets between the jump times and
    measures the spread of E(t, u(t)) - int P + sum of jump costs over the
    samples outside the jump windows.
    """
    horizon = traj.horizon
    resolved = sorted(
        (j for j in jumps if j.resolved and j.exit_kind != ExitKind.INITIAL),
        key=lambda j: j.t_jump,
    )
    initial = [j for j in jumps if j.resolved and j.exit_kind == ExitKind.INITIAL]
    start = initial[0].right_component if initial else lift(atlas, 0.0, u0)
    if not start.critical:
        start = None
    offset = initial[0].cost_value if initial else 0.0
    boundaries = [0.0, *[j.t_jump for j in resolved], horizon]
    owners = [start, *[j.right_component for j in resolved]]

    grid = np.linspace(0.0, horizon, LIMIT_SAMPLES)
    times, states, potentials, outside = [], [], [], []
    supplied = 0.0
    paid = offset
    if initial:
        times.append(0.0)
        states.append(u0)
        potentials.append(model.eval_energy(0.0, u0))
        outside.append(True)

    for k, owner in enumerate(owners):
        lower, upper = boundaries[k], boundaries[k + 1]
        if k > 0:
            paid += resolved[k - 1].cost_value
        if owner is None:
            continue
        section = [lower, *grid[(grid > lower) & (grid < upper)], upper]
        previous = None
        for t in section:
            ref = follow(atlas, owner.component_id, t) if owner.component_id else None
            if ref is None:
                if owner.component_id is None and owner.critical:
                    ref = owner
                else:
                    continue
            power = model.eval_power(t, ref.representative)
            if previous is not None:
                supplied += 0.5 * (power + previous[1]) * (t - previous[0])
            previous = (t, power)
            times.append(t)
            states.append(ref.representative)
            potentials.append(model.eval_energy(t, ref.representative) - supplied + paid)
            outside.append(not any(
                j.window[0] < t < j.window[1] for j in jumps
                if j.exit_kind != ExitKind.INITIAL
            ))

    values = np.array(potentials)[np.array(outside, dtype=bool)] if potentials else np.zeros(1)
    residual = float(values.max() - values.min()) if len(values) else 0.0
    return np.array(times), np.array(states), residual


def dissipation_localization(sweep_result, limit):
    """
    Per-eps mu_eps mass inside the jump windows against the total jump cost,
    with the eps^(2/3) extrapolation of the inside mass.
    """
    target = float(sum(j.cost_value or 0.0 for j in limit.jumps))
    rows = []
    for eps, traj in zip(sweep_result.epsilons, sweep_result.trajectories):
        windows = jump_windows(traj) if limit.jumps else []
        inside = sum(dissipation_measure(traj, w) for w in windows)
        total = float(np.sum(traj.masses()))
        rows.append({
            'epsilon': eps,
            'inside': float(inside),
            'outside': total - float(inside),
            'windows': len(windows),
        })

    resolved = [row for row in rows if row['windows'] or not limit.jumps]
    errors = [abs(row['inside'] - target) for row in resolved]
    monotone = all(b <= a + 1e-3 for a, b in zip(errors, errors[1:]))
    extrapolated = _extrapolate(
        [row['epsilon'] for row in resolved], [row['inside'] for row in resolved], 2.0 / 3.0,
    )
    extrapolated = 0.0 if extrapolated is None else extrapolated
    converged = (
        abs(extrapolated - target) <= 0.1 * target if target > 0
        else extrapolated <= 1e-12
    )
    return {
        'target': target,
        'rows': rows,
        'inside_extrapolated': extrapolated,
        'monotone': monotone,
        'converged': bool(converged and rows[-1]['outside'] < 0.05),
    }


def graph_hausdorff(traj_a, traj_b):
    """
    Symmetric Hausdorff distance of the graphs {(t_k, u_k)} under
    max(|dt|, |du|).
    """
    if abs(traj_a.horizon - traj_b.horizon) > 1e-12:
        raise ValueError('trajectories must share the time horizon')
    return max(_directed(traj_a, traj_b), _directed(traj_b, traj_a))


def _directed(source, target):
    points = np.column_stack((target.times, target.states))
    queries = np.column_stack((source.times, source.states))
    bounds, _ = cKDTree(points).query(queries, p=np.inf)
    if source.dim == 1:
        return float(bounds.max())

    # chebyshev bounds the max-product metric from below; refine in time
    worst = 0.0
    for (t, *u), bound in zip(queries, bounds):
        reach = bound * math.sqrt(source.dim)
        lower = np.searchsorted(target.times, t - reach, side='left')
        upper = np.searchsorted(target.times, t + reach, side='right')
        dt = np.abs(target.times[lower:upper] - t)
        du = np.linalg.norm(target.states[lower:upper] - np.array(u), axis=1)
        worst = max(worst, float(np.min(np.maximum(dt, du))))
    return worst
