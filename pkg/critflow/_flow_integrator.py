"""
Implicit Euler integration of eps u' + DE(t, u) = 0 and frozen-time descent.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _logging
from ._energy_model import as_state
from ._energy_model import shifted_energy
from ._energy_model import slope
from ._exceptions import ModelError
from ._exceptions import NewtonDivergenceError
from ._exceptions import StepSizeError

__all__ = ['FlowConfig', 'Trajectory', 'DescentPath', 'integrate',
           'energy_identity_residual', 'dissipation_measure', 'descend',
           'gronwall_ratio', 'young_gap']

REFINE_FACTOR = 10.0
REFINE_MEMORY = 256
ROUNDOFF_FACTOR = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class FlowConfig:
    epsilon: float
    step: float
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    refine: bool = False
    max_refinements: int = 6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise StepSizeError(f'epsilon must be positive, got {self.epsilon}')
        if not self.step > 0:
            raise StepSizeError(f'step must be positive, got {self.step}')
        if not self.newton_tol > 0 or self.newton_max_iter < 1:
            raise StepSizeError('Newton tolerance and iteration cap must be positive')

    def check(self, model):
        lam = model.lambda_bound
        if lam > 0 and self.step * lam >= 2.0 * self.epsilon:
            raise StepSizeError(
                f'step {self.step:g} violates step * lambda < 2 epsilon '
                f'(lambda={lam:g}, epsilon={self.epsilon:g})',
            )
        if lam > 0 and self.step * lam >= self.epsilon:
            _logging.warning(
                'step %g exceeds epsilon/lambda=%g: incremental problem may be '
                'nonconvex', self.step, self.epsilon / lam,
            )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Nodes of a discrete eps-flow.

    ``dissipation_density[k]`` is (eps/2)|du/tau|^2 + (1/2eps)|DE(t_k, u_k)|^2
    for the step ending at node k; the first entry is zero.
    """

    epsilon: float
    times: np.ndarray
    states: np.ndarray
    energies: np.ndarray
    slopes: np.ndarray
    powers: np.ndarray
    dissipation_density: np.ndarray
    model: str = 'custom'

    def __len__(self):
        return len(self.times)

    @property
    def steps(self):
        return np.diff(self.times)

    @property
    def horizon(self):
        return float(self.times[-1])

    @property
    def dim(self):
        return self.states.shape[1]

    def masses(self):
        """Per-step mu_eps masses tau_k d_k, aligned with nodes 1..N."""
        return self.steps * self.dissipation_density[1:]

    def state_at(self, t):
        """Linear interpolation of the states at time t."""
        return np.array([
            np.interp(t, self.times, self.states[:, i]) for i in range(self.dim)
        ])


@dataclass(frozen=True, eq=False)
class DescentPath:
    nodes: np.ndarray
    converged: bool
    escaped: bool
    arclength: float
    steps: int

    @property
    def endpoint(self):
        return self.nodes[-1]


def _implicit_step(model, t, previous, epsilon, tau, tol, max_iter, index):
    """
    Solves eps (u - previous) / tau + DE(t, u) = 0 by damped Newton.

    The update is halved while the residual norm does not decrease. A
    residual at the round-off floor of the map is accepted.
    """
    rate = epsilon / tau
    eye = np.eye(len(previous))

    def residual_map(u):
        return rate * (u - previous) + model.eval_gradient(t, u)

    u = previous.copy()
    residual = residual_map(u)
    norm = float(np.linalg.norm(residual))
    for iteration in range(max_iter + 1):
        scale = rate * (np.linalg.norm(u) + np.linalg.norm(previous)) + \
            np.linalg.norm(model.eval_gradient(t, u))
        if norm <= max(tol, ROUNDOFF_FACTOR * scale):
            return u
        if iteration == max_iter:
            break

        jacobian = rate * eye + model.eval_hessian(t, u)
        try:
            delta = np.linalg.solve(jacobian, -residual)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jacobian, -residual, rcond=None)[0]

        alpha = 1.0
        while alpha > 1e-12:
            candidate = u + alpha * delta
            candidate_residual = residual_map(candidate)
            candidate_norm = float(np.linalg.norm(candidate_residual))
            if candidate_norm < norm:
                break
            alpha *= 0.5
        else:
            break
        _logging.trace(
            'step %d newton %d: residual %.3e alpha %g',
            index, iteration, candidate_norm, alpha,
        )
        u, residual, norm = candidate, candidate_residual, candidate_norm

    raise NewtonDivergenceError(index, norm)


def integrate(model, config, u0):
    """
    Integrates eps u' + DE(t, u) = 0 on [0, T] by implicit Euler.

    The base grid is uniform with step at most ``config.step``. With
    ``config.refine`` a step whose displacement exceeds ten times the running
    median displacement is halved, up to ``config.max_refinements`` times.
    """
    config.check(model)
    u = as_state(model, u0)
    if not math.isfinite(model.eval_energy(0.0, u)):
        raise ModelError('initial energy is not finite')

    epsilon = config.epsilon
    horizon = model.horizon
    count = max(1, math.ceil(horizon / config.step - 1e-9))
    grid = np.linspace(0.0, horizon, count + 1)
    displacements = deque(maxlen=REFINE_MEMORY)

    times = [0.0]
    states = [u]
    gradient = model.eval_gradient(0.0, u)
    energies = [model.eval_energy(0.0, u)]
    slopes = [slope(model, 0.0, u)]
    powers = [model.eval_power(0.0, u)]
    density = [0.0]

    for k in range(count):
        t, t_end = grid[k], grid[k + 1]
        while t < t_end:
            tau = t_end - t
            for halving in range(config.max_refinements + 1):
                new = _implicit_step(
                    model, t + tau, u, epsilon, tau, config.newton_tol,
                    config.newton_max_iter, len(times),
                )
                moved = float(np.linalg.norm(new - u))
                if not config.refine or len(displacements) < 8:
                    break
                threshold = REFINE_FACTOR * float(np.median(displacements))
                if moved <= max(threshold, 1e-12) or halving == config.max_refinements:
                    break
                tau *= 0.5
            displacements.append(moved)

            t = t_end if tau == t_end - t else t + tau
            velocity = (new - u) / tau
            gradient = model.eval_gradient(t, new)
            u = new
            times.append(t)
            states.append(u)
            energies.append(model.eval_energy(t, u))
            slopes.append(slope(model, t, u))
            powers.append(model.eval_power(t, u))
            density.append(
                0.5 * epsilon * float(velocity @ velocity) +
                0.5 / epsilon * float(gradient @ gradient),
            )
            if not math.isfinite(energies[-1]):
                raise NewtonDivergenceError(len(times) - 1, math.inf)

    _logging.debug(
        'integrated %s eps=%g: %d nodes, final energy %.6g',
        model.name, epsilon, len(times), energies[-1],
    )
    return Trajectory(
        epsilon=epsilon,
        times=np.array(times),
        states=np.array(states),
        energies=np.array(energies, dtype=float),
        slopes=np.array(slopes),
        powers=np.array(powers, dtype=float),
        dissipation_density=np.array(density),
        model=model.name,
    )


def energy_identity_residual(model, traj):
    """
    Max over k of |sum tau d + E(t_k) - E(0) - sum tau P|.

    The power enters at the left node of each step, which makes the
    bookkeeping exact for energies affine in t.
    """
    steps = traj.steps
    if not len(steps):
        return 0.0
    dissipated = np.cumsum(steps * traj.dissipation_density[1:])
    supplied = np.cumsum(steps * traj.powers[:-1])
    balance = dissipated + traj.energies[1:] - traj.energies[0] - supplied
    return float(np.abs(balance).max())


def dissipation_measure(traj, window):
    """mu_eps mass of the steps ending inside the closed window."""
    lower, upper = window
    lower = max(lower, traj.times[0])
    upper = min(upper, traj.times[-1])
    if lower > upper:
        return 0.0
    inside = (traj.times[1:] >= lower) & (traj.times[1:] <= upper)
    return float(np.sum(traj.masses()[inside]))


def young_gap(traj):
    """sum tau d_k - sum slope_k |u_k - u_{k-1}|; nonnegative by Young."""
    moves = np.linalg.norm(np.diff(traj.states, axis=0), axis=1)
    return float(np.sum(traj.masses()) - np.sum(traj.slopes[1:] * moves))


def gronwall_ratio(model, traj):
    """Largest shifted energy relative to its Gronwall bound along traj."""
    shifted = traj.energies - model.energy_floor + 1.0
    bound = shifted[0] * np.exp(model.power_constant * traj.times)
    return float(np.max(shifted / bound))


def descend(
        model,
        t,
        u0,
        slope_tol=1e-9,
        max_arclength=50.0,
        rho=None,
        target_step=1e-3,
        max_steps=20000,
):
    """
    Frozen-time gradient flow theta' = -DE(t, theta) by proximal steps.

    The step is min(target_step / slope, 0.5 / lambda_loc, 1e6) with
    lambda_loc the negative part of the smallest Hessian eigenvalue, so every
    incremental problem is strongly convex near the current node.
    """
    theta = as_state(model, u0)
    nodes = [theta]
    arclength = 0.0
    scale = 1.0 + np.linalg.norm(theta)

    for count in range(max_steps):
        current = slope(model, t, theta)
        if current < slope_tol * (1.0 + np.linalg.norm(theta)):
            return DescentPath(np.array(nodes), True, False, arclength, count)
        if rho is not None and shifted_energy(model, t, theta) > rho:
            break
        if np.linalg.norm(theta) > 1e6 * scale:
            break
        if arclength > max_arclength:
            _logging.debug('descent budget exhausted at t=%g', t)
            return DescentPath(np.array(nodes), False, False, arclength, count)

        curvature = -np.linalg.eigvalsh(model.eval_hessian(t, theta))[0]
        tau = min(target_step / current, 0.5 / max(curvature, 1e-12), 1e6)
        while True:
            try:
                new = _implicit_step(model, t, theta, 1.0, tau, 1e-12, 50, count)
            except NewtonDivergenceError:
                new = None
            # long jumps cut corners of curved orbits
            if new is not None and (
                np.linalg.norm(new - theta) <= 20.0 * target_step or tau < 1e-8
            ):
                break
            tau *= 0.25
            if tau < 1e-12:
                _logging.warning('descent stalled at t=%g', t)
                return DescentPath(np.array(nodes), False, False, arclength, count)
        arclength += float(np.linalg.norm(new - theta))
        theta = new
        nodes.append(theta)
    else:
        return DescentPath(np.array(nodes), False, False, arclength, max_steps)

    _logging.debug('descent escaped the sublevel at t=%g', t)
    return DescentPath(np.array(nodes), False, True, arclength, len(nodes) - 1)
