"""
Time-dependent energies E(t, u) on R^d and the built-in corpus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Mapping

import numpy as np

from . import _logging
from ._exceptions import DimensionMismatchError
from ._exceptions import InvalidParamsError
from ._exceptions import ModelError

__all__ = ['EnergyModel', 'EnergySample', 'ConsistencyReport', 'builtin',
           'shifted_energy', 'check_consistency', 'slope', 'sample',
           'time_gradient', 'sample_sublevel', 'derivative_errors',
           'as_state', 'BUILTIN_NAMES']

FD_STEP = 1e-5
DERIVATIVE_RTOL = 1e-6
SYMMETRY_RTOL = 1e-10
INEQUALITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EnergyModel:
    """
    Evaluation record for E(t, u), its power dE/dt, gradient and Hessian.

    ``lambda_bound`` bounds the Hessian from below by -lambda,
    ``power_constant`` is C_P in |dE/dt| <= C_P (E - floor + 1) and
    ``energy_floor`` is a declared lower bound of E on [0, T] x R^d.
    """

    dim: int
    horizon: float
    eval_energy: Callable[[float, np.ndarray], float]
    eval_power: Callable[[float, np.ndarray], float]
    eval_gradient: Callable[[float, np.ndarray], np.ndarray]
    eval_hessian: Callable[[float, np.ndarray], np.ndarray]
    lambda_bound: float
    power_constant: float
    energy_floor: float
    name: str = 'custom'
    params: Mapping = field(default_factory=dict)
    autonomous: bool = False
    eval_time_gradient: Callable[[float, np.ndarray], np.ndarray] | None = None
    minimal_selection: Callable[[float, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidParamsError(f'dimension must be positive: {self.dim}')
        if not self.horizon > 0:
            raise InvalidParamsError(f'horizon must be positive: {self.horizon}')
        if self.lambda_bound < 0 or self.power_constant < 0:
            raise InvalidParamsError('lambda and C_P must be nonnegative')
        if not math.isfinite(self.energy_floor):
            raise InvalidParamsError('energy_floor must be finite')


@dataclass(frozen=True, eq=False)
class EnergySample:
    t: float
    u: np.ndarray
    energy: float
    slope: float
    power: float


@dataclass
class ConsistencyReport:
    model: str
    samples: int
    rho: float
    max_gradient_error: float = 0.0
    max_power_error: float = 0.0
    max_hessian_error: float = 0.0
    max_asymmetry: float = 0.0
    min_convexity_margin: float = math.inf
    min_convexity_pair_margin: float = math.inf
    min_power_margin: float = math.inf
    min_gronwall_margin: float = math.inf
    min_shifted_energy: float = math.inf
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        return {
            'model': self.model,
            'samples': self.samples,
            'rho': self.rho,
            'max_gradient_error': self.max_gradient_error,
            'max_power_error': self.max_power_error,
            'max_hessian_error': self.max_hessian_error,
            'max_asymmetry': self.max_asymmetry,
            'min_convexity_margin': self.min_convexity_margin,
            'min_convexity_pair_margin': self.min_convexity_pair_margin,
            'min_power_margin': self.min_power_margin,
            'min_gronwall_margin': self.min_gronwall_margin,
            'min_shifted_energy': self.min_shifted_energy,
            'passed': self.passed,
            'failures': list(self.failures),
        }


def as_state(model, u):
    state = np.atleast_1d(np.asarray(u, dtype=float))
    if state.shape != (model.dim,):
        raise DimensionMismatchError(
            f'{model.name} expects a {model.dim}-vector, got shape {state.shape}',
        )
    return state


def double_well(u):
    return 0.25 * (u * u - 1.0) ** 2


def _cubic_well_minimum(c):
    """Minimum over R of u^4/4 - u^2/2 - c u, from the real roots of u^3 - u = c."""
    roots = np.roots([1.0, 0.0, -1.0, -c])
    real = roots[np.abs(roots.imag) < 1e-7].real
    return float(np.min(0.25 * real**4 - 0.5 * real**2 - c * real))


def _tilted_well_bound(slope_bound):
    # min over u of W(u) - L|u|; the minimizer has the sign of the tilt
    return _cubic_well_minimum(slope_bound) + 0.25


def _quartic_constants(load, horizon, mass=1.0):
    """
    Floor part and C_P for energies mass * [W(u) - load * t * u].

    With L = |load| T and m(L) = min W(u) - L|u| one has
    E - mass m(L) + 1 >= mass (m((1+a)L) - m(L)) + 1 + a L |u|, so
    C_P = 1 / (a T) works for the largest a in (0, 1] keeping the constant
    term nonnegative.
    """
    bound = abs(load) * horizon
    floor = mass * _tilted_well_bound(bound)
    if load == 0:
        return floor, 0.0

    for theta in np.linspace(1.0, 0.05, 20):
        gap = mass * (_tilted_well_bound((1.0 + theta) * bound) -
                      _tilted_well_bound(bound)) + 1.0
        if gap >= 0:
            return floor, 1.0 / (theta * horizon)

    raise InvalidParamsError(
        f'load {load} is too large for horizon {horizon}: no power constant',
    )


def _check_params(name, params, allowed):
    unknown = set(params) - set(allowed)
    if unknown:
        raise InvalidParamsError(
            f'unknown parameters for {name}: {", ".join(sorted(unknown))}',
        )


def _quadratic_bowl(params):
    _check_params('quadratic_bowl', params, {'dim', 'horizon'})
    dim = int(params.get('dim', 1))
    if dim < 1:
        raise InvalidParamsError(f'dim must be positive: {dim}')
    eye = np.eye(dim)

    return EnergyModel(
        dim=dim,
        horizon=float(params.get('horizon', 1.0)),
        eval_energy=lambda t, u: 0.5 * float(u @ u),
        eval_power=lambda t, u: 0.0,
        eval_gradient=lambda t, u: np.array(u, dtype=float),
        eval_hessian=lambda t, u: eye.copy(),
        eval_time_gradient=lambda t, u: np.zeros(dim),
        lambda_bound=0.0,
        power_constant=0.0,
        energy_floor=0.0,
        name='quadratic_bowl',
        params=dict(params),
        autonomous=True,
    )


def _tilted_double_well(params):
    _check_params('tilted_double_well', params, {'horizon', 'load_rate'})
    horizon = float(params.get('horizon', 0.5))
    rate = float(params.get('load_rate', 1.0))
    floor, power_constant = _quartic_constants(rate, horizon)

    def energy(t, u):
        x = u[0]
        return 0.25 * x**4 - 0.5 * x**2 - rate * t * x

    return EnergyModel(
        dim=1,
        horizon=horizon,
        eval_energy=energy,
        eval_power=lambda t, u: -rate * u[0],
        eval_gradient=lambda t, u: np.array([u[0] ** 3 - u[0] - rate * t]),
        eval_hessian=lambda t, u: np.array([[3.0 * u[0] ** 2 - 1.0]]),
        eval_time_gradient=lambda t, u: np.array([-rate]),
        lambda_bound=1.0,
        power_constant=power_constant,
        energy_floor=floor - 0.25,
        name='tilted_double_well',
        params=dict(params),
        autonomous=rate == 0,
    )


def _double_well_2d(params):
    _check_params('double_well_2d', params, {'horizon', 'load_rate'})
    horizon = float(params.get('horizon', 0.5))
    rate = float(params.get('load_rate', 1.0))
    floor, power_constant = _quartic_constants(rate, horizon)

    def energy(t, u):
        x, y = u
        return 0.25 * x**4 - 0.5 * x**2 + 0.5 * y**2 - rate * t * x

    def hessian(t, u):
        return np.array([[3.0 * u[0] ** 2 - 1.0, 0.0], [0.0, 1.0]])

    return EnergyModel(
        dim=2,
        horizon=horizon,
        eval_energy=energy,
        eval_power=lambda t, u: -rate * u[0],
        eval_gradient=lambda t, u: np.array(
            [u[0] ** 3 - u[0] - rate * t, u[1]],
        ),
        eval_hessian=hessian,
        eval_time_gradient=lambda t, u: np.array([-rate, 0.0]),
        lambda_bound=1.0,
        power_constant=power_constant,
        energy_floor=floor - 0.25,
        name='double_well_2d',
        params=dict(params),
        autonomous=rate == 0,
    )


def _mexican_hat(params):
    _check_params('mexican_hat', params, {'dim', 'horizon'})
    dim = int(params.get('dim', 2))
    if dim < 2:
        raise InvalidParamsError(f'mexican_hat needs dim >= 2, got {dim}')
    eye = np.eye(dim)

    def energy(t, u):
        return 0.25 * (float(u @ u) - 1.0) ** 2

    def gradient(t, u):
        return (float(u @ u) - 1.0) * u

    def hessian(t, u):
        return (float(u @ u) - 1.0) * eye + 2.0 * np.outer(u, u)

    return EnergyModel(
        dim=dim,
        horizon=float(params.get('horizon', 1.0)),
        eval_energy=energy,
        eval_power=lambda t, u: 0.0,
        eval_gradient=gradient,
        eval_hessian=hessian,
        eval_time_gradient=lambda t, u: np.zeros(dim),
        lambda_bound=1.0,
        power_constant=0.0,
        energy_floor=0.0,
        name='mexican_hat',
        params=dict(params),
        autonomous=True,
    )


def _allen_cahn_1d(params):
    _check_params('allen_cahn_1d', params, {'n', 'load', 'horizon'})
    n = int(params.get('n', 32))
    if n < 2:
        raise InvalidParamsError(f'allen_cahn_1d needs n >= 2 grid points, got {n}')
    horizon = float(params.get('horizon', 1.0))
    load = float(params.get('load', 0.0))
    h = 1.0 / (n + 1)
    floor, power_constant = _quartic_constants(load, horizon, mass=n * h)

    # Dirichlet Laplacian stiffness, (2u_i - u_{i-1} - u_{i+1}) / h
    stiffness = (
        np.diag(np.full(n, 2.0)) - np.diag(np.ones(n - 1), 1) -
        np.diag(np.ones(n - 1), -1)
    ) / h

    def energy(t, u):
        padded = np.concatenate(([0.0], u, [0.0]))
        jumps = np.diff(padded) / h
        return float(h * (0.5 * jumps @ jumps + np.sum(double_well(u) - load * t * u)))

    def gradient(t, u):
        return stiffness @ u + h * (u**3 - u - load * t)

    def hessian(t, u):
        return stiffness + h * np.diag(3.0 * u**2 - 1.0)

    return EnergyModel(
        dim=n,
        horizon=horizon,
        eval_energy=energy,
        eval_power=lambda t, u: -load * h * float(np.sum(u)),
        eval_gradient=gradient,
        eval_hessian=hessian,
        eval_time_gradient=lambda t, u: np.full(n, -load * h),
        lambda_bound=h,
        power_constant=power_constant,
        energy_floor=floor,
        name='allen_cahn_1d',
        params=dict(params),
        autonomous=load == 0,
    )


BUILTINS = {
    'quadratic_bowl': _quadratic_bowl,
    'tilted_double_well': _tilted_double_well,
    'double_well_2d': _double_well_2d,
    'mexican_hat': _mexican_hat,
    'allen_cahn_1d': _allen_cahn_1d,
}
BUILTIN_NAMES = tuple(BUILTINS)


def builtin(name, params=None):
    """
    Returns the built-in energy ``name`` configured by ``params``
    """
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ModelError(
            f'unknown energy {name!r}; expected one of {", ".join(BUILTIN_NAMES)}',
        )
    model = factory(dict(params or {}))
    _logging.debug(
        'built %s: d=%d T=%g lambda=%g C_P=%g floor=%.12g',
        name, model.dim, model.horizon, model.lambda_bound,
        model.power_constant, model.energy_floor,
    )
    return model


def shifted_energy(model, t, u):
    return model.eval_energy(t, u) - model.energy_floor + 1.0


def slope(model, t, u):
    selection = model.minimal_selection or model.eval_gradient
    return float(np.linalg.norm(selection(t, u)))


def sample(model, t, u):
    u = as_state(model, u)
    return EnergySample(
        t=float(t),
        u=u,
        energy=float(model.eval_energy(t, u)),
        slope=slope(model, t, u),
        power=float(model.eval_power(t, u)),
    )


def time_gradient(model, t, u, step=FD_STEP):
    """Partial time derivative of the gradient."""
    if model.eval_time_gradient is not None:
        return np.asarray(model.eval_time_gradient(t, u), dtype=float)
    forward = model.eval_gradient(t + step, u)
    backward = model.eval_gradient(t - step, u)
    return (forward - backward) / (2.0 * step)


def derivative_errors(model, t, u, step=FD_STEP):
    """
    Finite-difference mismatch of gradient, power and Hessian at (t, u).

    Errors are max-norm differences relative to max(1, max|exact|).
    """
    u = as_state(model, u)
    gradient = np.asarray(model.eval_gradient(t, u), dtype=float)
    hessian = np.asarray(model.eval_hessian(t, u), dtype=float)
    eye = np.eye(model.dim)

    fd_gradient = np.array([
        (model.eval_energy(t, u + step * e) - model.eval_energy(t, u - step * e))
        / (2.0 * step)
        for e in eye
    ])
    fd_hessian = np.column_stack([
        (model.eval_gradient(t, u + step * e) - model.eval_gradient(t, u - step * e))
        / (2.0 * step)
        for e in eye
    ])
    fd_power = (
        model.eval_energy(t + step, u) - model.eval_energy(t - step, u)
    ) / (2.0 * step)
    power = model.eval_power(t, u)
    scale = max(1.0, float(np.abs(hessian).max()))

    return {
        'gradient': float(
            np.abs(fd_gradient - gradient).max() / max(1.0, np.abs(gradient).max()),
        ),
        'power': abs(fd_power - power) / max(1.0, abs(power)),
        'hessian': float(np.abs(fd_hessian - hessian).max() / scale),
        'asymmetry': float(np.abs(hessian - hessian.T).max() / scale),
    }


def sample_sublevel(model, rho, rng, count, scale=2.0, shrink=0.8):
    """
    Draws ``count`` points (t, u) with shifted energy <= rho.

    Candidates are Gaussian and pulled toward the origin along their ray
    until they enter the sublevel.
    """
    points = []
    for _ in range(count):
        t = float(rng.uniform(0.0, model.horizon))
        u = rng.normal(size=model.dim) * scale
        for _ in range(200):
            if shifted_energy(model, t, u) <= rho:
                break
            u = shrink * u
        else:
            _logging.warning('sublevel %g not reached at t=%g, using origin', rho, t)
            u = np.zeros(model.dim)
        points.append((t, u))
    return points


def check_consistency(model, samples, seed, sublevel):
    """
    Samples the sublevel {shifted energy <= sublevel} and checks the
    derivative hooks, lambda-convexity, the power bound and the Gronwall
    estimate on the declared constants.
    """
    if samples < 1:
        raise ValueError(f'samples must be >= 1, got {samples}')
    if not sublevel > 1:
        raise ValueError(f'sublevel must exceed 1, got {sublevel}')

    rng = np.random.default_rng(seed)
    report = ConsistencyReport(model=model.name, samples=samples, rho=sublevel)
    points = sample_sublevel(model, sublevel, rng, samples)
    lam = model.lambda_bound
    cp = model.power_constant

    for i, (t, u) in enumerate(points):
        errors = derivative_errors(model, t, u)
        report.max_gradient_error = max(report.max_gradient_error, errors['gradient'])
        report.max_power_error = max(report.max_power_error, errors['power'])
        report.max_hessian_error = max(report.max_hessian_error, errors['hessian'])
        report.max_asymmetry = max(report.max_asymmetry, errors['asymmetry'])
        for key in ('gradient', 'power', 'hessian'):
            if errors[key] >= DERIVATIVE_RTOL:
                report.failures.append(
                    f'sample {i} (t={t:.6g}): {key} mismatch {errors[key]:.3e}',
                )
        if errors['asymmetry'] > SYMMETRY_RTOL:
            report.failures.append(
                f'sample {i} (t={t:.6g}): Hessian asymmetry {errors["asymmetry"]:.3e}',
            )

        hessian = model.eval_hessian(t, u)
        eigenvalues = np.linalg.eigvalsh(hessian)
        margin = float(eigenvalues[0] + lam)
        report.min_convexity_margin = min(report.min_convexity_margin, margin)
        if margin < -INEQUALITY_TOL * (1.0 + np.abs(eigenvalues).max()):
            report.failures.append(
                f'sample {i} (t={t:.6g}): smallest eigenvalue {eigenvalues[0]:.6g} '
                f'below -lambda={-lam:g}',
            )

        shifted = shifted_energy(model, t, u)
        report.min_shifted_energy = min(report.min_shifted_energy, shifted)
        if shifted < 1.0 - INEQUALITY_TOL:
            report.failures.append(
                f'sample {i} (t={t:.6g}): shifted energy {shifted:.6g} below 1',
            )

        margin = cp * shifted - abs(model.eval_power(t, u))
        report.min_power_margin = min(report.min_power_margin, margin)
        if margin < -INEQUALITY_TOL * (1.0 + shifted):
            report.failures.append(
                f'sample {i} (t={t:.6g}): power bound violated by {-margin:.3e}',
            )

        s = float(rng.uniform(0.0, model.horizon))
        other = shifted_energy(model, s, u)
        growth = math.exp(cp * abs(t - s))
        margin = min(growth * other - shifted, shifted - other / growth)
        report.min_gronwall_margin = min(report.min_gronwall_margin, margin)
        if margin < -INEQUALITY_TOL * (1.0 + shifted):
            report.failures.append(
                f'sample {i} (t={t:.6g}, s={s:.6g}): Gronwall bound violated '
                f'by {-margin:.3e}',
            )

        _, v = points[int(rng.integers(len(points)))]
        diff = v - u
        margin = (
            model.eval_energy(t, v) - model.eval_energy(t, u)
            - float(model.eval_gradient(t, u) @ diff)
            + 0.5 * lam * float(diff @ diff)
        )
        report.min_convexity_pair_margin = min(report.min_convexity_pair_margin, margin)
        scale = 1.0 + abs(model.eval_energy(t, u)) + abs(model.eval_energy(t, v))
        if margin < -INEQUALITY_TOL * scale:
            report.failures.append(
                f'sample {i} (t={t:.6g}): lambda-convexity pair violated '
                f'by {-margin:.3e}',
            )

    if report.failures:
        _logging.warning(
            '%s: %d consistency failures, first: %s',
            model.name, len(report.failures), report.failures[0],
        )
    return report
