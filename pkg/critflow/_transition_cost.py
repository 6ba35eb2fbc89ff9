"""
Energy-dissipation cost between components of C(t) at a frozen time.

The primary value is a shortest path over heterocline edges; direct
minimization of the discretized functional is an upper-bound cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from . import _logging
from ._critical_atlas import _polish
from ._critical_atlas import classify
from ._critical_atlas import ComponentRef
from ._critical_atlas import components_at
from ._critical_atlas import critical_bound
from ._critical_atlas import snap
from ._critical_atlas import CRITICAL_TOL
from ._energy_model import as_state
from ._flow_integrator import descend

__all__ = ['TransitionCurve', 'CostResult', 'TransitionGraph', 'make_curve',
           'heterocline', 'cost', 'reparameterize', 'direct_minimization',
           'segment_loads']

HETEROCLINE_NODES = 2001
DIRECT_NODES = 200
DIRECT_ITERATIONS = 500
DIRECT_STEP = 1e-2
SNAP_TOL = 1e-6


class Method:
    GRAPH = 'heteroclinic_graph'
    DIRECT = 'direct_minimization'
    SEGMENT = 'straight_segment'


@dataclass(frozen=True, eq=False)
class TransitionCurve:
    """
    Discrete transition theta_0..theta_N at frozen time t.

    ``params`` is the curve parameter r in [0, 1]; ``clock`` is the original
    parameter s(r), which reparameterization keeps.
    """

    t: float
    nodes: np.ndarray
    endpoints: tuple
    slopes: np.ndarray
    energies: np.ndarray
    params: np.ndarray
    clock: np.ndarray
    escaped: bool = False
    incomplete: bool = False

    @property
    def slope_weighted_length(self):
        moves = np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)
        return float(np.sum(0.5 * (self.slopes[:-1] + self.slopes[1:]) * moves))

    @property
    def noncritical_mask(self):
        return self.slopes > np.array([critical_bound(u, 1e-6) for u in self.nodes])

    @property
    def arclength(self):
        return float(np.sum(np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)))

    def reversed(self):
        return replace(
            self,
            nodes=self.nodes[::-1],
            endpoints=self.endpoints[::-1],
            slopes=self.slopes[::-1],
            energies=self.energies[::-1],
            params=1.0 - self.params[::-1],
            clock=self.clock[-1] - self.clock[::-1],
        )


@dataclass(frozen=True, eq=False)
class CostResult:
    value: float | None
    curve: TransitionCurve | None
    method: str
    lower_bound_gap: float | None
    path: tuple = ()
    cross_check: float | None = None

    @property
    def reachable(self):
        return self.value is not None

    def to_dict(self):
        return {
            'value': self.value,
            'method': self.method,
            'lower_bound_gap': self.lower_bound_gap,
            'path': list(self.path),
            'cross_check': self.cross_check,
            'reachable': self.reachable,
        }


def _arclength_params(nodes):
    moves = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    total = float(np.sum(moves))
    if total == 0:
        return np.linspace(0.0, 1.0, len(nodes))
    return np.concatenate(([0.0], np.cumsum(moves))) / total


def make_curve(model, t, nodes, endpoints, params=None, **flags):
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    params = _arclength_params(nodes) if params is None else np.asarray(params, dtype=float)
    return TransitionCurve(
        t=float(t),
        nodes=nodes,
        endpoints=tuple(endpoints),
        slopes=np.array([np.linalg.norm(model.eval_gradient(t, u)) for u in nodes]),
        energies=np.array([model.eval_energy(t, u) for u in nodes]),
        params=params,
        clock=params.copy(),
        **flags,
    )


def _resample(nodes, count):
    """``count`` nodes equally spaced in arclength along the polyline."""
    params = _arclength_params(nodes)
    targets = np.linspace(0.0, 1.0, count)
    return np.column_stack([
        np.interp(targets, params, nodes[:, i]) for i in range(nodes.shape[1])
    ])


def _component_of(model, t, u, components):
    if components:
        component, distance = snap(None, t, u, components)
        limit = SNAP_TOL * (1.0 + np.linalg.norm(u))
        if component.continuum is not None:
            limit = max(limit, 1e-2)
        if distance <= limit:
            return component
    point = classify(model, t, u)
    kind = ComponentRef.CRITICAL if point.residual <= critical_bound(u, 1e-6) \
        else ComponentRef.SINGLETON
    return ComponentRef(kind=kind, t=float(t), representative=u, point=point)


def heterocline(
        model,
        t,
        saddle,
        direction,
        components=None,
        rho=None,
        count=HETEROCLINE_NODES,
        max_arclength=50.0,
):
    """
    Frozen-time descent from saddle + delta * direction, delta = 1e-4 (1 + |u|).

    The saddle itself is the first node, the polished limit point the last;
    the polyline is resampled to ``count`` nodes by arclength.
    """
    if not (saddle.morse_index >= 1 or saddle.degenerate):
        raise ValueError('heterocline needs a saddle or a degenerate critical point')
    direction = as_state(model, direction)
    direction = direction / np.linalg.norm(direction)
    delta = 1e-4 * (1.0 + np.linalg.norm(saddle.u))

    path = descend(
        model, t, saddle.u + delta * direction,
        slope_tol=CRITICAL_TOL, max_arclength=max_arclength, rho=rho,
    )
    nodes = np.vstack([saddle.u[None, :], path.nodes])
    if path.converged:
        nodes[-1] = _polish(model, t, nodes[-1].copy())[0]

    start = _component_of(model, t, saddle.u, components)
    end = _component_of(model, t, nodes[-1], components)
    if path.escaped or not path.converged:
        _logging.debug(
            'heterocline at t=%g from %s: escaped=%s converged=%s',
            t, saddle.u, path.escaped, path.converged,
        )
    return make_curve(
        model, t, _resample(nodes, count), (start, end),
        escaped=path.escaped, incomplete=not path.converged and not path.escaped,
    )


def segment_loads(curve):
    """Per-segment (d clock + slope |d theta|) / d params."""
    moves = np.linalg.norm(np.diff(curve.nodes, axis=0), axis=1)
    mids = 0.5 * (curve.slopes[:-1] + curve.slopes[1:])
    spans = np.diff(curve.params)
    keep = spans > 0
    return (np.diff(curve.clock)[keep] + mids[keep] * moves[keep]) / spans[keep]


def reparameterize(curve):
    """
    Normalizes the parameter so that d clock + slope |d theta| is constant
    per unit parameter. Nodes are kept, so the slope-weighted length is
    unchanged.
    """
    moves = np.linalg.norm(np.diff(curve.nodes, axis=0), axis=1)
    mids = 0.5 * (curve.slopes[:-1] + curve.slopes[1:])
    load = np.diff(curve.clock) + mids * moves
    total = float(np.sum(load))
    if total <= 0:
        return curve
    params = np.concatenate(([0.0], np.cumsum(load))) / total
    return replace(curve, params=params)


def _functional(model, t, nodes):
    slopes = np.linalg.norm(
        np.array([model.eval_gradient(t, u) for u in nodes]), axis=1,
    )
    moves = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    return float(np.sum(0.5 * (slopes[:-1] + slopes[1:]) * moves))


def _functional_gradient(model, t, nodes):
    gradients = np.array([model.eval_gradient(t, u) for u in nodes])
    slopes = np.linalg.norm(gradients, axis=1)
    diffs = np.diff(nodes, axis=0)
    moves = np.linalg.norm(diffs, axis=1)
    units = diffs / np.where(moves > 0, moves, 1.0)[:, None]
    weights = 0.5 * (slopes[:-1] + slopes[1:])

    result = np.zeros_like(nodes)
    for k in range(1, len(nodes) - 1):
        if slopes[k] > 1e-14:
            slope_gradient = model.eval_hessian(t, nodes[k]) @ gradients[k] / slopes[k]
            result[k] += 0.5 * slope_gradient * (moves[k - 1] + moves[k])
        result[k] += weights[k - 1] * units[k - 1] - weights[k] * units[k]
    return result


def direct_minimization(
        model,
        t,
        curve,
        count=DIRECT_NODES,
        iterations=DIRECT_ITERATIONS,
        step=DIRECT_STEP,
):
    """
    Local descent on sum slope |d theta| over interior node positions with
    pinned endpoints, started from ``curve`` reparameterized to ``count``
    nodes. Never increases the discrete value.
    """
    nodes = _resample_pieces(curve.nodes, curve.slopes, count)
    value = _functional(model, t, nodes)
    for _ in range(iterations):
        gradient = _functional_gradient(model, t, nodes)
        if not np.any(gradient):
            break
        alpha = step
        while alpha > 1e-10:
            candidate = nodes - alpha * gradient
            candidate_value = _functional(model, t, candidate)
            if candidate_value < value:
                break
            alpha *= 0.5
        else:
            break
        nodes, value = candidate, candidate_value
    refined = make_curve(model, t, nodes, curve.endpoints)
    return CostResult(
        value=value,
        curve=refined,
        method=Method.DIRECT,
        lower_bound_gap=value - abs(refined.energies[-1] - refined.energies[0]),
    )


def _resample_pieces(nodes, slopes, count):
    """
    Resamples by arclength while keeping the critical nodes of the witness,
    so the trapezoid rule never straddles a zero of the slope.
    """
    moves = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    total = float(np.sum(moves))
    if total == 0 or len(nodes) < 3:
        return _resample(nodes, count)

    critical = [
        k for k in range(1, len(nodes) - 1)
        if slopes[k] <= critical_bound(nodes[k], 1e-6)
    ]
    breaks = [0, *critical, len(nodes) - 1]
    pieces = []
    for a, b in zip(breaks, breaks[1:]):
        length = float(np.sum(moves[a:b]))
        if length <= 1e-12 * total:
            continue
        size = max(2, round(count * length / total))
        piece = _resample(nodes[a:b + 1], size)
        pieces.append(piece if not pieces else piece[1:])
    return np.vstack(pieces)


class TransitionGraph:
    """
    Components of C(t) as vertices, heteroclines as edges weighted by the
    energy gap. Reversed heteroclines carry the same weight, so the graph is
    undirected.
    """

    def __init__(self, model, atlas, t, rho=None, count=HETEROCLINE_NODES):
        self.model = model
        self.atlas = atlas
        self.t = float(t)
        self.rho = atlas.rho if rho is None else rho
        self.count = count
        self.components = components_at(atlas, t)
        self.index = {c.component_id: i for i, c in enumerate(self.components)}
        self.energies = np.array([
            model.eval_energy(t, c.representative) for c in self.components
        ])
        self.edges = {}
        self.escapes = []
        self.unresolved = []
        self._build()

    def _directions(self, component):
        point = component.point
        values, vectors = np.linalg.eigh(self.model.eval_hessian(self.t, point.u))
        chosen = [
            vectors[:, i] for i, value in enumerate(values)
            if value < -point.degeneracy_tol or abs(value) <= point.degeneracy_tol
        ]
        return [sign * v for v in chosen for sign in (1.0, -1.0)]

    def _build(self):
        for i, component in enumerate(self.components):
            point = component.point
            if not (point.morse_index or point.degenerate):
                continue
            for direction in self._directions(component):
                curve = heterocline(
                    self.model, self.t, point, direction,
                    components=self.components, rho=self.rho, count=self.count,
                )
                if curve.escaped or curve.incomplete:
                    self.escapes.append(curve)
                    continue
                target = curve.endpoints[1]
                j = self.index.get(target.component_id)
                if j is None:
                    self.unresolved.append(curve)
                    continue
                if j == i:
                    continue
                key = (min(i, j), max(i, j))
                oriented = curve if i < j else curve.reversed()
                known = self.edges.get(key)
                if known is None or oriented.slope_weighted_length < known.slope_weighted_length:
                    self.edges[key] = replace(
                        oriented,
                        endpoints=(self.components[key[0]], self.components[key[1]]),
                    )
        _logging.debug(
            'transition graph t=%g: %d components, %d edges, %d escapes',
            self.t, len(self.components), len(self.edges), len(self.escapes),
        )

    def locate(self, ref):
        """Vertex of a critical component, by atlas id or else by position."""
        if ref.component_id in self.index:
            return self.index[ref.component_id]
        if not self.components:
            return None
        component = _component_of(self.model, self.t, ref.representative, self.components)
        return self.index.get(component.component_id)

    def weight(self, i, j):
        return abs(self.energies[i] - self.energies[j])

    def _matrix(self):
        size = len(self.components)
        rows, cols, data = [], [], []
        for i, j in self.edges:
            rows.append(i)
            cols.append(j)
            data.append(max(self.weight(i, j), 1e-300))
        return csr_matrix((data, (rows, cols)), shape=(size, size))

    def cost_matrix(self):
        if not self.components:
            return np.zeros((0, 0))
        return dijkstra(self._matrix(), directed=False)

    def shortest(self, i, j):
        """Value and vertex path of the cheapest transition, or (None, ())."""
        if i == j:
            return 0.0, (i,)
        distances, predecessors = dijkstra(
            self._matrix(), directed=False, indices=i, return_predecessors=True,
        )
        if not math.isfinite(distances[j]):
            return None, ()
        path = [j]
        while path[-1] != i:
            path.append(int(predecessors[path[-1]]))
        return float(distances[j]), tuple(path[::-1])

    def witness(self, path):
        """Concatenates the oriented edges along ``path``, threading loops."""
        pieces = []
        for a, b in zip(path, path[1:]):
            key = (min(a, b), max(a, b))
            curve = self.edges[key]
            nodes = curve.nodes if a < b else curve.nodes[::-1]
            if pieces:
                pieces.append(self._thread(self.components[a], pieces[-1][-1], nodes[0]))
            pieces.append(nodes)
        if not pieces:
            return self.components[path[0]].representative[None, :]
        return np.vstack(pieces)

    @staticmethod
    def _thread(component, start, end):
        """Nodes inside one component from start to end; zero slope there."""
        continuum = component.continuum
        if continuum is None:
            return np.vstack([start, end])
        points = continuum.points
        a = int(np.argmin(np.linalg.norm(points - start, axis=1)))
        b = int(np.argmin(np.linalg.norm(points - end, axis=1)))
        if continuum.closed:
            size = len(points)
            forward = [(a + k) % size for k in range((b - a) % size + 1)]
            backward = [(a - k) % size for k in range((a - b) % size + 1)]
            order = forward if len(forward) <= len(backward) else backward
        else:
            order = list(range(a, b + 1)) if a <= b else list(range(a, b - 1, -1))
        return np.vstack([start, points[order], end])


def _basin_leg(model, t, singleton, graph):
    path = descend(model, t, singleton.representative, slope_tol=CRITICAL_TOL, rho=graph.rho)
    nodes = path.nodes.copy()
    nodes[-1] = _polish(model, t, nodes[-1].copy())[0]
    target = _component_of(model, t, nodes[-1], graph.components)
    return nodes, target


def _graph_route(model, t, U0, U1, graph):
    """Basin legs for singletons plus the shortest heterocline path."""
    legs = []
    ends = []
    for ref in (U0, U1):
        if ref.critical:
            ends.append(ref)
            legs.append(None)
        else:
            nodes, target = _basin_leg(model, t, ref, graph)
            ends.append(target)
            legs.append(nodes)

    i = graph.locate(ends[0])
    j = graph.locate(ends[1])
    if i is None or j is None:
        _logging.warning('cost endpoint at t=%g is not an atlas component', t)
        return None
    value, path = graph.shortest(i, j)
    if value is None:
        return None

    pieces = []
    if legs[0] is not None:
        value += model.eval_energy(t, legs[0][0]) - model.eval_energy(t, legs[0][-1])
        pieces.append(legs[0])
    pieces.append(graph.witness(path))
    if legs[1] is not None:
        value += model.eval_energy(t, legs[1][0]) - model.eval_energy(t, legs[1][-1])
        pieces.append(legs[1][::-1])
    curve = make_curve(model, t, np.vstack(pieces), (U0, U1))
    ids = tuple(graph.components[k].component_id for k in path)
    return float(value), curve, ids


def _segment_route(model, t, U0, U1, count=HETEROCLINE_NODES):
    weights = np.linspace(0.0, 1.0, count)[:, None]
    nodes = (1.0 - weights) * U0.representative + weights * U1.representative
    curve = make_curve(model, t, nodes, (U0, U1))
    return curve.slope_weighted_length, curve


def cost(model, atlas, t, U0, U1, graph=None, cross_check=True):
    """
    c_t(U0, U1): shortest heterocline path between the components, with
    noncritical singletons first descended into their basins.

    Descent legs cannot leave a basin, so when a singleton is involved the
    straight segment between the representatives competes as well and the
    cheaper of the two is reported.
    """
    if abs(U0.t - t) > 1e-12 or abs(U1.t - t) > 1e-12:
        raise ValueError('both endpoints must live at the frozen time t')

    e0 = model.eval_energy(t, U0.representative)
    e1 = model.eval_energy(t, U1.representative)
    if U0.component_id is not None and U0.component_id == U1.component_id or (
        not U0.critical and not U1.critical and
        np.array_equal(U0.representative, U1.representative)
    ):
        curve = make_curve(model, t, U0.representative[None, :], (U0, U1))
        return CostResult(0.0, curve, Method.GRAPH, 0.0 - abs(e1 - e0), path=(U0.component_id,))

    graph = TransitionGraph(model, atlas, t) if graph is None else graph
    route = _graph_route(model, t, U0, U1, graph)
    method = Method.GRAPH
    if not (U0.critical and U1.critical):
        length, segment = _segment_route(model, t, U0, U1)
        if route is None or length < route[0] - 1e-12:
            route = (length, segment, ())
            method = Method.SEGMENT
    if route is None:
        return CostResult(None, None, Method.GRAPH, None)
    value, curve, ids = route

    checked = None
    if cross_check and len(curve.nodes) > 2:
        checked = direct_minimization(model, t, curve).value
        if checked < value - 1e-4:
            _logging.warning(
                'direct minimization %.6g beats the %s value %.6g at t=%g',
                checked, method, value, t,
            )
    return CostResult(
        value=float(value),
        curve=curve,
        method=method,
        lower_bound_gap=float(value - abs(e1 - e0)),
        path=ids,
        cross_check=checked,
    )
