"""First-order fast-marching Eikonal solver and the planning layers on top.

The solver marches a wavefront over the grid with a binary-heap narrow band,
relaxing each cell from its accepted neighbors through one-sided, 45-degree
simplex, and two-axis quadratic updates. Arrival times are in physical units:
crossing one cell of size ``h`` at speed fraction ``f`` costs ``h / f``
normalized seconds (meters when ``f`` is 1 everywhere).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .grid import UNREACHED, GridGeometry, OccupancyGrid, ScalarField

SQRT2 = math.sqrt(2.0)
_INV_SQRT2 = 1.0 / SQRT2

# Neighbor directions, axial at even indices, diagonal at odd.
_OFF_I = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)
_OFF_J = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
# 45-degree sectors pair each diagonal with its two flanking axials.
_SECTOR_AXIAL = np.array([0, 2, 2, 4, 4, 6, 6, 0], dtype=np.int64)
_SECTOR_DIAG = np.array([1, 1, 3, 3, 5, 5, 7, 7], dtype=np.int64)
_QUAD_A = np.array([0, 2, 4, 6], dtype=np.int64)
_QUAD_B = np.array([2, 4, 6, 0], dtype=np.int64)

_FAR, _NARROW, _ACCEPTED = 0, 1, 2


class UnreachableGoalError(Exception):
    """Raised when no positive-speed route connects start and goal."""


class DescentError(Exception):
    """Raised when gradient descent stalls or exceeds its iteration budget.

    Signals a solver defect; never silently truncated.
    """


@njit(cache=True)
def _heap_push(keys, cells, size, key, cell):
    pos = size
    while pos > 0:
        parent = (pos - 1) >> 1
        if keys[parent] <= key:
            break
        keys[pos] = keys[parent]
        cells[pos] = cells[parent]
        pos = parent
    keys[pos] = key
    cells[pos] = cell
    return size + 1


@njit(cache=True)
def _heap_pop(keys, cells, size):
    top_key = keys[0]
    top_cell = cells[0]
    size -= 1
    if size > 0:
        key = keys[size]
        cell = cells[size]
        pos = 0
        while True:
            child = 2 * pos + 1
            if child >= size:
                break
            if child + 1 < size and keys[child + 1] < keys[child]:
                child += 1
            if keys[child] >= key:
                break
            keys[pos] = keys[child]
            cells[pos] = cells[child]
            pos = child
        keys[pos] = key
        cells[pos] = cell
    return top_key, top_cell, size


@njit(cache=True)
def _relax_cell(T, state, speed, h, i, j, w, ht, vals, have):
    """Best arrival-time candidate for (i, j) from its accepted neighbors."""
    inv = h / speed[i, j]
    for d in range(8):
        have[d] = 0
        ni = i + _OFF_I[d]
        nj = j + _OFF_J[d]
        if 0 <= ni < w and 0 <= nj < ht:
            c = ni * ht + nj
            if state[c] == _ACCEPTED:
                vals[d] = T[c]
                have[d] = 1
    best = np.inf
    for d in range(0, 8, 2):
        if have[d] and vals[d] + inv < best:
            best = vals[d] + inv
    diag_cost = SQRT2 * inv
    for d in range(1, 8, 2):
        if have[d] and vals[d] + diag_cost < best:
            best = vals[d] + diag_cost
    for s in range(8):
        a = _SECTOR_AXIAL[s]
        g = _SECTOR_DIAG[s]
        if have[a] and have[g]:
            ta = vals[a]
            td = vals[g]
            mu = (ta - td) / inv
            if 0.0 < mu < _INV_SQRT2:
                root = math.sqrt(1.0 - mu * mu)
                lam = 1.0 - mu / root
                cand = td + lam * (ta - td) + inv / root
                if cand < best:
                    best = cand
    for q in range(4):
        a = _QUAD_A[q]
        b = _QUAD_B[q]
        if have[a] and have[b]:
            ta = vals[a]
            tb = vals[b]
            diff = ta - tb
            if -inv < diff < inv:
                cand = 0.5 * (ta + tb + math.sqrt(2.0 * inv * inv - diff * diff))
                if cand < best:
                    best = cand
    return best


@njit(cache=True)
def _march(speed, h, sources, record_order):
    w, ht = speed.shape
    n_cells = w * ht
    T = np.full(n_cells, np.inf)
    state = np.zeros(n_cells, dtype=np.uint8)
    heap_keys = np.empty(8 * n_cells + 16, dtype=np.float64)
    heap_cells = np.empty(8 * n_cells + 16, dtype=np.int64)
    vals = np.empty(8, dtype=np.float64)
    have = np.empty(8, dtype=np.uint8)
    order = np.empty(n_cells if record_order else 0, dtype=np.int64)
    size = 0
    accepted = 0
    for k in range(sources.shape[0]):
        c = sources[k]
        if T[c] != 0.0:
            T[c] = 0.0
            state[c] = _NARROW
            size = _heap_push(heap_keys, heap_cells, size, 0.0, c)
    while size > 0:
        _, c, size = _heap_pop(heap_keys, heap_cells, size)
        if state[c] == _ACCEPTED:
            continue
        state[c] = _ACCEPTED
        if record_order:
            order[accepted] = c
        accepted += 1
        ci = c // ht
        cj = c % ht
        for d in range(8):
            ni = ci + _OFF_I[d]
            nj = cj + _OFF_J[d]
            if ni < 0 or ni >= w or nj < 0 or nj >= ht:
                continue
            nc = ni * ht + nj
            if state[nc] == _ACCEPTED or speed[ni, nj] <= 0.0:
                continue
            cand = _relax_cell(T, state, speed, h, ni, nj, w, ht, vals, have)
            if cand < T[nc] - 1e-15:
                T[nc] = cand
                state[nc] = _NARROW
                size = _heap_push(heap_keys, heap_cells, size, cand, nc)
    return T, order[:accepted]


@dataclass(eq=False)
class ArrivalTimeField:
    """Wavefront arrival times from a source set, plus descent support."""

    field: ScalarField
    sources: np.ndarray  # (K, 2) int cell indices
    accept_order: np.ndarray | None = None  # flattened cells, solver accept sequence
    _grad: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, init=False)

    @property
    def geometry(self) -> GridGeometry:
        return self.field.geometry

    def value_at(self, x: float, y: float) -> float:
        """Arrival time at a world point (bilinear over finite cells)."""
        return self.field.sample_bilinear(x, y)

    def gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell central-difference gradient grids, one-sided at obstacles."""
        if self._grad is None:
            self._grad = _finite_gradients(self.field.values, self.geometry.cell_size)
        return self._grad

    def sample_gradient(self, x: float, y: float) -> np.ndarray:
        """Bilinearly interpolated gradient at a world point."""
        gx, gy = self.gradients()
        finite = np.isfinite(self.field.values)
        geom = self.geometry
        u = (x - geom.origin[0]) / geom.cell_size - 0.5
        v = (y - geom.origin[1]) / geom.cell_size - 0.5
        u = min(max(u, 0.0), geom.width - 1.0)
        v = min(max(v, 0.0), geom.height - 1.0)
        i0 = min(int(math.floor(u)), geom.width - 2) if geom.width > 1 else 0
        j0 = min(int(math.floor(v)), geom.height - 2) if geom.height > 1 else 0
        tx = u - i0
        ty = v - j0
        i1 = min(i0 + 1, geom.width - 1)
        j1 = min(j0 + 1, geom.height - 1)
        acc = np.zeros(2)
        weight = 0.0
        for ii, jj, wgt in (
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i1, j0, tx * (1.0 - ty)),
            (i0, j1, (1.0 - tx) * ty),
            (i1, j1, tx * ty),
        ):
            if finite[ii, jj] and wgt > 0.0:
                acc[0] += gx[ii, jj] * wgt
                acc[1] += gy[ii, jj] * wgt
                weight += wgt
        if weight > 0.0:
            acc /= weight
        return acc


def _finite_gradients(values: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    finite = np.isfinite(values)

    def along(axis: int) -> np.ndarray:
        v = values if axis == 0 else values.T
        f = finite if axis == 0 else finite.T
        grad = np.zeros_like(v)
        prev_ok = np.zeros_like(f)
        next_ok = np.zeros_like(f)
        prev_ok[1:] = f[:-1]
        next_ok[:-1] = f[1:]
        prev_v = np.zeros_like(v)
        next_v = np.zeros_like(v)
        prev_v[1:] = np.where(f[:-1], v[:-1], 0.0)
        next_v[:-1] = np.where(f[1:], v[1:], 0.0)
        central = f & prev_ok & next_ok
        fwd = f & next_ok & ~central
        bwd = f & prev_ok & ~central & ~fwd
        grad[central] = (next_v[central] - prev_v[central]) / (2.0 * h)
        grad[fwd] = (next_v[fwd] - v[fwd]) / h
        grad[bwd] = (v[bwd] - prev_v[bwd]) / h
        return grad if axis == 0 else grad.T

    return along(0), along(1)


@dataclass(eq=False)
class VelocityMap:
    """Obstacle-distance field saturated at a safe distance, scaled to [0, 1]."""

    field: ScalarField
    safe_distance: float

    @property
    def geometry(self) -> GridGeometry:
        return self.field.geometry

    def value_at_cell(self, i: int, j: int) -> float:
        if not self.geometry.in_bounds(i, j):
            return 0.0
        return float(self.field.values[i, j])

    def value_at_world(self, x: float, y: float) -> float:
        return self.value_at_cell(*self.geometry.cell_of_world(x, y))


@dataclass(eq=False)
class PlannedPath:
    """Gradient-descent polyline on an arrival-time field.

    ``etas[k]`` is the field's remaining time-to-goal at ``vertices[k]``;
    ``eta`` is the value at the start.
    """

    vertices: np.ndarray  # (n, 2) world points
    etas: np.ndarray  # (n,) normalized seconds
    start: np.ndarray
    goal: np.ndarray

    @property
    def eta(self) -> float:
        return float(self.etas[0])

    def __len__(self) -> int:
        return len(self.vertices)

    def initial_direction(self) -> np.ndarray | None:
        """Unit direction of the first path segment, None when converged."""
        if len(self.vertices) < 2:
            return None
        seg = self.vertices[1] - self.vertices[0]
        norm = float(np.linalg.norm(seg))
        if norm <= 0.0:
            return None
        return seg / norm


def solve_eikonal(
    speed: ScalarField,
    sources,
    *,
    record_order: bool = False,
) -> ArrivalTimeField:
    """Solve ``|grad D| * speed = 1`` with D = 0 on the source cells.

    Cells unreachable through positive-speed cells keep the UNREACHED value.
    Sources on zero-speed cells are skipped; at least one valid source is
    required.
    """
    values = np.asarray(speed.values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0 + 1e-9):
        raise ValueError("speed values must lie in [0, 1]")
    source_list = [tuple(s) for s in sources]
    if not source_list:
        raise ValueError("at least one source cell is required")
    geom = speed.geometry
    flat = []
    for i, j in source_list:
        if not geom.in_bounds(i, j):
            raise ValueError(f"source cell {(i, j)} is out of bounds")
        if values[i, j] > 0.0:
            flat.append(i * geom.height + j)
    if not flat:
        raise ValueError("all source cells lie on zero-speed cells")
    T, order = _march(
        np.ascontiguousarray(values),
        geom.cell_size,
        np.asarray(flat, dtype=np.int64),
        record_order,
    )
    result = ScalarField(geom, T.reshape(geom.width, geom.height))
    return ArrivalTimeField(
        field=result,
        sources=np.asarray(source_list, dtype=np.int64),
        accept_order=order if record_order else None,
    )


def distance_field(grid: OccupancyGrid, *, record_order: bool = False) -> ArrivalTimeField:
    """Distance transform: unit-speed arrival times from all occupied cells."""
    geom = grid.geometry
    occupied = np.flatnonzero(grid.cells.reshape(-1))
    if occupied.size == grid.cells.size:
        raise ValueError("map has no free cells")
    if occupied.size == 0:
        warnings.warn("map has no occupied cells; distance field is unbounded", RuntimeWarning)
        values = np.full((geom.width, geom.height), UNREACHED)
        return ArrivalTimeField(field=ScalarField(geom, values), sources=np.empty((0, 2), dtype=np.int64))
    T, order = _march(
        np.ones((geom.width, geom.height)),
        geom.cell_size,
        occupied.astype(np.int64),
        record_order,
    )
    cells = np.stack(np.unravel_index(occupied, grid.cells.shape), axis=1)
    return ArrivalTimeField(
        field=ScalarField(geom, T.reshape(geom.width, geom.height)),
        sources=cells.astype(np.int64),
        accept_order=order if record_order else None,
    )


def build_velocity_map(grid: OccupancyGrid, safe_distance: float) -> VelocityMap:
    """Saturate the grid's distance transform at ``safe_distance``, scale to [0, 1]."""
    if not safe_distance > 0.0:
        raise ValueError(f"safe_distance must be positive, got {safe_distance}")
    dist = distance_field(grid)
    values = np.minimum(dist.field.values / safe_distance, 1.0)
    values = np.where(grid.cells, 0.0, values)
    return VelocityMap(field=ScalarField(grid.geometry, values), safe_distance=safe_distance)


def _descent_budget(geom: GridGeometry) -> int:
    return 10 * 2 * (geom.width + geom.height)


def extract_path(
    arrival: ArrivalTimeField,
    start,
    goal,
    *,
    step: float | None = None,
    goal_tolerance: float | None = None,
    max_steps: int | None = None,
) -> PlannedPath:
    """Descend an arrival-time field from ``start`` toward its zero at ``goal``."""
    geom = arrival.geometry
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    for name, point in (("start", start), ("goal", goal)):
        if not geom.contains_world(point[0], point[1]):
            raise ValueError(f"{name} point {tuple(point)} is outside the map")
    h = geom.cell_size
    step = 0.5 * h if step is None else step
    tol = h if goal_tolerance is None else goal_tolerance
    budget = _descent_budget(geom) if max_steps is None else max_steps

    if float(np.linalg.norm(start - goal)) <= tol:
        return PlannedPath(
            vertices=start.reshape(1, 2).copy(),
            etas=np.zeros(1),
            start=start,
            goal=goal,
        )

    eta0 = arrival.value_at(start[0], start[1])
    if not math.isfinite(eta0):
        raise UnreachableGoalError(
            f"goal {tuple(goal)} is unreachable from start {tuple(start)} (infinite arrival time)"
        )

    vertices = [start.copy()]
    etas = [eta0]
    point = start.copy()
    for _ in range(budget):
        grad = arrival.sample_gradient(point[0], point[1])
        norm = float(np.linalg.norm(grad))
        if norm < 1e-12:
            raise DescentError(
                f"gradient descent stalled at {tuple(point)} (|grad| = {norm:.3e})"
            )
        point = point - (step / norm) * grad
        point[0] = min(max(point[0], geom.origin[0]), geom.origin[0] + geom.extent[0] - 1e-9)
        point[1] = min(max(point[1], geom.origin[1]), geom.origin[1] + geom.extent[1] - 1e-9)
        vertices.append(point.copy())
        etas.append(arrival.value_at(point[0], point[1]))
        if float(np.linalg.norm(point - goal)) <= tol:
            return PlannedPath(
                vertices=np.asarray(vertices),
                etas=np.asarray(etas),
                start=start,
                goal=goal,
            )
    raise DescentError(
        f"gradient descent exceeded its {budget}-step budget from {tuple(start)}"
    )


def plan_path(vmap: VelocityMap, start, goal) -> PlannedPath:
    """Plan from ``start`` to ``goal``: solve arrival times on the velocity
    map from the goal cell, then extract the descent path."""
    geom = vmap.geometry
    goal = np.asarray(goal, dtype=np.float64)
    start = np.asarray(start, dtype=np.float64)
    if not geom.contains_world(goal[0], goal[1]):
        raise ValueError(f"goal point {tuple(goal)} is outside the map")
    goal_cell = geom.cell_of_world(goal[0], goal[1])
    if vmap.value_at_cell(*goal_cell) <= 0.0:
        raise UnreachableGoalError(f"goal {tuple(goal)} lies in a zero-speed cell")
    arrival = solve_eikonal(vmap.field, [goal_cell])
    return extract_path(arrival, start, goal)


def sobel_gradient(sfield: ScalarField, cell: tuple[int, int]) -> np.ndarray:
    """Sobel 3x3 gradient at a cell, in per-meter units, toward increasing values.

    Out-of-bounds patch neighbors replicate the nearest in-bounds value.
    """
    i, j = cell
    geom = sfield.geometry
    if not geom.in_bounds(i, j):
        raise ValueError(f"cell {cell} is out of bounds")
    values = sfield.values
    gx = 0.0
    gy = 0.0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ii = min(max(i + di, 0), geom.width - 1)
            jj = min(max(j + dj, 0), geom.height - 1)
            v = values[ii, jj]
            weight_x = di * (2 if dj == 0 else 1)
            weight_y = dj * (2 if di == 0 else 1)
            gx += weight_x * v
            gy += weight_y * v
    scale = 1.0 / (8.0 * geom.cell_size)
    return np.array([gx * scale, gy * scale])
