"""Minimum-time path planning on the cell grid.

Solves the static eikonal / frozen-drift Hamilton-Jacobi-Bellman equations by
an iterative semi-Lagrangian scheme accelerated with fast sweeping, and the
time-extended variant by a single backward pass over time slices. Feedback
velocities are the discrete one-step minimizers over a finite control set on
the unit circle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .interaction import InteractionParams, interaction_velocity
from .scenario import CellGrid
from .transport import project_velocity

log = logging.getLogger(__name__)

TOL_HJB = 1e-6
MAX_PASSES = 500
SPEED_FLOOR = 1e-6

# cell status for the solvers
_UPDATE = 0
_EXIT = 1
_WALL = 2

_SIDE_NORMALS = {"left": (-1.0, 0.0), "right": (1.0, 0.0),
                 "top": (0.0, 1.0), "bottom": (0.0, -1.0)}


@dataclass(frozen=True)
class ControlSet:
    """Unit control vectors equally spaced on the unit circle."""

    m: int = 32

    def __post_init__(self):
        if self.m < 4:
            raise ValueError("need at least 4 control directions")

    @property
    def ax(self) -> np.ndarray:
        return np.cos(2 * np.pi * np.arange(self.m) / self.m)

    @property
    def ay(self) -> np.ndarray:
        return np.sin(2 * np.pi * np.arange(self.m) / self.m)


CONTROLS = ControlSet(32)


@nb.njit(cache=True)
def _interp(phi, gx, gy, nx, ny):
    """Three-point linear interpolation on the triangulated center lattice.

    gx, gy are lattice coordinates (cell-index units). Queries inside the
    physical domain but within the half-cell margin are clamped onto the
    lattice hull; queries beyond it, or touching a non-finite vertex with
    positive weight, return +inf."""
    if gx < -0.5 - 1e-9 or gx > nx - 0.5 + 1e-9 or gy < -0.5 - 1e-9 or gy > ny - 0.5 + 1e-9:
        return np.inf
    if gx < 0.0:
        gx = 0.0
    elif gx > nx - 1.0:
        gx = nx - 1.0
    if gy < 0.0:
        gy = 0.0
    elif gy > ny - 1.0:
        gy = ny - 1.0
    ix0 = int(math.floor(gx))
    iy0 = int(math.floor(gy))
    if ix0 > nx - 2:
        ix0 = nx - 2
    if iy0 > ny - 2:
        iy0 = ny - 2
    s = gx - ix0
    t = gy - iy0
    if s + t <= 1.0:
        w0 = 1.0 - s - t
        v0 = phi[iy0, ix0]
        w1 = s
        v1 = phi[iy0, ix0 + 1]
        w2 = t
        v2 = phi[iy0 + 1, ix0]
    else:
        w0 = s + t - 1.0
        v0 = phi[iy0 + 1, ix0 + 1]
        w1 = 1.0 - t
        v1 = phi[iy0, ix0 + 1]
        w2 = 1.0 - s
        v2 = phi[iy0 + 1, ix0]
    acc = 0.0
    if w0 > 1e-12:
        if not np.isfinite(v0):
            return np.inf
        acc += w0 * v0
    if w1 > 1e-12:
        if not np.isfinite(v1):
            return np.inf
        acc += w1 * v1
    if w2 > 1e-12:
        if not np.isfinite(v2):
            return np.inf
        acc += w2 * v2
    return acc


@nb.njit(cache=True)
def _fsm_pass(phi, status, wx, wy, ax, ay, h, speed_floor,
              x0, xstep, y0, ystep):
    """One Gauss-Seidel sweep in the given ordering; returns the max update."""
    ny, nx = phi.shape
    mctl = ax.size
    maxchg = 0.0
    iy = y0
    for _ in range(ny):
        ix = x0
        for _ in range(nx):
            if status[iy, ix] == 0:
                wxl = wx[iy, ix]
                wyl = wy[iy, ix]
                best = np.inf
                for m in range(mctl):
                    bx = ax[m] + wxl
                    by = ay[m] + wyl
                    sp = math.hypot(bx, by)
                    if sp < speed_floor:
                        continue
                    val = _interp(phi, ix + bx / sp, iy + by / sp, nx, ny)
                    if np.isfinite(val):
                        cand = h / sp + val
                        if cand < best:
                            best = cand
                old = phi[iy, ix]
                phi[iy, ix] = best
                if np.isfinite(old) and np.isfinite(best):
                    chg = abs(best - old)
                    if chg > maxchg:
                        maxchg = chg
                elif np.isfinite(old) != np.isfinite(best):
                    maxchg = np.inf
            ix += xstep
        iy += ystep
    return maxchg


@nb.njit(cache=True)
def _static_feedback(phi, status, wx, wy, ax, ay, h, speed_floor, idx):
    """Argmin control index of the one-step value at every free cell; -1 where
    no finite candidate exists or phi is +inf, -2 on exit cells."""
    ny, nx = phi.shape
    mctl = ax.size
    for iy in range(ny):
        for ix in range(nx):
            if status[iy, ix] == 1:
                idx[iy, ix] = -2
                continue
            if status[iy, ix] == 2 or not np.isfinite(phi[iy, ix]):
                idx[iy, ix] = -1
                continue
            best = np.inf
            bidx = -1
            for m in range(mctl):
                bx = ax[m] + wx[iy, ix]
                by = ay[m] + wy[iy, ix]
                sp = math.hypot(bx, by)
                if sp < speed_floor:
                    continue
                val = _interp(phi, ix + bx / sp, iy + by / sp, nx, ny)
                if np.isfinite(val):
                    cand = h / sp + val
                    if cand < best:
                        best = cand
                        bidx = m
            idx[iy, ix] = bidx


@nb.njit(cache=True)
def _backward_slice(phi_next, status, wx, wy, ax, ay, h, dt, phi_out, idx_out):
    """One backward step of the time-extended problem: minimize
    dt + I[phi_next](x + dt * (a + w)) over controls a."""
    ny, nx = phi_next.shape
    mctl = ax.size
    for iy in range(ny):
        for ix in range(nx):
            if status[iy, ix] == 1:
                phi_out[iy, ix] = 0.0
                idx_out[iy, ix] = -2
                continue
            if status[iy, ix] == 2:
                phi_out[iy, ix] = np.inf
                idx_out[iy, ix] = -1
                continue
            wxl = wx[iy, ix]
            wyl = wy[iy, ix]
            best = np.inf
            bidx = -1
            for m in range(mctl):
                gx = ix + dt * (ax[m] + wxl) / h
                gy = iy + dt * (ay[m] + wyl) / h
                val = _interp(phi_next, gx, gy, nx, ny)
                if np.isfinite(val):
                    cand = dt + val
                    if cand < best:
                        best = cand
                        bidx = m
            phi_out[iy, ix] = best
            idx_out[iy, ix] = bidx


def _status(g: CellGrid) -> np.ndarray:
    status = np.zeros((g.ny, g.nx), dtype=np.uint8)
    status[g.cell_class != 0] = _WALL
    status[(g.exit_id >= 0) & (g.cell_class == 0)] = _EXIT
    return status


def _init_phi(g: CellGrid, status: np.ndarray) -> np.ndarray:
    phi = np.full((g.ny, g.nx), np.inf)
    phi[status == _EXIT] = 0.0
    return phi


_ORDERINGS = ((0, 1, 0, 1), (-1, -1, 0, 1), (0, 1, -1, -1), (-1, -1, -1, -1))


def solve_drift_hjb(g: CellGrid, drift: Optional[np.ndarray] = None,
                    controls: ControlSet = CONTROLS, tol: float = TOL_HJB,
                    max_passes: int = MAX_PASSES,
                    speed_floor: float = SPEED_FLOOR,
                    phi0: Optional[np.ndarray] = None) -> np.ndarray:
    """Minimum-time value field for dynamics a + drift, a on the unit circle.

    Fast sweeping alternates the four diagonal orderings until the largest
    update over a full cycle drops below tol. Cells from which no exit is
    reachable keep the +inf sentinel. phi0 warm-starts the iteration; the
    converged field does not depend on it.
    """
    status = _status(g)
    if not np.any(status == _EXIT):
        raise ValueError("grid has no exit cells")
    if drift is None:
        wx = np.zeros((g.ny, g.nx))
        wy = wx
    else:
        wx = np.ascontiguousarray(drift[0], dtype=float)
        wy = np.ascontiguousarray(drift[1], dtype=float)

    if phi0 is None:
        phi = _init_phi(g, status)
    else:
        phi = phi0.copy()
        phi[status == _EXIT] = 0.0
        phi[status == _WALL] = np.inf

    ax = np.ascontiguousarray(controls.ax)
    ay = np.ascontiguousarray(controls.ay)
    passes = 0
    while passes < max_passes:
        cyc = 0.0
        for (x0r, xstep, y0r, ystep) in _ORDERINGS:
            x0 = x0r if x0r >= 0 else g.nx - 1
            y0 = y0r if y0r >= 0 else g.ny - 1
            chg = _fsm_pass(phi, status, wx, wy, ax, ay, g.h, speed_floor,
                            x0, xstep, y0, ystep)
            cyc = max(cyc, chg)
            passes += 1
            if passes >= max_passes:
                break
        if cyc < tol:
            break
    else:
        log.warning("fast sweeping hit the %d-pass limit (last update %.3g)",
                    max_passes, cyc)

    n_unreached = int(np.count_nonzero(np.isinf(phi) & (status == _UPDATE)))
    if n_unreached:
        # expected under strong opposing drift; a geometry problem when static
        level = logging.DEBUG if drift is not None else logging.WARNING
        log.log(level, "%d free cells cannot reach any exit", n_unreached)
    return phi


def solve_eikonal(g: CellGrid, controls: ControlSet = CONTROLS,
                  tol: float = TOL_HJB, max_passes: int = MAX_PASSES) -> np.ndarray:
    """Minimum time to the exit set at unit speed (zero-drift HJB)."""
    return solve_drift_hjb(g, None, controls=controls, tol=tol,
                           max_passes=max_passes)


def feedback_indices(phi: np.ndarray, g: CellGrid,
                     drift: Optional[np.ndarray] = None,
                     controls: ControlSet = CONTROLS,
                     speed_floor: float = SPEED_FLOOR) -> np.ndarray:
    """Optimal control index per cell (-1 none, -2 exit cell)."""
    status = _status(g)
    if drift is None:
        wx = np.zeros((g.ny, g.nx))
        wy = wx
    else:
        wx = np.ascontiguousarray(drift[0], dtype=float)
        wy = np.ascontiguousarray(drift[1], dtype=float)
    idx = np.empty((g.ny, g.nx), dtype=np.int8)
    _static_feedback(phi, status, wx, wy, np.ascontiguousarray(controls.ax),
                     np.ascontiguousarray(controls.ay), g.h, speed_floor, idx)
    return idx


def velocity_from_indices(idx: np.ndarray, g: CellGrid,
                          controls: ControlSet = CONTROLS) -> np.ndarray:
    """Unit feedback velocity field from control indices; exit cells point
    outward through their boundary side."""
    v = np.zeros((2, g.ny, g.nx))
    ax, ay = controls.ax, controls.ay
    sel = idx >= 0
    v[0][sel] = ax[idx[sel]]
    v[1][sel] = ay[idx[sel]]
    for k, side in enumerate(g.exit_sides):
        cells = (g.exit_id == k) & (idx == -2)
        nx_, ny_ = _SIDE_NORMALS[side]
        v[0][cells] = nx_
        v[1][cells] = ny_
    return v


def feedback_velocity(phi: np.ndarray, g: CellGrid,
                      drift: Optional[np.ndarray] = None,
                      controls: ControlSet = CONTROLS) -> np.ndarray:
    """Behavioral velocity in feedback form: the control direction minimizing
    the one-step semi-Lagrangian value. Zero where phi is +inf or no finite
    candidate exists; unit magnitude elsewhere."""
    return velocity_from_indices(feedback_indices(phi, g, drift, controls), g,
                                 controls)


@dataclass
class TimeSpaceValue:
    """Backward-in-time value field on the slice grid.

    phi has one slice more than dir_idx: the terminal slice carries the static
    fallback and has no feedback of its own. terminal_dominated flags a
    horizon too short for most of the crowd."""

    times: np.ndarray          # (K+1,)
    phi: np.ndarray            # (K+1, ny, nx)
    dir_idx: np.ndarray        # (K, ny, nx), int8
    terminal_dominated: bool


def solve_timespace_hjb(g: CellGrid, rho_traj: np.ndarray, dt_slice: float,
                        p: InteractionParams,
                        vb_orient: Optional[np.ndarray] = None,
                        terminal_phi: Optional[np.ndarray] = None,
                        controls: ControlSet = CONTROLS,
                        t0: float = 0.0) -> TimeSpaceValue:
    """Minimum time to exit for dynamics a + v_i[rho(t)] with unit speed in t.

    rho_traj holds K+1 density slices at spacing dt_slice; the terminal slice
    takes the static eikonal value (the trajectory is implicitly extended as
    constant beyond its last sample). vb_orient orients the sensory regions of
    the interaction field: either one frozen field (2, ny, nx) or one field
    per slice (K, 2, ny, nx).
    """
    K = rho_traj.shape[0] - 1
    if K < 1:
        raise ValueError("rho_traj needs at least two time slices")
    status = _status(g)
    if terminal_phi is None:
        terminal_phi = solve_eikonal(g, controls=controls)
    phi = np.empty((K + 1, g.ny, g.nx))
    phi[K] = terminal_phi
    phi[K][status == _EXIT] = 0.0
    dir_idx = np.empty((K, g.ny, g.nx), dtype=np.int8)
    ax = np.ascontiguousarray(controls.ax)
    ay = np.ascontiguousarray(controls.ay)
    per_slice = vb_orient is not None and vb_orient.ndim == 4
    for k in range(K - 1, -1, -1):
        orient = vb_orient[k] if per_slice else vb_orient
        vi = interaction_velocity(rho_traj[k], orient, p, g)
        vi = project_velocity(vi, g)
        _backward_slice(phi[k + 1], status, np.ascontiguousarray(vi[0]),
                        np.ascontiguousarray(vi[1]), ax, ay, g.h, dt_slice,
                        phi[k], dir_idx[k])
    free = status == _UPDATE
    horizon = K * dt_slice
    n_dom = int(np.count_nonzero(phi[0][free] > horizon))
    n_free = int(np.count_nonzero(free))
    times = t0 + dt_slice * np.arange(K + 1)
    return TimeSpaceValue(
        times=times, phi=phi, dir_idx=dir_idx,
        terminal_dominated=(n_free > 0 and n_dom > 0.5 * n_free),
    )
