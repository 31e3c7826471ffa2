"""Conservative density transport with impermeable walls and exit outflow.

A first-order donor-cell (upwind) finite-volume scheme on the square grid;
face velocities average the adjacent cell centers, fluxes through walls and
obstacles are zero, fluxes through exit boundary faces drain mass into the
per-exit ledger. The one-dimensional restriction of the update is the
classical upwind scheme.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import CellGrid

DT_MAX_FACTOR = 0.5   # dt cap, in units of h
RHO_CAP = 4.0         # densest packing allowed at an entrance cell


class TransportError(RuntimeError):
    """Numerical failure in the transport step (CFL violation)."""


@dataclass
class ExitLedger:
    """Running mass balance: per-exit outflow plus injected and initial mass."""

    exit_ids: tuple
    outflow: np.ndarray = field(default=None)
    injected: float = 0.0
    initial: float = 0.0

    def __post_init__(self):
        if self.outflow is None:
            self.outflow = np.zeros(len(self.exit_ids))

    @property
    def total_evacuated(self) -> float:
        return float(self.outflow.sum())

    def balance_error(self, current_mass: float) -> float:
        """Relative conservation defect of initial + injected versus
        remaining + evacuated."""
        total_in = self.initial + self.injected
        if total_in == 0:
            return abs(current_mass + self.total_evacuated)
        return abs(total_in - current_mass - self.total_evacuated) / total_in

    def copy(self) -> "ExitLedger":
        return ExitLedger(self.exit_ids, self.outflow.copy(),
                          self.injected, self.initial)


def mass(rho: np.ndarray, h: float) -> float:
    return float(rho.sum()) * h * h


def project_velocity(v: np.ndarray, g: CellGrid) -> np.ndarray:
    """Impose impermeability: at cells adjacent to a wall or obstacle face,
    clamp the outward normal component to zero (both components at corners);
    exit boundary faces stay open. Obstacle cells carry zero velocity."""
    vx = v[0].copy()
    vy = v[1].copy()
    vx[g.blocked_e & (vx > 0)] = 0.0
    vx[g.blocked_w & (vx < 0)] = 0.0
    vy[g.blocked_n & (vy > 0)] = 0.0
    vy[g.blocked_s & (vy < 0)] = 0.0
    obst = ~g.free
    vx[obst] = 0.0
    vy[obst] = 0.0
    return np.stack([vx, vy])


def cfl_dt(v: np.ndarray, h: float, cfl: float = 0.45,
           dt_max: float = None) -> float:
    """Stable step dt = cfl * h / max(|vx| + |vy|), capped at dt_max."""
    if not 0 < cfl < 1:
        raise ValueError("cfl must lie in (0, 1)")
    if dt_max is None:
        dt_max = DT_MAX_FACTOR * h
    vmax = float(np.max(np.abs(v[0]) + np.abs(v[1])))
    if vmax <= 0:
        return dt_max
    return min(cfl * h / vmax, dt_max)


def step_density(rho: np.ndarray, v: np.ndarray, dt: float, g: CellGrid,
                 ledger: ExitLedger) -> np.ndarray:
    """One donor-cell update. v must already satisfy impermeability; wall and
    obstacle faces are hard-clamped regardless. Returns the new density and
    credits exit outflow on the ledger."""
    ny, nx = rho.shape
    h = g.h
    free = g.free
    vx, vy = v[0], v[1]

    # interior x-faces: between (iy, j-1) and (iy, j)
    fx = np.zeros((ny, nx + 1))
    u = 0.5 * (vx[:, :-1] + vx[:, 1:])
    u = np.where(free[:, :-1] & free[:, 1:], u, 0.0)
    fx[:, 1:-1] = np.where(u > 0, rho[:, :-1], rho[:, 1:]) * u
    # interior y-faces
    fy = np.zeros((ny + 1, nx))
    w = 0.5 * (vy[:-1, :] + vy[1:, :])
    w = np.where(free[:-1, :] & free[1:, :], w, 0.0)
    fy[1:-1, :] = np.where(w > 0, rho[:-1, :], rho[1:, :]) * w

    # boundary faces: only exit cells facing outward let mass through
    open_r = np.zeros(ny, dtype=bool)
    open_l = np.zeros(ny, dtype=bool)
    open_t = np.zeros(nx, dtype=bool)
    open_b = np.zeros(nx, dtype=bool)
    for k, s in enumerate(g.exit_sides):
        if s == "right":
            open_r |= (g.exit_id[:, -1] == k)
        elif s == "left":
            open_l |= (g.exit_id[:, 0] == k)
        elif s == "top":
            open_t |= (g.exit_id[-1, :] == k)
        elif s == "bottom":
            open_b |= (g.exit_id[0, :] == k)
    # outflow only (density outside the domain is zero)
    fx[:, -1] = np.where(open_r & (vx[:, -1] > 0), rho[:, -1] * vx[:, -1], 0.0)
    fx[:, 0] = np.where(open_l & (vx[:, 0] < 0), rho[:, 0] * vx[:, 0], 0.0)
    fy[-1, :] = np.where(open_t & (vy[-1, :] > 0), rho[-1, :] * vy[-1, :], 0.0)
    fy[0, :] = np.where(open_b & (vy[0, :] < 0), rho[0, :] * vy[0, :], 0.0)

    out = rho - (dt / h) * (fx[:, 1:] - fx[:, :-1] + fy[1:, :] - fy[:-1, :])

    peak = max(float(rho.max()), 1.0)
    if float(out.min()) < -1e-12 * peak:
        iy, ix = np.unravel_index(np.argmin(out), out.shape)
        raise TransportError(
            f"negative density {out[iy, ix]:.3e} at cell (ix={ix}, iy={iy}); "
            "the CFL condition was violated"
        )
    np.clip(out, 0.0, None, out=out)
    out[~free] = 0.0

    # ledger: mass through each exit's boundary faces
    scale = dt * h
    for k, s in enumerate(g.exit_sides):
        acc = 0.0
        if s == "right":
            acc += float(np.sum(fx[:, -1][g.exit_id[:, -1] == k]))
        elif s == "left":
            acc += float(-np.sum(fx[:, 0][g.exit_id[:, 0] == k]))
        elif s == "top":
            acc += float(np.sum(fy[-1, :][g.exit_id[-1, :] == k]))
        elif s == "bottom":
            acc += float(-np.sum(fy[0, :][g.exit_id[0, :] == k]))
        ledger.outflow[k] += acc * scale
    return out


def inject_inflow(rho: np.ndarray, g: CellGrid, t: float, dt: float,
                  ledger: ExitLedger, rho_cap: float = RHO_CAP) -> np.ndarray:
    """Add entrance inflow over [t, t+dt]: each active entrance spreads
    rate * dt uniformly over its cells, per-cell density capped at rho_cap
    (excess mass is not injected). No-op after the entrance duration."""
    if len(g.entrance_ids) == 0:
        return rho
    out = rho.copy()
    h2 = g.h * g.h
    for k in range(len(g.entrance_ids)):
        dur = g.entrance_durations[k]
        rate = g.entrance_rates[k]
        if rate <= 0 or t >= dur:
            continue
        span = min(dt, dur - t)
        cells = (g.entrance_id == k) & g.free
        n = int(np.count_nonzero(cells))
        if n == 0:
            continue
        add = rate * span / (n * h2)
        before = out[cells]
        after = np.minimum(before + add, rho_cap)
        ledger.injected += float(np.sum(after - before)) * h2
        out[cells] = after
    return out
