"""Nonlocal repulsion velocity over each walker's sensory region.

The interaction velocity at a cell is the kernel-weighted sum of the crowd
density over the circular sector of radius R and angular width alpha ahead of
the walker, oriented by the behavioral velocity. The kernel is
-F * r / max(|r|^2, r_min^2), a cut-off inverse-distance repulsion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .scenario import CellGrid, Scenario


@dataclass(frozen=True)
class InteractionParams:
    alpha: float   # angular width of the sensory sector, radians
    R: float       # sensory radius, same units as the grid
    F: float       # repulsion strength
    r_min: float   # kernel cutoff radius

    def __post_init__(self):
        if not 0 < self.alpha <= 2 * math.pi + 1e-12:
            raise ValueError("alpha must lie in (0, 2*pi]")
        if not self.R > 0:
            raise ValueError("R must be > 0")
        if self.F < 0:
            raise ValueError("F must be >= 0")
        if not self.r_min > 0:
            raise ValueError("r_min must be > 0")

    @classmethod
    def from_scenario(cls, s: Scenario, g: CellGrid) -> "InteractionParams":
        # cutoff defaults to one cell spacing
        return cls(alpha=math.radians(s.alpha_deg), R=s.R, F=s.F, r_min=g.h)


def _in_sector(ox: int, oy: int, ux: float, uy: float, cos_half: float) -> bool:
    """Cosine test for an integer cell offset against a unit direction.

    The closed sector boundary is included; the small slack absorbs floating
    error in cos(alpha/2) for axis-aligned half angles."""
    r = math.hypot(ox, oy)
    return ox * ux + oy * uy >= (cos_half - 1e-12) * r


def disc_offsets(R: float, h: float) -> np.ndarray:
    """Integer cell offsets (excluding the origin) within center distance R."""
    m = int(math.floor(R / h + 1e-12))
    out = []
    for oy in range(-m, m + 1):
        for ox in range(-m, m + 1):
            if ox == 0 and oy == 0:
                continue
            if (ox * ox + oy * oy) * h * h <= R * R + 1e-12:
                out.append((ox, oy))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def sensory_mask(x: tuple, direction: Optional[np.ndarray],
                 p: InteractionParams, g: CellGrid) -> set:
    """Free cells visible from cell x = (ix, iy): within radius R and, when a
    direction is given, inside the sector of width alpha around it. Obstacle
    cells and cells outside the domain are excluded; so is x itself."""
    ix, iy = x
    if g.cell_class[iy, ix] != 0:
        raise ValueError("sensory_mask requires a free cell")
    use_dir = direction is not None and float(np.hypot(*direction)) > 0
    if use_dir:
        nrm = float(np.hypot(*direction))
        ux, uy = float(direction[0]) / nrm, float(direction[1]) / nrm
    cos_half = math.cos(0.5 * p.alpha)
    out = set()
    for ox, oy in disc_offsets(p.R, g.h):
        jx, jy = ix + int(ox), iy + int(oy)
        if not (0 <= jx < g.nx and 0 <= jy < g.ny):
            continue
        if g.cell_class[jy, jx] != 0:
            continue
        if use_dir and not _in_sector(int(ox), int(oy), ux, uy, cos_half):
            continue
        out.add((jx, jy))
    return out


@nb.njit(cache=True)
def _interaction_kernel(rho, free, ux, uy, has_dir, off, wkx, wky, rnorm,
                        cos_half, out):
    ny, nx = rho.shape
    n_off = off.shape[0]
    for iy in range(ny):
        for ix in range(nx):
            if not free[iy, ix]:
                continue
            vx = 0.0
            vy = 0.0
            dirx = ux[iy, ix]
            diry = uy[iy, ix]
            oriented = has_dir[iy, ix]
            for k in range(n_off):
                jx = ix + off[k, 0]
                jy = iy + off[k, 1]
                if jx < 0 or jx >= nx or jy < 0 or jy >= ny:
                    continue
                if not free[jy, jx]:
                    continue
                if oriented:
                    if off[k, 0] * dirx + off[k, 1] * diry < (cos_half - 1e-12) * rnorm[k]:
                        continue
                r = rho[jy, jx]
                vx += wkx[k] * r
                vy += wky[k] * r
            out[0, iy, ix] = vx
            out[1, iy, ix] = vy


def interaction_velocity(rho: np.ndarray, vb: Optional[np.ndarray],
                         p: InteractionParams, g: CellGrid) -> np.ndarray:
    """Repulsion velocity field (2, ny, nx) induced by the density rho.

    vb orients the sensory sector cell by cell; where vb vanishes (or vb is
    None) the full disc is used. Zero on obstacle cells.
    """
    off = disc_offsets(p.R, g.h)
    h = g.h
    rx = off[:, 0] * h
    ry = off[:, 1] * h
    r2 = np.maximum(rx * rx + ry * ry, p.r_min ** 2)
    wkx = -p.F * rx / r2 * h * h
    wky = -p.F * ry / r2 * h * h
    rnorm = np.hypot(off[:, 0].astype(float), off[:, 1].astype(float))

    ny, nx = rho.shape
    if vb is None:
        ux = np.zeros((ny, nx))
        uy = np.zeros((ny, nx))
        has_dir = np.zeros((ny, nx), dtype=np.bool_)
    else:
        speed = np.hypot(vb[0], vb[1])
        has_dir = speed > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            ux = np.where(has_dir, vb[0] / speed, 0.0)
            uy = np.where(has_dir, vb[1] / speed, 0.0)

    out = np.zeros((2, ny, nx))
    _interaction_kernel(
        rho, g.free, ux, uy, has_dir, off, wkx, wky, rnorm,
        math.cos(0.5 * p.alpha), out,
    )
    return out
