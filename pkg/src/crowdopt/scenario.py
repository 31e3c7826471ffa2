"""Walking-area scenarios: geometry, physical scales, validation, and cell grids.

A Scenario describes the room in physical units (meters, seconds, ped/m^2).
Solvers operate on the dimensionless version produced by
:func:`nondimensionalize`; :func:`classify_cells` rasterizes the geometry onto
a structured grid of square cells.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
import yaml

SIDES = ("left", "right", "top", "bottom")

# cell classes
FREE = 0
OBSTACLE = 1


class ScenarioError(ValueError):
    """Malformed scenario file or violated scenario invariant."""


@dataclass(frozen=True)
class CharacteristicScales:
    """Characteristic length (m), speed (m/s), and density (ped/m^2)."""

    L: float = 1.0
    V: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        for name in ("L", "V", "rho"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"scales.{name} must be > 0")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle given by barycenter (x, y) and side lengths."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.x - 0.5 * self.w

    @property
    def x1(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def y0(self) -> float:
        return self.y - 0.5 * self.h

    @property
    def y1(self) -> float:
        return self.y + 0.5 * self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x0 <= px <= self.x1 and self.y0 <= py <= self.y1

    def overlaps(self, other: "Rect") -> bool:
        """True if the open interiors intersect (touching edges do not count)."""
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )

    def scaled(self, s: float) -> "Rect":
        return Rect(self.x * s, self.y * s, self.w * s, self.h * s)


@dataclass(frozen=True)
class ObstacleParam:
    """Controlled obstacle: barycenter plus side lengths, in scenario units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ScenarioError("obstacle side lengths must be > 0")

    def rect(self) -> Rect:
        return Rect(self.x, self.y, self.w, self.h)

    def scaled(self, s: float) -> "ObstacleParam":
        return ObstacleParam(self.x * s, self.y * s, self.w * s, self.h * s)


@dataclass(frozen=True)
class DensityBlock:
    """Uniform initial density over a rectangle (density in ped/m^2)."""

    rect: Rect
    density: float

    def scaled(self, s: float, d: float) -> "DensityBlock":
        return DensityBlock(self.rect.scaled(s), self.density * d)


@dataclass(frozen=True)
class ExitSegment:
    id: str
    side: str
    lo: float
    hi: float

    def scaled(self, s: float) -> "ExitSegment":
        return ExitSegment(self.id, self.side, self.lo * s, self.hi * s)


@dataclass(frozen=True)
class EntranceSegment:
    id: str
    side: str
    lo: float
    hi: float
    rate: float      # mass per unit time entering while active
    duration: float  # time the inflow stays on

    def scaled(self, s: float, rate_s: float, dur_s: float) -> "EntranceSegment":
        return EntranceSegment(
            self.id, self.side, self.lo * s, self.hi * s,
            self.rate * rate_s, self.duration * dur_s,
        )


@dataclass(frozen=True)
class Scenario:
    """Immutable description of the walking area and its physical parameters."""

    width: float
    height: float
    nx: int
    ny: int
    scales: CharacteristicScales
    alpha_deg: float
    R: float
    F: float
    exits: tuple
    entrances: tuple = ()
    fixed_obstacles: tuple = ()
    rho0: tuple = ()
    dimensionless: bool = False
    name: str = ""

    @property
    def hx(self) -> float:
        return self.width / self.nx

    @property
    def hy(self) -> float:
        return self.height / self.ny

    @property
    def h(self) -> float:
        return self.hx

    def validate(self) -> "Scenario":
        if self.nx < 3 or self.ny < 3:
            raise ScenarioError("domain.nx and domain.ny must be >= 3")
        if not (self.width > 0 and self.height > 0):
            raise ScenarioError("domain.width and domain.height must be > 0")
        if abs(self.hx - self.hy) > 1e-9 * max(self.hx, self.hy):
            raise ScenarioError(
                "cells must be square: width/nx must equal height/ny "
                f"(got {self.hx:g} vs {self.hy:g})"
            )
        if not 0 < self.alpha_deg <= 360:
            raise ScenarioError("params.alpha_deg must lie in (0, 360]")
        if not self.R > 0:
            raise ScenarioError("params.R must be > 0")
        if self.F < 0:
            raise ScenarioError("params.F must be >= 0")
        if not self.exits:
            raise ScenarioError("at least one exit is required")

        segs = list(self.exits) + list(self.entrances)
        for kind, seg in [("exits", e) for e in self.exits] + [
            ("entrances", e) for e in self.entrances
        ]:
            if seg.side not in SIDES:
                raise ScenarioError(f"{kind}[{seg.id}].side must be one of {SIDES}")
            extent = self.width if seg.side in ("top", "bottom") else self.height
            if not (0 <= seg.lo < seg.hi <= extent + 1e-12):
                raise ScenarioError(
                    f"{kind}[{seg.id}] range [{seg.lo}, {seg.hi}] must lie on the "
                    f"{seg.side} side (length {extent:g})"
                )
        for i, a in enumerate(segs):
            for b in segs[i + 1:]:
                if a.side == b.side and a.lo < b.hi and b.lo < a.hi:
                    raise ScenarioError(
                        f"boundary segments {a.id} and {b.id} overlap on side {a.side}"
                    )
        for e in self.entrances:
            if e.rate < 0:
                raise ScenarioError(f"entrances[{e.id}].rate must be >= 0")
            if e.duration < 0:
                raise ScenarioError(f"entrances[{e.id}].duration must be >= 0")

        for i, ob in enumerate(self.fixed_obstacles):
            if not (0 < ob.x0 and ob.x1 < self.width and 0 < ob.y0 and ob.y1 < self.height):
                raise ScenarioError(f"obstacles[{i}] outside domain (must lie strictly inside)")
            for j, blk in enumerate(self.rho0):
                if blk.density > 0 and ob.overlaps(blk.rect):
                    raise ScenarioError(f"obstacles[{i}] intersects rho0[{j}]")
        for j, blk in enumerate(self.rho0):
            if blk.density < 0:
                raise ScenarioError(f"rho0[{j}].density must be >= 0")
            r = blk.rect
            if not (0 <= r.x0 and r.x1 <= self.width and 0 <= r.y0 and r.y1 <= self.height):
                raise ScenarioError(f"rho0[{j}] outside domain")
        return self


def nondimensionalize(s: Scenario) -> Scenario:
    """Rescale all fields by the characteristic length, speed, and density.

    Lengths divide by L, densities by rho, times scale by V/L; the repulsion
    strength becomes F*rho*L/V and inflow rates are expressed in crowd mass
    (rho*L^2) per dimensionless time.
    """
    if s.dimensionless:
        return s
    L, V, rho = s.scales.L, s.scales.V, s.scales.rho
    inv = 1.0 / L
    rate_s = 1.0 / (rho * L * V)     # (ped/s) -> mass / dimensionless time
    dur_s = V / L
    return replace(
        s,
        width=s.width * inv,
        height=s.height * inv,
        R=s.R * inv,
        F=s.F * rho * L / V,
        exits=tuple(e.scaled(inv) for e in s.exits),
        entrances=tuple(e.scaled(inv, rate_s, dur_s) for e in s.entrances),
        fixed_obstacles=tuple(o.scaled(inv) for o in s.fixed_obstacles),
        rho0=tuple(b.scaled(inv, 1.0 / rho) for b in s.rho0),
        dimensionless=True,
    )


def redimensionalize(s: Scenario) -> Scenario:
    """Inverse of :func:`nondimensionalize`."""
    if not s.dimensionless:
        return s
    L, V, rho = s.scales.L, s.scales.V, s.scales.rho
    rate_s = rho * L * V
    dur_s = L / V
    return replace(
        s,
        width=s.width * L,
        height=s.height * L,
        R=s.R * L,
        F=s.F * V / (rho * L),
        exits=tuple(e.scaled(L) for e in s.exits),
        entrances=tuple(e.scaled(L, rate_s, dur_s) for e in s.entrances),
        fixed_obstacles=tuple(o.scaled(L) for o in s.fixed_obstacles),
        rho0=tuple(b.scaled(L, rho) for b in s.rho0),
        dimensionless=False,
    )


@dataclass
class CellGrid:
    """Rasterized scenario: cell classes, exit/entrance cells, wall adjacency.

    Arrays are indexed [iy, ix] with cell centers at ((ix+0.5)h, (iy+0.5)h);
    iy = 0 is the bottom row. Immutable by convention once built.
    """

    h: float
    nx: int
    ny: int
    cell_class: np.ndarray          # uint8, FREE or OBSTACLE
    exit_id: np.ndarray             # int16, -1 or index into exit_ids
    entrance_id: np.ndarray         # int16, -1 or index into entrance_ids
    exit_ids: tuple
    exit_sides: tuple
    entrance_ids: tuple
    entrance_sides: tuple
    entrance_rates: np.ndarray      # mass per unit time, per entrance
    entrance_durations: np.ndarray
    # faces through which transport is blocked (walls, obstacles; exits stay open)
    blocked_e: np.ndarray = field(default=None, repr=False)
    blocked_w: np.ndarray = field(default=None, repr=False)
    blocked_n: np.ndarray = field(default=None, repr=False)
    blocked_s: np.ndarray = field(default=None, repr=False)

    @property
    def free(self) -> np.ndarray:
        return self.cell_class == FREE

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = (np.arange(self.nx) + 0.5) * self.h
        ys = (np.arange(self.ny) + 0.5) * self.h
        return xs, ys

    def exit_cells(self, k: int) -> np.ndarray:
        """Boolean mask of the cells belonging to exit index k."""
        return self.exit_id == k


def _side_cells(side: str, lo: float, hi: float, nx: int, ny: int, h: float):
    """Indices (iy, ix) of boundary cells whose center lies in [lo, hi] along a side."""
    if side in ("top", "bottom"):
        centers = (np.arange(nx) + 0.5) * h
        sel = np.nonzero((centers >= lo - 1e-12) & (centers <= hi + 1e-12))[0]
        if sel.size == 0:
            sel = np.array([min(nx - 1, max(0, int((0.5 * (lo + hi)) / h)))])
        iy = ny - 1 if side == "top" else 0
        return [(iy, int(ix)) for ix in sel]
    centers = (np.arange(ny) + 0.5) * h
    sel = np.nonzero((centers >= lo - 1e-12) & (centers <= hi + 1e-12))[0]
    if sel.size == 0:
        sel = np.array([min(ny - 1, max(0, int((0.5 * (lo + hi)) / h)))])
    ix = nx - 1 if side == "right" else 0
    return [(int(iy), ix) for iy in sel]


def classify_cells(s: Scenario, lam: Optional[ObstacleParam] = None) -> CellGrid:
    """Rasterize geometry onto the grid; a cell is obstacle iff its center lies
    inside a fixed or controlled obstacle rectangle."""
    if not s.dimensionless:
        raise ScenarioError("classify_cells expects a dimensionless scenario")
    nx, ny, h = s.nx, s.ny, s.h
    xs = (np.arange(nx) + 0.5) * h
    ys = (np.arange(ny) + 0.5) * h
    cx, cy = np.meshgrid(xs, ys)          # (ny, nx)

    cell_class = np.full((ny, nx), FREE, dtype=np.uint8)
    rects = [r for r in s.fixed_obstacles]
    if lam is not None:
        rects.append(lam.rect())
    for r in rects:
        inside = (cx >= r.x0) & (cx <= r.x1) & (cy >= r.y0) & (cy <= r.y1)
        cell_class[inside] = OBSTACLE

    exit_id = np.full((ny, nx), -1, dtype=np.int16)
    for k, e in enumerate(s.exits):
        hit = 0
        for iy, ix in _side_cells(e.side, e.lo, e.hi, nx, ny, h):
            if cell_class[iy, ix] == FREE:
                exit_id[iy, ix] = k
                hit += 1
        if hit == 0 and lam is None:
            raise ScenarioError(f"exit {e.id} is fully blocked by fixed obstacles")

    entrance_id = np.full((ny, nx), -1, dtype=np.int16)
    for k, e in enumerate(s.entrances):
        for iy, ix in _side_cells(e.side, e.lo, e.hi, nx, ny, h):
            if cell_class[iy, ix] == FREE and exit_id[iy, ix] < 0:
                entrance_id[iy, ix] = k

    g = CellGrid(
        h=h, nx=nx, ny=ny,
        cell_class=cell_class,
        exit_id=exit_id,
        entrance_id=entrance_id,
        exit_ids=tuple(e.id for e in s.exits),
        exit_sides=tuple(e.side for e in s.exits),
        entrance_ids=tuple(e.id for e in s.entrances),
        entrance_sides=tuple(e.side for e in s.entrances),
        entrance_rates=np.array([e.rate for e in s.entrances], dtype=float),
        entrance_durations=np.array([e.duration for e in s.entrances], dtype=float),
    )
    _build_face_masks(g)
    return g


def _build_face_masks(g: CellGrid) -> None:
    """Precompute per-cell blocked faces. A face is blocked when it leads into
    an obstacle or through a wall; boundary faces of exit cells on their exit
    side stay open."""
    obst = g.cell_class == OBSTACLE
    ny, nx = obst.shape
    e = np.zeros_like(obst, dtype=bool)
    w = np.zeros_like(e)
    n = np.zeros_like(e)
    so = np.zeros_like(e)
    e[:, :-1] = obst[:, 1:]
    w[:, 1:] = obst[:, :-1]
    n[:-1, :] = obst[1:, :]
    so[1:, :] = obst[:-1, :]
    # domain boundary faces: blocked unless the cell is an exit cell facing out
    side_codes = {sid: i for i, sid in enumerate(SIDES)}
    exit_side_idx = np.array([side_codes[sd] for sd in g.exit_sides], dtype=int) \
        if g.exit_sides else np.zeros(0, dtype=int)

    def _open_on(side: str) -> np.ndarray:
        mask = np.zeros_like(e)
        for k in range(len(g.exit_ids)):
            if g.exit_sides[k] == side:
                mask |= g.exit_id == k
        return mask

    e[:, -1] = ~_open_on("right")[:, -1]
    w[:, 0] = ~_open_on("left")[:, 0]
    n[-1, :] = ~_open_on("top")[-1, :]
    so[0, :] = ~_open_on("bottom")[0, :]
    g.blocked_e, g.blocked_w, g.blocked_n, g.blocked_s = e, w, n, so


def rasterize_rho0(s: Scenario, g: CellGrid) -> np.ndarray:
    """Initial density field; overlapping blocks accumulate."""
    if not s.dimensionless:
        raise ScenarioError("rasterize_rho0 expects a dimensionless scenario")
    xs, ys = g.cell_centers()
    cx, cy = np.meshgrid(xs, ys)
    rho = np.zeros((g.ny, g.nx))
    for blk in s.rho0:
        r = blk.rect
        inside = (cx >= r.x0) & (cx <= r.x1) & (cy >= r.y0) & (cy <= r.y1)
        rho[inside] += blk.density
    rho[g.cell_class == OBSTACLE] = 0.0
    return rho


def admissible(lam: ObstacleParam, s: Scenario) -> bool:
    """Whether the controlled obstacle may be placed: fully inside the domain,
    clear of the initial crowd and fixed obstacles, and leaving at least one
    free cell per exit and entrance segment."""
    s_nd = nondimensionalize(s)
    lam_nd = lam if s.dimensionless else lam.scaled(1.0 / s.scales.L)
    r = lam_nd.rect()
    if not (r.x0 >= 0 and r.x1 <= s_nd.width and r.y0 >= 0 and r.y1 <= s_nd.height):
        return False

    nx, ny, h = s_nd.nx, s_nd.ny, s_nd.h
    xs = (np.arange(nx) + 0.5) * h
    ys = (np.arange(ny) + 0.5) * h
    in_x = (xs >= r.x0) & (xs <= r.x1)
    in_y = (ys >= r.y0) & (ys <= r.y1)
    lam_cells = np.outer(in_y, in_x)     # (ny, nx)

    base = classify_cells(s_nd)
    if np.any(lam_cells & (base.cell_class == OBSTACLE)):
        return False
    rho = rasterize_rho0(s_nd, base)
    if np.any(lam_cells & (rho > 0)):
        return False
    for k in range(len(base.exit_ids)):
        cells = base.exit_id == k
        if not np.any(cells & ~lam_cells):
            return False
    for k in range(len(base.entrance_ids)):
        cells = base.entrance_id == k
        if np.any(cells) and not np.any(cells & ~lam_cells):
            return False
    return True


# ---------------------------------------------------------------------------
# file loading

def _need(d: dict, key: str, ctx: str):
    if key not in d:
        raise ScenarioError(f"missing field {ctx}.{key}")
    return d[key]


def _rect_from(d: dict, ctx: str) -> Rect:
    return Rect(
        float(_need(d, "x", ctx)), float(_need(d, "y", ctx)),
        float(_need(d, "w", ctx)), float(_need(d, "h", ctx)),
    )


def scenario_from_dict(doc: dict, name: str = "") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    dom = _need(doc, "domain", "scenario")
    sca = doc.get("scales", {}) or {}
    par = _need(doc, "params", "scenario")
    exits = []
    for i, e in enumerate(_need(doc, "exits", "scenario") or []):
        ctx = f"exits[{i}]"
        exits.append(ExitSegment(
            str(_need(e, "id", ctx)), str(_need(e, "side", ctx)),
            float(_need(e, "from", ctx)), float(_need(e, "to", ctx)),
        ))
    entrances = []
    for i, e in enumerate(doc.get("entrances") or []):
        ctx = f"entrances[{i}]"
        entrances.append(EntranceSegment(
            str(_need(e, "id", ctx)), str(_need(e, "side", ctx)),
            float(_need(e, "from", ctx)), float(_need(e, "to", ctx)),
            float(_need(e, "rate", ctx)), float(_need(e, "duration", ctx)),
        ))
    obstacles = [_rect_from(o, f"obstacles[{i}]") for i, o in enumerate(doc.get("obstacles") or [])]
    rho0 = []
    for i, b in enumerate(doc.get("rho0") or []):
        ctx = f"rho0[{i}]"
        rho0.append(DensityBlock(_rect_from(b, ctx), float(_need(b, "density", ctx))))

    s = Scenario(
        width=float(_need(dom, "width", "domain")),
        height=float(_need(dom, "height", "domain")),
        nx=int(_need(dom, "nx", "domain")),
        ny=int(_need(dom, "ny", "domain")),
        scales=CharacteristicScales(
            L=float(sca.get("L", 1.0)), V=float(sca.get("V", 1.0)),
            rho=float(sca.get("rho", 1.0)),
        ),
        alpha_deg=float(_need(par, "alpha_deg", "params")),
        R=float(_need(par, "R", "params")),
        F=float(_need(par, "F", "params")),
        exits=tuple(exits),
        entrances=tuple(entrances),
        fixed_obstacles=tuple(obstacles),
        rho0=tuple(rho0),
        name=name or str(doc.get("name", "")),
    )
    return s.validate()


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file (YAML key/value + lists)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse scenario file {path}: {exc}")
    return scenario_from_dict(doc, name=str(doc.get("name", "")) if isinstance(doc, dict) else "")


def scenario_digest(s: Scenario) -> str:
    """Stable short hash of the scenario content, for output provenance."""
    def enc(obj):
        if isinstance(obj, (Scenario, CharacteristicScales, Rect, DensityBlock,
                            ExitSegment, EntranceSegment, ObstacleParam)):
            return {f.name: enc(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [enc(v) for v in obj]
        return obj
    blob = json.dumps(enc(s), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
