"""Simulation drivers for each rationality level, plus evacuation metrics.

basic plans once on the empty-room minimum time; rational replans against the
frozen current density; highly_rational solves the fully coupled
forward-backward system by a damped fixed point on density trajectories;
theta does the same on a sliding prediction window of length theta.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .interaction import InteractionParams, interaction_velocity
from .pathplan import (
    ControlSet,
    feedback_indices,
    solve_drift_hjb,
    solve_eikonal,
    solve_timespace_hjb,
    velocity_from_indices,
)
from .scenario import (
    CellGrid,
    ObstacleParam,
    Scenario,
    admissible,
    classify_cells,
    nondimensionalize,
    rasterize_rho0,
)
from .transport import (
    ExitLedger,
    cfl_dt,
    inject_inflow,
    mass,
    project_velocity,
    step_density,
)

log = logging.getLogger(__name__)

KINDS = ("basic", "rational", "theta", "highly_rational")
_ALIASES = {"hr": "highly_rational", "highly-rational": "highly_rational"}


class SimulationError(RuntimeError):
    """Fatal condition while running a simulation."""


@dataclass
class BehaviorSpec:
    """Which rationality level to simulate, plus solver controls."""

    kind: str = "basic"
    theta: float = 0.0              # prediction window, dimensionless time
    replan_every: Optional[int] = None   # transport steps between re-solves
    fp_max_iter: int = 50
    fp_tol: float = 1e-3            # L1 residual, mass-normalized
    fp_damping: float = 0.5
    T_max: Optional[float] = None   # time-space horizon; default 3x max phi
    slice_dt: Optional[float] = None  # slice step of the time-space grid
    cfl: float = 0.45
    tol_hjb: float = 1e-6
    max_passes: int = 500
    eps_evac: float = 0.01
    used_exit_frac: float = 0.01
    t_abort: Optional[float] = None  # default 5x T_max
    rho_cap: float = 4.0
    controls_m: int = 32

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.replan_every is not None and self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        if not 0 < self.fp_damping <= 1:
            raise ValueError("fp_damping must lie in (0, 1]")
        if self.fp_max_iter < 1:
            raise ValueError("fp_max_iter must be >= 1")

    @property
    def replan_steps(self) -> int:
        if self.replan_every is not None:
            return self.replan_every
        return 5 if self.kind == "theta" else 1


@dataclass
class RunHistory:
    """Raw record of one run, all in dimensionless units."""

    t: np.ndarray
    mass_series: np.ndarray
    rho_max: float
    ledger: ExitLedger
    inflow_end: float
    t_abort: float
    aborted: bool
    fp_converged: bool = True


@dataclass
class Metrics:
    """Evacuation outcome. Dimensional when produced by :func:`simulate`."""

    t_evac: float
    rho_max: float
    used_exits: int
    P_e: np.ndarray
    exit_ids: tuple
    mass_t: np.ndarray
    mass_series: np.ndarray
    peak_mass: float
    total_mass: float
    aborted: bool = False
    fp_converged: bool = True
    behavior: str = ""


def compute_metrics(hist: RunHistory, eps_evac: float = 0.01,
                    used_exit_frac: float = 0.01) -> Metrics:
    """Evacuation time (first threshold crossing), peak density, per-exit
    counts, and the number of exits that carried a meaningful share."""
    peak = float(hist.mass_series.max()) if hist.mass_series.size else 0.0
    total = hist.ledger.initial + hist.ledger.injected
    threshold = eps_evac * peak
    eligible = hist.t >= hist.inflow_end
    crossed = eligible & (hist.mass_series <= threshold)
    if peak == 0:
        t_evac = 0.0
        aborted = False
    elif hist.aborted or not crossed.any():
        t_evac = hist.t_abort
        aborted = True
    else:
        t_evac = float(hist.t[np.argmax(crossed)])
        aborted = False
    P = hist.ledger.outflow.copy()
    used = int(np.count_nonzero(P >= used_exit_frac * total)) if total > 0 else 0
    return Metrics(
        t_evac=t_evac, rho_max=hist.rho_max, used_exits=used,
        P_e=P, exit_ids=hist.ledger.exit_ids,
        mass_t=hist.t.copy(), mass_series=hist.mass_series.copy(),
        peak_mass=peak, total_mass=total,
        aborted=aborted, fp_converged=hist.fp_converged,
    )


def _to_dimensional(m: Metrics, s: Scenario) -> Metrics:
    L, V, rho = s.scales.L, s.scales.V, s.scales.rho
    ts = L / V
    ms = rho * L * L
    return Metrics(
        t_evac=m.t_evac * ts, rho_max=m.rho_max * rho, used_exits=m.used_exits,
        P_e=m.P_e * ms, exit_ids=m.exit_ids,
        mass_t=m.mass_t * ts, mass_series=m.mass_series * ms,
        peak_mass=m.peak_mass * ms, total_mass=m.total_mass * ms,
        aborted=m.aborted, fp_converged=m.fp_converged, behavior=m.behavior,
    )


class _Engine:
    """Shared stepping loop: interaction, projection, transport, inflow."""

    def __init__(self, s: Scenario, g: CellGrid, spec: BehaviorSpec,
                 snapshot_cb: Optional[Callable] = None, t0: float = 0.0):
        self.s = s
        self.g = g
        self.spec = spec
        self.p = InteractionParams.from_scenario(s, g)
        self.rho = rasterize_rho0(s, g)
        self.ledger = ExitLedger(g.exit_ids)
        self.ledger.initial = mass(self.rho, g.h)
        self.t = t0
        self.step = 0
        self.hist_t = [t0]
        self.hist_m = [self.ledger.initial]
        self.rho_max = float(self.rho.max())
        self.peak = self.ledger.initial
        self.snapshot_cb = snapshot_cb
        self.inflow_end = float(g.entrance_durations.max()) if len(g.entrance_ids) else 0.0
        if snapshot_cb is not None:
            snapshot_cb(0, self.t, self.rho)

    @property
    def current_mass(self) -> float:
        return mass(self.rho, self.g.h)

    def evacuated(self) -> bool:
        if self.peak <= 0:
            return self.t >= self.inflow_end
        return (self.t >= self.inflow_end
                and self.hist_m[-1] <= self.spec.eps_evac * self.peak)

    def advance(self, plan_v: np.ndarray, t_limit: float = np.inf,
                max_steps: int = 1) -> None:
        """Run up to max_steps transport steps with a frozen behavioral field,
        never stepping past t_limit."""
        for _ in range(max_steps):
            if self.evacuated() or self.t >= t_limit - 1e-14:
                return
            vi = interaction_velocity(self.rho, plan_v, self.p, self.g)
            v = project_velocity(plan_v + vi, self.g)
            dt = cfl_dt(v, self.g.h, self.spec.cfl)
            dt = min(dt, t_limit - self.t)
            self.rho = step_density(self.rho, v, dt, self.g, self.ledger)
            self.rho = inject_inflow(self.rho, self.g, self.t, dt, self.ledger,
                                     self.spec.rho_cap)
            self.t += dt
            self.step += 1
            m = self.current_mass
            self.hist_t.append(self.t)
            self.hist_m.append(m)
            self.peak = max(self.peak, m)
            self.rho_max = max(self.rho_max, float(self.rho.max()))
            if self.snapshot_cb is not None:
                self.snapshot_cb(self.step, self.t, self.rho)

    def history(self, t_abort: float, aborted: bool,
                fp_converged: bool = True) -> RunHistory:
        return RunHistory(
            t=np.asarray(self.hist_t), mass_series=np.asarray(self.hist_m),
            rho_max=self.rho_max, ledger=self.ledger,
            inflow_end=self.inflow_end, t_abort=t_abort, aborted=aborted,
            fp_converged=fp_converged,
        )


def _horizons(spec: BehaviorSpec, g: CellGrid, phi: np.ndarray):
    finite = phi[np.isfinite(phi) & g.free]
    phimax = float(finite.max()) if finite.size else 1.0
    T_max = spec.T_max if spec.T_max is not None else 3.0 * phimax
    extra = float(g.entrance_durations.max()) if len(g.entrance_ids) else 0.0
    T_max = max(T_max, extra + phimax)
    t_abort = spec.t_abort if spec.t_abort is not None else 5.0 * T_max
    slice_dt = spec.slice_dt if spec.slice_dt is not None else 2.0 * g.h
    return T_max, t_abort, slice_dt


def _check_reachable(phi: np.ndarray, g: CellGrid) -> None:
    interior = g.free & (g.exit_id < 0)
    if interior.any() and not np.isfinite(phi[interior]).any():
        raise SimulationError("no free cell can reach an exit")


def _basic_plan(g: CellGrid, spec: BehaviorSpec, controls: ControlSet):
    phi = solve_eikonal(g, controls=controls, tol=spec.tol_hjb,
                        max_passes=spec.max_passes)
    _check_reachable(phi, g)
    idx = feedback_indices(phi, g, controls=controls)
    return phi, idx, velocity_from_indices(idx, g, controls)


def run_basic(s: Scenario, g: CellGrid, spec: BehaviorSpec,
              snapshot_cb: Optional[Callable] = None) -> RunHistory:
    """Plan once on the empty domain; the behavioral field never changes."""
    controls = ControlSet(spec.controls_m)
    phi, _, plan_v = _basic_plan(g, spec, controls)
    _, t_abort, _ = _horizons(spec, g, phi)
    eng = _Engine(s, g, spec, snapshot_cb)
    while not eng.evacuated() and eng.t < t_abort:
        eng.advance(plan_v, t_limit=t_abort, max_steps=1024)
    return eng.history(t_abort, aborted=not eng.evacuated())


def run_rational(s: Scenario, g: CellGrid, spec: BehaviorSpec,
                 snapshot_cb: Optional[Callable] = None) -> RunHistory:
    """Re-solve the frozen-drift minimum-time problem every replan interval."""
    controls = ControlSet(spec.controls_m)
    phi_e, _, orient_v = _basic_plan(g, spec, controls)
    _, t_abort, _ = _horizons(spec, g, phi_e)
    eng = _Engine(s, g, spec, snapshot_cb)
    while not eng.evacuated() and eng.t < t_abort:
        drift = project_velocity(
            interaction_velocity(eng.rho, orient_v, eng.p, g), g)
        phi = solve_drift_hjb(g, drift, controls=controls, tol=spec.tol_hjb,
                              max_passes=spec.max_passes)
        idx = feedback_indices(phi, g, drift, controls=controls)
        plan_v = velocity_from_indices(idx, g, controls)
        orient_v = plan_v
        eng.advance(plan_v, t_limit=t_abort, max_steps=spec.replan_steps)
    return eng.history(t_abort, aborted=not eng.evacuated())


def _forward_with_slices(s: Scenario, g: CellGrid, spec: BehaviorSpec,
                         dir_slices: np.ndarray, slice_dt: float,
                         fallback_v: np.ndarray, t_abort: float,
                         controls: ControlSet,
                         rho_start: Optional[np.ndarray] = None,
                         record_slices: bool = True,
                         snapshot_cb: Optional[Callable] = None,
                         t0: float = 0.0):
    """Execute per-slice behavioral plans; past the last slice fall back to the
    static plan. Returns (slice densities, engine)."""
    K = dir_slices.shape[0]
    eng = _Engine(s, g, spec, snapshot_cb, t0=t0)
    if rho_start is not None:
        eng.rho = rho_start.copy()
        eng.ledger.initial = mass(eng.rho, g.h)
        eng.hist_m[-1] = eng.ledger.initial
        eng.peak = eng.ledger.initial
        eng.rho_max = float(eng.rho.max())
    traj = np.empty((K + 1, g.ny, g.nx)) if record_slices else None
    if record_slices:
        traj[0] = eng.rho
    for k in range(K):
        plan_v = velocity_from_indices(dir_slices[k], g, controls)
        t_next = t0 + (k + 1) * slice_dt
        while not eng.evacuated() and eng.t < t_next - 1e-14:
            eng.advance(plan_v, t_limit=t_next, max_steps=1024)
        if record_slices:
            traj[k + 1] = eng.rho
        if eng.evacuated():
            if record_slices and k + 2 <= K:
                traj[k + 2:] = eng.rho
            break
    while not eng.evacuated() and eng.t < t_abort:
        eng.advance(fallback_v, t_limit=t_abort, max_steps=1024)
    return traj, eng


def run_highly_rational(s: Scenario, g: CellGrid, spec: BehaviorSpec,
                        snapshot_cb: Optional[Callable] = None) -> RunHistory:
    """Damped fixed point on density trajectories: backward time-space solve,
    forward transport, repeat until the trajectory stops moving."""
    controls = ControlSet(spec.controls_m)
    phi_e, idx_e, basic_v = _basic_plan(g, spec, controls)
    T_max, t_abort, slice_dt = _horizons(spec, g, phi_e)
    p = InteractionParams.from_scenario(s, g)

    # probe run under the static plan; when the default horizon does not cover
    # its evacuation, stretch it so the terminal fallback stays out of play
    probe = run_basic(s, g, spec)
    if spec.T_max is None and not probe.aborted:
        T_max = min(max(T_max, 1.2 * float(probe.t[-1])), 0.98 * t_abort)
    K = max(1, min(int(math.ceil(T_max / slice_dt)), 800))

    # initial trajectory: the basic run sampled on the slice grid
    base_slices = np.repeat(idx_e[None, :, :], K, axis=0)
    rho_traj, eng0 = _forward_with_slices(
        s, g, spec, base_slices, slice_dt, basic_v, t_abort, controls)
    m_ref = max(eng0.peak, 1e-300)

    best_hist = eng0.history(t_abort, aborted=not eng0.evacuated(),
                             fp_converged=False)
    best_resid = np.inf
    h2 = g.h * g.h
    orient = basic_v  # refined to the previous iterate's plans below
    for _ in range(spec.fp_max_iter):
        tsv = solve_timespace_hjb(g, rho_traj, slice_dt, p, vb_orient=orient,
                                  terminal_phi=phi_e, controls=controls)
        orient = np.stack([velocity_from_indices(tsv.dir_idx[k], g, controls)
                           for k in range(K)])
        rho_hat, eng = _forward_with_slices(
            s, g, spec, tsv.dir_idx, slice_dt, basic_v, t_abort, controls,
            snapshot_cb=None)
        resid = float(np.abs(rho_hat - rho_traj).sum(axis=(1, 2)).max()) * h2 / m_ref
        hist = eng.history(t_abort, aborted=not eng.evacuated())
        if resid < best_resid:
            best_resid = resid
            best_hist = hist
        if resid < spec.fp_tol:
            hist.fp_converged = True
            if snapshot_cb is not None:
                _forward_with_slices(s, g, spec, tsv.dir_idx, slice_dt, basic_v,
                                     t_abort, controls, record_slices=False,
                                     snapshot_cb=snapshot_cb)
            return hist
        rho_traj = (1.0 - spec.fp_damping) * rho_traj + spec.fp_damping * rho_hat
    log.warning("fixed point did not converge in %d iterations (residual %.3g)",
                spec.fp_max_iter, best_resid)
    best_hist.fp_converged = False
    return best_hist


def run_theta_rational(s: Scenario, g: CellGrid, spec: BehaviorSpec,
                       snapshot_cb: Optional[Callable] = None) -> RunHistory:
    """Sliding-window prediction: at each replan time, solve the coupled
    system on [tau, tau+theta] with the density prolonged as constant beyond
    the window, take the plan at tau, advance the true crowd, repeat."""
    if spec.theta == 0:
        # empty window: the auxiliary density is the frozen current one, which
        # is exactly the rational construction
        return run_rational(s, g, spec, snapshot_cb)
    controls = ControlSet(spec.controls_m)
    phi_e, _, basic_v = _basic_plan(g, spec, controls)
    T_tail, t_abort, slice_dt = _horizons(spec, g, phi_e)
    Kw = max(1, int(math.ceil(spec.theta / slice_dt)))
    Kfull = Kw + max(1, int(math.ceil(T_tail / slice_dt)))
    p = InteractionParams.from_scenario(s, g)

    eng = _Engine(s, g, spec, snapshot_cb)
    orient_v = basic_v
    m_ref = max(eng.peak, 1e-300)
    h2 = g.h * g.h
    while not eng.evacuated() and eng.t < t_abort:
        rho_aux = np.repeat(eng.rho[None, :, :], Kfull + 1, axis=0)
        plan0 = None
        orient = orient_v
        for _ in range(spec.fp_max_iter):
            tsv = solve_timespace_hjb(g, rho_aux, slice_dt, p,
                                      vb_orient=orient, terminal_phi=phi_e,
                                      controls=controls)
            orient = np.stack([velocity_from_indices(tsv.dir_idx[k], g, controls)
                               for k in range(Kfull)])
            window, weng = _forward_with_slices(
                s, g, spec, tsv.dir_idx[:Kw], slice_dt, basic_v,
                t_abort=eng.t + Kw * slice_dt, controls=controls,
                rho_start=eng.rho, t0=eng.t)
            m_ref = max(m_ref, weng.peak)
            resid = float(np.abs(window - rho_aux[:Kw + 1]).sum(axis=(1, 2)).max()) * h2 / m_ref
            plan0 = velocity_from_indices(tsv.dir_idx[0], g, controls)
            if resid < spec.fp_tol:
                break
            new = rho_aux.copy()
            new[:Kw + 1] = (1 - spec.fp_damping) * rho_aux[:Kw + 1] + spec.fp_damping * window
            new[Kw + 1:] = new[Kw]
            rho_aux = new
        orient_v = plan0
        eng.advance(plan0, t_limit=t_abort, max_steps=spec.replan_steps)
    return eng.history(t_abort, aborted=not eng.evacuated())


_RUNNERS = {
    "basic": run_basic,
    "rational": run_rational,
    "theta": run_theta_rational,
    "highly_rational": run_highly_rational,
}


def simulate(s: Scenario, spec: BehaviorSpec,
             lam: Optional[ObstacleParam] = None,
             snapshot_cb: Optional[Callable] = None) -> Metrics:
    """Run one behavior on a scenario, optionally with a controlled obstacle.

    The scenario may be dimensional or dimensionless; metrics come back in
    physical units (s, ped/m^2, ped). snapshot_cb, when given, receives
    (step, t, rho) in physical units at every transport step.
    """
    if lam is not None and not admissible(lam, s):
        raise SimulationError("controlled obstacle placement is not admissible")
    s_nd = nondimensionalize(s)
    lam_nd = None
    if lam is not None:
        lam_nd = lam if s.dimensionless else lam.scaled(1.0 / s.scales.L)
    g = classify_cells(s_nd, lam_nd)

    kind = spec.kind
    if s_nd.F == 0 and kind in ("rational", "theta"):
        # the interaction term vanishes identically, so replanning can never
        # change the plan: every level collapses onto the basic one
        kind = "basic"

    cb = None
    if snapshot_cb is not None:
        L, V, rho_s = s.scales.L, s.scales.V, s.scales.rho

        def cb(step, t, rho):
            snapshot_cb(step, t * L / V, rho * rho_s)

    hist = _RUNNERS[kind](s_nd, g, spec, cb)
    m = compute_metrics(hist, spec.eps_evac, spec.used_exit_frac)
    m.behavior = spec.kind if spec.kind != "theta" else f"theta={spec.theta:g}"
    return _to_dimensional(m, s)
