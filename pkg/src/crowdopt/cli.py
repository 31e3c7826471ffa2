"""Command-line front end: run simulations and obstacle searches from scenario
files, emitting metrics tables, density snapshots, and cost landscapes as
plot-ready CSV.

Exit codes: 0 ok, 2 input error, 3 infeasible search, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .behaviors import BehaviorSpec, Metrics, SimulationError, simulate
from .optimize import (
    AnnealSpec,
    CostSpec,
    InfeasibleSearchError,
    compass_search,
    evaluate_cost,
    exhaustive_search,
)
from .scenario import ObstacleParam, Scenario, ScenarioError, load_scenario, scenario_digest
from .transport import TransportError

_BEHAVIORS = ("basic", "rational", "theta", "hr")


def _spec_from_args(args, role="behavior") -> BehaviorSpec:
    kind = getattr(args, role)
    return BehaviorSpec(
        kind=kind,
        theta=args.theta,
        replan_every=args.replan_every,
        fp_tol=args.fp_tol,
        fp_max_iter=args.fp_max_iter,
        fp_damping=args.fp_damping,
        T_max=args.tmax,
        slice_dt=args.slice_dt,
        t_abort=args.t_abort,
    )


def _ledger(spec: BehaviorSpec, s: Scenario, seed=None) -> str:
    items = [f"crowdopt={__version__}", f"scenario={scenario_digest(s)}"]
    if seed is not None:
        items.append(f"seed={seed}")
    for k, v in asdict(spec).items():
        items.append(f"{k}={v}")
    return " ".join(items)


def _metrics_row(m: Metrics) -> list:
    return [m.behavior, f"{m.t_evac:.9g}", f"{m.rho_max:.9g}", str(m.used_exits),
            str(int(m.aborted)), str(int(m.fp_converged))] + \
           [f"{p:.9g}" for p in m.P_e]


def _write_metrics_csv(path: Path, header_line: str, rows: list, exit_ids) -> None:
    cols = ["behavior", "t_evac_s", "rho_max", "used_exits", "aborted",
            "fp_converged"] + [f"P_{e}" for e in exit_ids]
    with path.open("w", encoding="utf-8") as f:
        f.write(f"# {header_line}\n")
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(r) + "\n")


class _SnapshotWriter:
    """Writes rho_%06d.grid files: first line "nx ny h t", then ny rows of nx
    densities (row iy=0 first), 9 significant digits."""

    def __init__(self, out: Path, every: int, h: float, header_line: str):
        self.out = out
        self.every = max(1, every)
        self.h = h
        self.header_line = header_line
        self.written = []

    def __call__(self, step: int, t: float, rho: np.ndarray) -> None:
        if step % self.every:
            return
        path = self.out / f"rho_{step:06d}.grid"
        ny, nx = rho.shape
        with path.open("w", encoding="utf-8") as f:
            f.write(f"{nx} {ny} {self.h:.9g} {t:.9g}\n")
            f.write(f"# {self.header_line}\n")
            for iy in range(ny):
                f.write(" ".join(f"{v:.9g}" for v in rho[iy]) + "\n")
        self.written.append((step, t, path))


def read_snapshot(path) -> tuple:
    """Parse a snapshot file back into (t, h, rho)."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().split()
        nx, ny, h, t = int(first[0]), int(first[1]), float(first[2]), float(first[3])
        rows = []
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(v) for v in line.split()])
    rho = np.asarray(rows)
    if rho.shape != (ny, nx):
        raise ValueError(f"snapshot {path} has shape {rho.shape}, expected {(ny, nx)}")
    return t, h, rho


def _parse_lambda(text: str) -> ObstacleParam:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
        return ObstacleParam(x, y, w, h)
    except (ValueError, ScenarioError) as exc:
        raise ScenarioError(f"bad --lambda0 value {text!r}: expected x,y,w,h") from exc


def cmd_simulate(args) -> int:
    s = load_scenario(args.scenario)
    spec = _spec_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _ledger(spec, s, args.seed)
    snap = _SnapshotWriter(out, args.snapshot_every, s.width / s.nx, header)
    m = simulate(s, spec, snapshot_cb=snap)
    _write_metrics_csv(out / "metrics.csv", header, [_metrics_row(m)], m.exit_ids)
    with (out / "mass_history.csv").open("w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        f.write("t_s,mass_ped\n")
        for t, mm in zip(m.mass_t, m.mass_series):
            f.write(f"{t:.12g},{mm:.12g}\n")
    print(f"behavior={m.behavior} t_evac={m.t_evac:.2f}s rho_max={m.rho_max:.3f} "
          f"used_exits={m.used_exits} aborted={m.aborted}")
    return 0


def cmd_compare(args) -> int:
    s = load_scenario(args.scenario)
    nat_spec = _spec_from_args(args, "behavior")
    tgt_spec = _spec_from_args(args, "target")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m_nat = simulate(s, nat_spec)
    m_tgt = simulate(s, tgt_spec)
    header = _ledger(nat_spec, s, args.seed)
    _write_metrics_csv(out / "compare.csv", header,
                       [_metrics_row(m_nat), _metrics_row(m_tgt)], m_nat.exit_ids)
    deltas = {k: evaluate_cost(CostSpec(k, m_tgt), m_nat)
              for k in ("delta1", "delta2", "delta3")}
    with (out / "deltas.csv").open("w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        f.write("delta1,delta2,delta3\n")
        f.write(f"{deltas['delta1']:.9g},{deltas['delta2']:.9g},{deltas['delta3']:.9g}\n")
    print(f"natural: t_evac={m_nat.t_evac:.2f}s used={m_nat.used_exits} "
          f"rho_max={m_nat.rho_max:.3f}")
    print(f"target:  t_evac={m_tgt.t_evac:.2f}s used={m_tgt.used_exits} "
          f"rho_max={m_tgt.rho_max:.3f}")
    print(" ".join(f"{k}={v:.4g}" for k, v in deltas.items()))
    return 0


def _best_json(path: Path, res, spec: CostSpec, header: str, extra: dict) -> None:
    doc = {
        "lambda_star": None if res.lambda_star is None else {
            "x": res.lambda_star.x, "y": res.lambda_star.y,
            "w": res.lambda_star.w, "h": res.lambda_star.h,
        },
        "delta_star": res.delta_star,
        "uncontrolled_delta": res.uncontrolled_delta,
        "cost": spec.kind,
        "target_t_evac": spec.target.t_evac,
        "target_rho_max": spec.target.rho_max,
        "provenance": header,
    }
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_optimize(args) -> int:
    s = load_scenario(args.scenario)
    nat_spec = _spec_from_args(args, "behavior")
    tgt_spec = _spec_from_args(args, "target")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = simulate(s, tgt_spec)
    spec = CostSpec(args.cost, target)
    header = _ledger(nat_spec, s, args.seed)

    if args.command == "optimize-exhaustive":
        res = exhaustive_search(
            s, (args.obstacle_w, args.obstacle_h), spec, nat_spec,
            stride=args.stride, jobs=args.jobs,
            progress=(lambda i, n: print(f"\r{i}/{n}", end="", file=sys.stderr))
            if args.progress else None,
        )
        if args.progress:
            print(file=sys.stderr)
        with (out / "delta_map.csv").open("w", encoding="utf-8") as f:
            f.write(f"# {header}\n")
            f.write("x_O,y_O,delta,admissible\n")
            for iy, y in enumerate(res.delta_map_y):
                for ix, x in enumerate(res.delta_map_x):
                    f.write(f"{x:.9g},{y:.9g},{res.delta_map[iy, ix]:.9g},"
                            f"{int(res.delta_map_admissible[iy, ix])}\n")
        _best_json(out / "best.json", res, spec, header,
                   {"method": "exhaustive", "stride": args.stride,
                    "shape_w": args.obstacle_w, "shape_h": args.obstacle_h})
    else:
        lam0 = _parse_lambda(args.lambda0)
        anneal = AnnealSpec(enabled=args.anneal, T0=args.t0,
                            cooling=args.cooling, rng_seed=args.seed)
        res = compass_search(s, lam0, spec, nat_spec, anneal=anneal,
                             max_steps=args.max_steps,
                             stall_limit=args.stall_limit)
        with (out / "evaluations.csv").open("w", encoding="utf-8") as f:
            f.write(f"# {header} anneal={int(anneal.enabled)} "
                    f"cooling={anneal.cooling} seed={anneal.rng_seed}\n")
            f.write("step,rule,p,x_O,y_O,w,h_side,delta,accepted\n")
            for r in res.evaluations:
                d = "nan" if math.isnan(r.delta) else f"{r.delta:.9g}"
                f.write(f"{r.step},{r.rule},{r.p},{r.lam.x:.9g},{r.lam.y:.9g},"
                        f"{r.lam.w:.9g},{r.lam.h:.9g},{d},{int(r.accepted)}\n")
        _best_json(out / "best.json", res, spec, header,
                   {"method": "compass", "max_steps": args.max_steps,
                    "anneal": anneal.enabled, "seed": anneal.rng_seed})
    lam = res.lambda_star
    print(f"best: x={lam.x:.3g} y={lam.y:.3g} w={lam.w:.3g} h={lam.h:.3g} "
          f"delta={res.delta_star:.4g} (uncontrolled {res.uncontrolled_delta:.4g})")
    return 0


def _add_behavior_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=float, default=0.0,
                   help="prediction window for --behavior theta (dimensionless time)")
    p.add_argument("--replan-every", type=int, default=None,
                   help="transport steps between re-solves (rational/theta)")
    p.add_argument("--fp-tol", type=float, default=1e-3)
    p.add_argument("--fp-max-iter", type=int, default=50)
    p.add_argument("--fp-damping", type=float, default=0.5)
    p.add_argument("--tmax", type=float, default=None,
                   help="time-space horizon (dimensionless)")
    p.add_argument("--slice-dt", type=float, default=None)
    p.add_argument("--t-abort", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="crowdopt",
        description="Macroscopic crowd evacuation with tunable rationality "
                    "and obstacle-placement optimization.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one behavior on a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--behavior", choices=_BEHAVIORS, default="basic")
    p.add_argument("--snapshot-every", type=int, default=100,
                   help="steps between density snapshots")
    _add_behavior_flags(p)

    p = sub.add_parser("compare", help="natural vs target behavior on one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--behavior", choices=_BEHAVIORS, default="basic",
                   help="natural behavior")
    p.add_argument("--target", choices=_BEHAVIORS, default="rational")
    _add_behavior_flags(p)

    for name, hlp in (("optimize-exhaustive", "cost over every admissible barycenter"),
                      ("optimize-compass", "randomized compass descent")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--scenario", required=True)
        p.add_argument("--behavior", choices=_BEHAVIORS, default="basic",
                       help="natural behavior")
        p.add_argument("--target", choices=_BEHAVIORS, default="rational")
        p.add_argument("--cost", choices=("d1", "d2", "d3"), default="d1")
        _add_behavior_flags(p)
        if name == "optimize-exhaustive":
            p.add_argument("--obstacle-w", type=float, required=True)
            p.add_argument("--obstacle-h", type=float, required=True)
            p.add_argument("--stride", type=int, default=1,
                           help="evaluate every n-th barycenter per axis")
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--progress", action="store_true")
        else:
            p.add_argument("--lambda0", required=True, metavar="x,y,w,h")
            p.add_argument("--max-steps", type=int, default=200)
            p.add_argument("--stall-limit", type=int, default=200)
            p.add_argument("--anneal", action="store_true")
            p.add_argument("--t0", type=float, default=None,
                           help="initial annealing temperature")
            p.add_argument("--cooling", type=float, default=0.95)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_optimize(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TransportError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
