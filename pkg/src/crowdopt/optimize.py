"""Environmental cost evaluation and derivative-free obstacle placement search.

The cost compares the natural behavior in the controlled environment against a
precomputed target behavior: evacuation-time gap (delta1), exit-usage gap
(delta2, Euclidean norm over the per-exit counts), or peak-density gap
(delta3). Search is exhaustive over grid-node barycenters for a fixed shape,
or a randomized compass walk over position and side lengths, optionally with
simulated annealing.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .behaviors import BehaviorSpec, Metrics, simulate
from .scenario import ObstacleParam, Scenario, admissible, nondimensionalize

log = logging.getLogger(__name__)

COST_KINDS = ("delta1", "delta2", "delta3")
_COST_ALIASES = {"d1": "delta1", "d2": "delta2", "d3": "delta3"}

STALL_LIMIT = 200


class InfeasibleSearchError(RuntimeError):
    """No admissible obstacle placement exists."""


@dataclass
class CostSpec:
    kind: str
    target: Metrics

    def __post_init__(self):
        self.kind = _COST_ALIASES.get(self.kind, self.kind)
        if self.kind not in COST_KINDS:
            raise ValueError(f"cost kind must be one of {COST_KINDS}")
        if self.target is None:
            raise ValueError("target metrics must be computed before searching")


def evaluate_cost(spec: CostSpec, controlled: Metrics) -> float:
    """Distance between the controlled-natural and target metrics."""
    t = spec.target
    if spec.kind == "delta1":
        return abs(controlled.t_evac - t.t_evac)
    if spec.kind == "delta2":
        return float(np.linalg.norm(controlled.P_e - t.P_e))
    return abs(controlled.rho_max - t.rho_max)


@dataclass
class AnnealSpec:
    """Simulated-annealing acceptance of uphill moves, geometric cooling."""

    enabled: bool = False
    T0: Optional[float] = None     # default 0.1 * cost at the initial guess
    cooling: float = 0.95
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.cooling < 1:
            raise ValueError("cooling must lie in (0, 1)")
        if self.T0 is not None and self.T0 < 0:
            raise ValueError("T0 must be >= 0")


@dataclass
class EvalRecord:
    step: int
    rule: int          # 0 for exhaustive candidates
    p: int
    lam: ObstacleParam
    delta: float       # nan if the candidate was inadmissible
    accepted: bool
    admissible: bool


@dataclass
class SearchResult:
    lambda_star: Optional[ObstacleParam]
    delta_star: float
    evaluations: list
    uncontrolled_delta: float
    delta_map: Optional[np.ndarray] = None          # (ny_c, nx_c)
    delta_map_admissible: Optional[np.ndarray] = None
    delta_map_x: Optional[np.ndarray] = None
    delta_map_y: Optional[np.ndarray] = None


def _default_evaluator(s: Scenario, natural: BehaviorSpec,
                       lam: Optional[ObstacleParam]) -> Metrics:
    return simulate(s, natural, lam)


def _quantize(lam: ObstacleParam, h: float) -> tuple:
    return (round(lam.x / h), round(lam.y / h),
            round(lam.w / h), round(lam.h / h))


class _CostCache:
    """Memoized cost of a controlled-natural run, keyed by cell-quantized
    obstacle parameters."""

    def __init__(self, s: Scenario, natural: BehaviorSpec, spec: CostSpec,
                 evaluator: Callable, h: float):
        self.s = s
        self.natural = natural
        self.spec = spec
        self.evaluator = evaluator
        self.h = h
        self.cache: dict = {}

    def __call__(self, lam: Optional[ObstacleParam]) -> float:
        key = None if lam is None else _quantize(lam, self.h)
        if key not in self.cache:
            m = self.evaluator(self.s, self.natural, lam)
            self.cache[key] = evaluate_cost(self.spec, m)
        return self.cache[key]


def _grid_h(s: Scenario) -> float:
    # cell spacing in the same units as the scenario
    return s.width / s.nx


def exhaustive_search(s: Scenario, shape: tuple, spec: CostSpec,
                      natural: BehaviorSpec, stride: int = 1,
                      evaluator: Callable = _default_evaluator,
                      jobs: int = 1,
                      progress: Optional[Callable] = None) -> SearchResult:
    """Evaluate the cost for every admissible grid-node barycenter of a
    fixed-shape rectangle; inadmissible nodes carry the uncontrolled cost and
    a flag. Ties break toward the lowest node index (row-major)."""
    w, h_side = shape
    h = _grid_h(s)
    xs = (np.arange(0, s.nx, stride) + 0.5) * h
    ys = (np.arange(0, s.ny, stride) + 0.5) * h

    cands = []
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            lam = ObstacleParam(float(x), float(y), w, h_side)
            if admissible(lam, s):
                cands.append((iy, ix, lam))
    if not cands:
        raise InfeasibleSearchError("no admissible obstacle position")

    uncontrolled = evaluate_cost(spec, evaluator(s, natural, None))

    if jobs > 1:
        import multiprocessing as mp
        with mp.Pool(jobs) as pool:
            metrics = pool.starmap(
                evaluator, [(s, natural, lam) for (_, _, lam) in cands])
        deltas = [evaluate_cost(spec, m) for m in metrics]
    else:
        deltas = []
        for i, (_, _, lam) in enumerate(cands):
            deltas.append(evaluate_cost(spec, evaluator(s, natural, lam)))
            if progress is not None:
                progress(i + 1, len(cands))

    dmap = np.full((ys.size, xs.size), uncontrolled)
    amap = np.zeros((ys.size, xs.size), dtype=bool)
    evaluations = []
    best = None
    best_delta = math.inf
    for (iy, ix, lam), d in zip(cands, deltas):
        dmap[iy, ix] = d
        amap[iy, ix] = True
        evaluations.append(EvalRecord(len(evaluations), 0, 0, lam, d, False, True))
        if d < best_delta:
            best_delta = d
            best = lam
    return SearchResult(
        lambda_star=best, delta_star=best_delta, evaluations=evaluations,
        uncontrolled_delta=uncontrolled, delta_map=dmap,
        delta_map_admissible=amap, delta_map_x=xs, delta_map_y=ys,
    )


def perturb(lam: ObstacleParam, rule: int, p: int, h: float) -> ObstacleParam:
    """Apply one of the eight compass rules: move the rectangle p cells
    right/left/up/down (R1-R4), or stretch/shrink it by 2p cells horizontally
    (R5-R6) or vertically (R7-R8). Sides never shrink below one cell."""
    if not 1 <= rule <= 8:
        raise ValueError("rule must lie in 1..8")
    if not 1 <= p <= 5:
        raise ValueError("p must lie in 1..5")
    d = p * h
    if rule == 1:
        return ObstacleParam(lam.x + d, lam.y, lam.w, lam.h)
    if rule == 2:
        return ObstacleParam(lam.x - d, lam.y, lam.w, lam.h)
    if rule == 3:
        return ObstacleParam(lam.x, lam.y + d, lam.w, lam.h)
    if rule == 4:
        return ObstacleParam(lam.x, lam.y - d, lam.w, lam.h)
    if rule == 5:
        return ObstacleParam(lam.x, lam.y, lam.w + 2 * d, lam.h)
    if rule == 6:
        return ObstacleParam(lam.x, lam.y, max(lam.w - 2 * d, h), lam.h)
    if rule == 7:
        return ObstacleParam(lam.x, lam.y, lam.w, lam.h + 2 * d)
    return ObstacleParam(lam.x, lam.y, lam.w, max(lam.h - 2 * d, h))


def compass_search(s: Scenario, lambda0: ObstacleParam, spec: CostSpec,
                   natural: BehaviorSpec,
                   anneal: Optional[AnnealSpec] = None,
                   max_steps: int = 200,
                   stall_limit: int = STALL_LIMIT,
                   evaluator: Callable = _default_evaluator,
                   progress: Optional[Callable] = None) -> SearchResult:
    """Randomized descent from lambda0: draw p in 1..5 and one of the eight
    rules, keep the move if the cost decreases (or by the annealing lottery),
    stop after max_steps or stall_limit consecutive rejections. Returns the
    best obstacle ever visited."""
    if not admissible(lambda0, s):
        raise InfeasibleSearchError("initial obstacle placement is not admissible")
    anneal = anneal or AnnealSpec()
    h = _grid_h(s)
    cost = _CostCache(s, natural, spec, evaluator, h)
    rng = np.random.default_rng(anneal.rng_seed)

    uncontrolled = cost(None)
    cur = lambda0
    cur_delta = cost(lambda0)
    best, best_delta = cur, cur_delta
    T = anneal.T0 if anneal.T0 is not None else 0.1 * cur_delta
    evaluations = [EvalRecord(0, 0, 0, lambda0, cur_delta, True, True)]
    stall = 0
    for step in range(1, max_steps + 1):
        p = int(rng.integers(1, 6))
        rule = int(rng.integers(1, 9))
        cand = perturb(cur, rule, p, h)
        ok = admissible(cand, s)
        if not ok:
            evaluations.append(EvalRecord(step, rule, p, cand, math.nan, False, False))
            stall += 1
            if stall >= stall_limit:
                break
            if anneal.enabled:
                T *= anneal.cooling
            continue
        d = cost(cand)
        accept = d < cur_delta
        if not accept and anneal.enabled and T > 0:
            accept = bool(rng.random() < math.exp(-(d - cur_delta) / T))
        evaluations.append(EvalRecord(step, rule, p, cand, d, accept, True))
        if accept:
            cur, cur_delta = cand, d
            stall = 0
        else:
            stall += 1
        if d < best_delta:
            best, best_delta = cand, d
        if anneal.enabled:
            T *= anneal.cooling
        if stall >= stall_limit:
            break
        if progress is not None:
            progress(step, max_steps)
    return SearchResult(
        lambda_star=best, delta_star=best_delta, evaluations=evaluations,
        uncontrolled_delta=uncontrolled,
    )
