"""Macroscopic crowd evacuation with tunable rationality and obstacle control."""

from .scenario import (
    CellGrid,
    CharacteristicScales,
    DensityBlock,
    EntranceSegment,
    ExitSegment,
    ObstacleParam,
    Rect,
    Scenario,
    ScenarioError,
    admissible,
    classify_cells,
    load_scenario,
    nondimensionalize,
    rasterize_rho0,
    redimensionalize,
    scenario_digest,
    scenario_from_dict,
)

__version__ = "0.1.0"

from .behaviors import BehaviorSpec, Metrics, SimulationError, compute_metrics, simulate
from .interaction import InteractionParams, interaction_velocity, sensory_mask
from .optimize import (
    AnnealSpec,
    CostSpec,
    InfeasibleSearchError,
    SearchResult,
    compass_search,
    evaluate_cost,
    exhaustive_search,
    perturb,
)
from .pathplan import (
    ControlSet,
    feedback_velocity,
    solve_drift_hjb,
    solve_eikonal,
    solve_timespace_hjb,
)
from .transport import (
    ExitLedger,
    TransportError,
    cfl_dt,
    inject_inflow,
    project_velocity,
    step_density,
)
