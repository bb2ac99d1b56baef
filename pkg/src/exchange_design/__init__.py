"""Strike selection by optimal quantization and make-take-fee design for an options exchange."""

from .contract import (
    ContractSolution,
    DerivedConstants,
    GridConfig,
    SpreadSurface,
    ValueGrid,
    derived_constants,
    inventory_incentive,
    optimal_trade_incentive,
    solve_contract,
    solve_value_grid,
    spread_surface,
    value_function,
    value_monte_carlo,
)
from .errors import NumericalError, ValidationError
from .market import MarketState, ModelParams, OptionSpec, arrival_intensity, bachelier_delta, hamiltonian, reference_options
from .quantizer import (
    DemandDistribution,
    StrikeSet,
    average_regret,
    brute_force_quantizer,
    build_empirical_distribution,
    lloyd_best_of,
    lloyd_run,
    lloyd_step,
    voronoi_cells,
)
from .simulator import (
    SimConfig,
    Trajectory,
    TrajectoryBatch,
    estimate_exchange_utility,
    estimate_mm_utility,
    simulate_batch,
    simulate_trajectory,
)

__version__ = "0.1.0"
