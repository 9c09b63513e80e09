"""Python bindings for the hexfleet C++ core."""

from ._hexfleet import (
    CheckResult,
    ConfigError,
    HexGrid,
    RunConfig,
    Trainer,
    build_grid,
    check_contraction,
    check_dual_tracking,
    check_gradient_fidelity,
    check_gumbel_law,
    check_lipschitz_bound,
    check_power_density,
    check_projection_oracle,
    evaluate_greedy,
    normalized_adjacency,
    synth_demand,
)

__all__ = [
    "CheckResult",
    "ConfigError",
    "HexGrid",
    "RunConfig",
    "Trainer",
    "build_grid",
    "check_contraction",
    "check_dual_tracking",
    "check_gradient_fidelity",
    "check_gumbel_law",
    "check_lipschitz_bound",
    "check_power_density",
    "check_projection_oracle",
    "evaluate_greedy",
    "normalized_adjacency",
    "synth_demand",
]
