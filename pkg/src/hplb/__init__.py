"""Per-head sparse attention budgets and head-parallel load balancing."""

from .allocator import (
    AllocatorConfig,
    BudgetAllocation,
    TopPAllocation,
    Transfer,
    maxmin_allocate,
    oracle_topp_allocate,
    recoveries,
    uniform_allocate,
)
from .attention import (
    AttentionHead,
    AttentionWorkload,
    SelectionPolicy,
    dense_attention,
    output_error,
    recovery_curve,
    recovery_ratio,
    selection_mask,
    sparse_attention,
)
from .errors import (
    BudgetError,
    CurveError,
    HPLBError,
    InstanceTooLargeError,
    ProfileFormatError,
    ShapeError,
)
from .partitioner import (
    Assignment,
    LoadReport,
    greedy_assign,
    imbalance,
    imbalance_of_loads,
    naive_assign,
    optimal_assign,
)
from .profiler import (
    HeadProfile,
    RecoveryCurve,
    SyntheticWorkloadSpec,
    budget_for_recovery,
    budget_grid,
    budget_vector,
    build_profiles,
    generate_workload,
    load_profiles,
    save_profiles,
    stability_score,
)
from .simulator import CostModel, SimulationResult, compare, simulate, sweep

__version__ = "0.1.0"
