"""Multi-period optimal control with state unpredictability for LTV systems."""

from .adversary import AttackerConfig, attack_run, kf_step, predict_output
from .constrained import (
    BranchAssignment,
    ConstrainedPolicy,
    MeanBounds,
    Mode,
    OnlineClampPolicy,
    clamp_step,
    conservative_bounds,
    enumerate_feasible,
    feasibility_check,
    online_clamp_assignment,
)
from .dp import PolicySchedule, ValueCoefficients, backward_solve, control_mean, value_function
from .errors import (
    CapacityError,
    FilterDegeneracyError,
    HorizonError,
    OverConstrainedError,
    ParameterError,
    ShapeError,
    SolverDegeneracyError,
)
from .experiments import ExperimentConfig, diff_policies, run_experiment
from .rollout import (
    CostBreakdown,
    RandomSource,
    monte_carlo_cost,
    propagate_moments,
    rollout,
    sample_perturbation,
)
from .system import (
    CostSpec,
    Scenario,
    TimeVaryingLinearSystem,
    Trajectory,
    observe,
    scalar_benchmark,
    scenario_from_dict,
    scenario_to_dict,
    step,
    validate,
)

__version__ = "0.1.0"
