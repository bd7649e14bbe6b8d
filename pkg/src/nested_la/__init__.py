"""Multilayer Lookahead optimizers and their numerical verification suites."""

from .problems import (
    DecomposedProblem,
    block_average_grad,
    block_average_loss,
    component_grad,
    full_grad,
    load_problem,
    make_quadratic_suite,
    make_rng,
    noise_tape,
    noisy_grad,
    save_problem,
)
from .optimizers import (
    LayerStack,
    MultilayerState,
    RunReport,
    constant_schedule,
    mla_step,
    per_round_schedule,
    run,
    sgd_step,
    sync_depth,
    theta_weights,
)
from .localsgd import (
    EquivalenceReport,
    LocalSgdState,
    local_sgd_step,
    sync_matrix,
    theta,
    verify_equivalence,
)
from .theory import (
    BoundInputs,
    RestartSchedule,
    claim1_grid_check,
    corollary2_lr,
    corollary2_threshold,
    empirical_bound_check,
    feasibility_margin,
    gamma_star,
    linear_rate_constant,
    measure_contraction,
    nested_rate_constant,
    restart_schedule,
    run_restarts,
    theorem1_weighted_average,
    theorem2_bound,
)
from .regularizer import (
    FlowCoefficients,
    ai,
    aig,
    an,
    ang,
    expected_epoch_iterate,
    flow_coefficients,
    integrate_modified_flow,
    modified_flow_grad,
    order_check,
)

__version__ = "0.1.0"
