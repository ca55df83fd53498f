"""Riccati-based receding horizon and model predictive control.

Dense solvers for the continuous and discrete Riccati equations, finite- and
infinite-horizon LQ feedback, a closed-loop MPC/RHC simulator with the
associated stability margins, and sweep drivers for the benchmark examples.
"""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConvergenceError,
    DimensionError,
    InstabilityError,
    NonFiniteError,
    NotHurwitzError,
    PreconditionError,
    RiccatiMpcError,
    StepTooLargeError,
)
from .riccati import (  # noqa: E402
    CostSpec,
    LtiModel,
    RiccatiSolution,
    drde_iterate,
    rde_integrate,
    solve_care,
    solve_dare,
)
from .horizon import Trajectory, simulate_finite_horizon, simulate_inf_horizon  # noqa: E402
from .mpc import MpcConfig, Plant, run_mpc, run_rhc  # noqa: E402
from .discrete import DtLtiModel, run_rhc_dt  # noqa: E402
