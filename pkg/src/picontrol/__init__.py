"""Differentiable path-integral model predictive control.

The package splits into layers: `core` (streams, parameter packing, shared
errors), `models` (dynamics/cost models with hand-written VJPs),
`controller` (the unrolled planner and its reverse pass), `experts`
(LQR/iLQR demonstrators), `envs` (benchmark plants and closed-loop
simulation), `training` (datasets, losses, the imitation loop), and `cli`
(reproducible experiment pipelines).  The names below cover the common
entry points; everything else is imported from its submodule.
"""

from .controller import ModelSet, PathIntegralPlanner, pi_net_backward, pi_net_forward
from .core import (ConsistencyError, MemoryBudgetError, NumericError,
                   ParameterError, PIHyperParams, RngStream, ShapeError)
from .envs import (PENDULUM_EXPERT_HORIZON, LinearPlant, PendulumDynamics,
                   PendulumPlant, benchmark_runs, mpc_simulate,
                   pendulum_teacher_models, sample_linear_teacher,
                   upright_success)
from .experts import ILQRPlanner, ILQRSettings, LQRPlanner, LQRProblem, ilqr_solve, lqr_solve
from .models import (ControlCostWeight, LinearDynamics, MLPCost, MLPDynamics,
                     PendulumTeacherCost, QuadraticCost)
from .training import (build_linear_dataset, build_pendulum_dataset,
                       evaluate_losses, expert_rollouts, init_linear_models,
                       init_pendulum_models, pretrain_dynamics, train_pinet)

__all__ = [
    "ConsistencyError", "ControlCostWeight", "ILQRPlanner", "ILQRSettings",
    "LQRPlanner", "LQRProblem", "LinearDynamics", "LinearPlant",
    "MLPCost", "MLPDynamics", "MemoryBudgetError", "ModelSet",
    "NumericError", "PENDULUM_EXPERT_HORIZON", "PIHyperParams",
    "ParameterError", "PathIntegralPlanner", "PendulumDynamics",
    "PendulumPlant", "PendulumTeacherCost", "QuadraticCost", "RngStream",
    "ShapeError", "benchmark_runs", "build_linear_dataset",
    "build_pendulum_dataset", "evaluate_losses", "expert_rollouts",
    "ilqr_solve", "init_linear_models", "init_pendulum_models",
    "lqr_solve", "mpc_simulate", "pendulum_teacher_models",
    "pi_net_backward", "pi_net_forward", "pretrain_dynamics",
    "sample_linear_teacher", "train_pinet", "upright_success",
]
