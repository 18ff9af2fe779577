"""Plan a pendulum swing-up by sampling instead of by derivatives.

Each kernel iteration perturbs the nominal torque sequence with Gaussian
noise, rolls out every perturbed sequence, and re-averages them with
exp(-cost/lambda) weights.  Low-cost rollouts dominate the average, so the
plan drifts toward cheaper trajectories with no gradients involved.
"""
import numpy as np

from picontrol.controller import ModelSet, PathIntegralPlanner, pi_net_forward
from picontrol.core import PIHyperParams, RngStream
from picontrol.envs import pendulum_teacher_models
from picontrol.experts import sequence_cost

dynamics, cost, weight = pendulum_teacher_models()
models = ModelSet(dynamics, cost, weight)

hp = PIHyperParams(lambda_=0.01, nu=1500.0, sigma=0.005,
                   num_samples=100, horizon=30, recurrences=200)

x0 = np.array([0.0, 0.0])  # hanging straight down, at rest
rng = RngStream(7)

# ------------------------------------------------ cost vs kernel iteration

# run the same planning problem at increasing iteration budgets; the
# realized (noise-free) cost of the returned plan should fall, then level
for recurrences in (1, 5, 25, 100, 200):
    useq, _ = pi_net_forward(x0, None, models, hp, rng.child(0),
                             recurrences=recurrences)
    total, states = sequence_cost(dynamics, cost, weight.matrix(), x0, useq)
    final_theta = states[-1, 0]
    print(f"U={recurrences:3d}: plan cost {total:8.2f}, "
          f"final angle {final_theta:+.2f} rad, "
          f"peak torque {np.abs(useq).max():.2f}")

# same entry point the training loop differentiates through
planner = PathIntegralPlanner(models, hp)
useq = planner.plan(x0, None, rng.child(0))
total, _ = sequence_cost(dynamics, cost, weight.matrix(), x0, useq)
print(f"planner.plan reproduces the U={hp.recurrences} plan: cost {total:.2f}")
