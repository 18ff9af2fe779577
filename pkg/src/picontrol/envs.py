"""Benchmark systems, closed-loop simulation, and evaluation metrics.

Two plants: a family of random orthogonal linear systems, and a pendulum
swing-up task integrated with fourth-order Runge-Kutta.  The module also
owns the receding-horizon loop (plan, apply first control, repeat) and
the success / trajectory-cost metrics used to score controllers.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .core import NumericError, RngStream
from .models import (MODEL_TYPES, ControlCostWeight, LinearDynamics,
                     PendulumTeacherCost, QuadraticCost)


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    return -((np.pi - theta) % (2.0 * np.pi) - np.pi)


class PendulumDynamics:
    """RK4-discretized pendulum: theta_ddot = -sin(theta) + gain * u.

    The model is deliberately unwrapped (angles accumulate) so that it is
    smooth everywhere; the plant applies the wrap.  Parameter-free, with
    analytic Jacobians obtained by chaining the four stage derivatives.
    """

    state_dim = 2
    control_dim = 1
    num_params = 0

    def __init__(self, dt=0.1, gain=0.5):
        self.dt = float(dt)
        self.gain = float(gain)

    def get_params(self):
        return np.zeros(0)

    def set_params(self, vec):
        if np.asarray(vec).size != 0:
            raise ValueError("pendulum dynamics has no parameters")

    def _rhs(self, s, u):
        out = np.empty_like(s)
        out[:, 0] = s[:, 1]
        out[:, 1] = -np.sin(s[:, 0]) + self.gain * u[:, 0]
        return out

    def _jac_state(self, s):
        J = np.zeros((s.shape[0], 2, 2))
        J[:, 0, 1] = 1.0
        J[:, 1, 0] = -np.cos(s[:, 0])
        return J

    def forward(self, x, v):
        h = self.dt
        k1 = self._rhs(x, v)
        k2 = self._rhs(x + 0.5 * h * k1, v)
        k3 = self._rhs(x + 0.5 * h * k2, v)
        k4 = self._rhs(x + h * k3, v)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def jacobian(self, x, v):
        h = self.dt
        a = 0.5 * h
        B = x.shape[0]
        eye = np.broadcast_to(np.eye(2), (B, 2, 2))
        gu = np.zeros((B, 2, 1))
        gu[:, 1, 0] = self.gain
        k1 = self._rhs(x, v)
        s2 = x + a * k1
        k2 = self._rhs(s2, v)
        s3 = x + a * k2
        k3 = self._rhs(s3, v)
        s4 = x + h * k3
        D1, E1 = self._jac_state(x), gu
        J2 = self._jac_state(s2)
        D2, E2 = J2 @ (eye + a * D1), J2 @ (a * E1) + gu
        J3 = self._jac_state(s3)
        D3, E3 = J3 @ (eye + a * D2), J3 @ (a * E2) + gu
        J4 = self._jac_state(s4)
        D4, E4 = J4 @ (eye + h * D3), J4 @ (h * E3) + gu
        A = eye + (h / 6.0) * (D1 + 2.0 * D2 + 2.0 * D3 + D4)
        Bm = (h / 6.0) * (E1 + 2.0 * E2 + 2.0 * E3 + E4)
        return A, Bm

    def vjp(self, x, v, cot):
        A, Bm = self.jacobian(x, v)
        x_bar = np.einsum("bij,bi->bj", A, cot)
        v_bar = np.einsum("bij,bi->bj", Bm, cot)
        return x_bar, v_bar, np.zeros(0)

    def config(self):
        return {"dt": self.dt, "gain": self.gain}

    @classmethod
    def from_config(cls, cfg):
        return cls(dt=cfg["dt"], gain=cfg["gain"])


MODEL_TYPES["pendulum_dynamics"] = PendulumDynamics


def pendulum_step(x, u, dt=0.1, gain=0.5):
    """One plant step: RK4 integration followed by the angle wrap."""
    dyn = PendulumDynamics(dt=dt, gain=gain)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out = dyn.forward(np.asarray(x, dtype=float)[None, :], u[None, :])[0]
    out[0] = wrap_angle(out[0])
    return out


class PendulumPlant:
    """Stateful-free pendulum stepper with wrapped angles."""

    def __init__(self, dt=0.1, gain=0.5):
        self.dt = float(dt)
        self.gain = float(gain)
        self._dyn = PendulumDynamics(dt=dt, gain=gain)

    state_dim = 2

    def step(self, x, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = self._dyn.forward(np.asarray(x, dtype=float)[None, :], u[None, :])[0]
        out[0] = wrap_angle(out[0])
        return out


class LinearPlant:
    """x' = Fx + Gu, exact and noise-free."""

    def __init__(self, F, G, dt=0.01):
        self.F = np.asarray(F, dtype=float)
        self.G = np.asarray(G, dtype=float)
        self.dt = float(dt)

    @property
    def state_dim(self):
        return self.F.shape[0]

    def step(self, x, u):
        return self.F @ np.asarray(x, dtype=float) + self.G @ np.atleast_1d(u)


@dataclass(frozen=True)
class LinearTeacher:
    """Ground-truth models of one random linear experiment instance."""

    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dt: float

    def models(self):
        """Teacher dynamics/cost/weight triple for a sampling controller."""
        return (LinearDynamics(self.F, self.G), QuadraticCost(self.Q),
                ControlCostWeight.from_matrix(self.R))


def linear_teacher_from(A, Gc, dt=0.01) -> LinearTeacher:
    """Build the teacher from raw draws: F = expm(dt (A - A')), G = [Gc; 0].

    The drift is the exponential of a scaled skew-symmetric matrix (hence
    exactly orthogonal); only the first two states are directly actuated.
    State cost and control weight are identity scaled by the step.
    """
    A = np.asarray(A, dtype=float)
    Gc = np.asarray(Gc, dtype=float)
    F = expm(dt * (A - A.T))
    G = np.vstack([Gc, np.zeros((2, 2))])
    return LinearTeacher(F, G, np.eye(4) * dt, np.eye(2) * dt, dt)


def sample_linear_teacher(rng: RngStream, dt=0.01) -> LinearTeacher:
    """Draw one random linear system (drift entries N(0,1), actuation
    block entries N(0, dt))."""
    gen = rng.generator()
    return linear_teacher_from(gen.normal(size=(4, 4)),
                               gen.normal(0.0, np.sqrt(dt), size=(2, 2)), dt)


def pendulum_teacher_models(dt=0.1, gain=0.5, control_weight=5.0):
    """Ground-truth pendulum dynamics/cost/weight triple."""
    return (PendulumDynamics(dt=dt, gain=gain), PendulumTeacherCost(),
            ControlCostWeight.from_matrix([[control_weight]]))


# Planning horizon for the demonstration-generating iLQR controller.  With
# control weight 5 the swing-up only pays off against hanging on long
# horizons (the crossover is near 90 steps); at 210 steps the realized
# 10-run mean trajectory cost lands on the reference expert value.
PENDULUM_EXPERT_HORIZON = 210


def upright_success(states, dt, window=5.0, threshold=0.5):
    """True iff the pendulum stays upright for a contiguous window.

    Upright means the wrapped angle is within `threshold` of either +pi
    or -pi.  A run of c consecutive upright samples spans (c-1)*dt
    seconds; the comparison is done on integer step counts so no
    floating-point accumulation can flip the boundary case.
    """
    theta = wrap_angle(np.asarray(states, dtype=float)[:, 0])
    upright = np.abs(np.abs(theta) - np.pi) < threshold
    needed = int(np.ceil(window / dt - 1e-9))
    run = best = 0
    for flag in upright:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best - 1 >= needed


def trajectory_cost(states, controls, cost_model, weight_matrix):
    """Realized cost of one closed-loop run.

    terminal(x_T) + sum_i running(x_i) + u_i' R u_i / 2 over the applied
    controls; an empty control list leaves just the terminal term.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    R = np.atleast_2d(np.asarray(weight_matrix, dtype=float))
    total = float(cost_model.terminal(states[-1:])[0])
    if controls.size:
        total += float(cost_model.running(states[:-1]).sum())
        total += 0.5 * float(np.einsum("im,mp,ip->", controls, R, controls))
    return total


@dataclass
class SimulationResult:
    states: np.ndarray    # (T+1, n)
    controls: np.ndarray  # (T, m)
    success: bool
    cost: float | None
    wall_time: float


def mpc_simulate(planner, plant, x0, duration, warm_start=True, rng=None,
                 cost_model=None, weight_matrix=None,
                 success_fn=None) -> SimulationResult:
    """Receding-horizon loop: plan, apply the first control, step, repeat.

    Args:
        planner: object with plan(x0, init, rng, recurrences), horizon and
            control_dim; a warm_recurrences attribute (may be None) gives
            the reduced iteration count used on warm-started steps.
        plant: object with step(x, u) and dt.
        x0: initial plant state.
        duration: simulated seconds; steps = round(duration / plant.dt).
        warm_start: seed each plan after the first with the previous plan
            shifted left by one step, a zero control appended.
        rng: stream; step i plans with rng.child(i).
        cost_model, weight_matrix: when both given, the realized
            trajectory cost is computed, else the cost field is None.
        success_fn: optional states -> bool metric; False when omitted.

    Raises:
        NumericError: the plant state left the finite range, with the step.
    """
    start = time.perf_counter()
    if rng is None:
        rng = RngStream(0)
    steps = int(round(duration / plant.dt))
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, x.size))
    states[0] = x
    m = planner.control_dim
    controls = np.empty((steps, m))
    prev = None
    warm_iters = getattr(planner, "warm_recurrences", None)
    for i in range(steps):
        if warm_start and prev is not None:
            init = np.vstack([prev[1:], np.zeros((1, m))])
            rec = warm_iters
        else:
            init, rec = None, None
        plan = planner.plan(x, init=init, rng=rng.child(i), recurrences=rec)
        prev = plan
        controls[i] = plan[0]
        x = plant.step(x, plan[0])
        if not np.all(np.isfinite(x)):
            raise NumericError(f"plant diverged at step {i}")
        states[i + 1] = x
    success = bool(success_fn(states)) if success_fn is not None else False
    cost = None
    if cost_model is not None and weight_matrix is not None:
        cost = trajectory_cost(states, controls, cost_model, weight_matrix)
    return SimulationResult(states, controls, success, cost,
                            time.perf_counter() - start)


def benchmark_runs(planner, rng: RngStream, count, duration,
                   cost_model=None, weight_matrix=None):
    """Closed-loop swing-up runs from the benchmark start distribution.

    Run i draws theta ~ U[-pi, pi], theta_dot ~ U[-1, 1] from rng.child(i)
    and simulates with the planner stream rng.child(1000 + i), so results
    are a pure function of (planner, rng, count, duration).  Divergent
    runs are dropped and counted.

    Returns:
        (list of SimulationResult, excluded count)
    """
    if cost_model is None or weight_matrix is None:
        _, teacher_cost, teacher_weight = pendulum_teacher_models()
        cost_model = cost_model or teacher_cost
        weight_matrix = (weight_matrix if weight_matrix is not None
                         else teacher_weight.matrix())
    plant = PendulumPlant()
    results, excluded = [], 0
    for i in range(count):
        gen = rng.child(i).generator()
        x0 = np.array([gen.uniform(-np.pi, np.pi), gen.uniform(-1.0, 1.0)])
        try:
            results.append(mpc_simulate(
                planner, plant, x0, duration, rng=rng.child(1000 + i),
                cost_model=cost_model, weight_matrix=weight_matrix,
                success_fn=lambda s: upright_success(s, plant.dt)))
        except NumericError:
            excluded += 1
    return results, excluded


def write_trajectory_csv(path, states, controls, dt, cost_model=None):
    """Log one run: time, state components, control components, cost.

    The final row carries the terminal state; its control cells are empty
    and its cost cell holds the terminal cost.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[0]
    n = states.shape[1]
    m = controls.shape[1] if controls.ndim == 2 else 0
    header = (["time"] + [f"x{j}" for j in range(n)]
              + [f"u{j}" for j in range(m)] + ["cost"])
    running = cost_model.running(states[:-1]) if (cost_model and T) else None
    terminal = cost_model.terminal(states[-1:])[0] if cost_model else None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(T):
            row = [repr(i * dt)] + [repr(float(v)) for v in states[i]]
            row += [repr(float(v)) for v in controls[i]]
            row.append(repr(float(running[i])) if running is not None else "")
            writer.writerow(row)
        row = [repr(T * dt)] + [repr(float(v)) for v in states[T]] + [""] * m
        row.append(repr(float(terminal)) if terminal is not None else "")
        writer.writerow(row)
