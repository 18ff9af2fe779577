"""Path-integral control law and its exact reverse pass.

One kernel iteration follows the sampling controller recipe: draw K
Gaussian perturbation sequences, roll the dynamics model out along each
perturbed plan, accumulate modified running costs into suffix cost-to-go
values, then update every control by the exponentially cost-weighted
average of the perturbations.  The planner applies the kernel U times
with fresh noise each iteration.

The whole computation is differentiable with respect to the model
parameters.  A recorded forward pass stores every intermediate on a
tape; the backward pass walks the tape in reverse, composing model VJPs
with the softmax and suffix-sum adjoints.  Noise samples are treated as
constants; gradients never flow into them.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import (ConsistencyError, NumericError, ParamVector, PIHyperParams,
                   RngStream, gaussian_noise, pack_params)
from .models import control_penalty


@dataclass
class ModelSet:
    """The three trainable pieces the controller plans with."""

    dynamics: object
    cost: object
    weight: object  # ControlCostWeight

    def items(self):
        return (("dynamics", self.dynamics), ("cost", self.cost),
                ("control_weight", self.weight))

    def pack(self) -> ParamVector:
        return pack_params(self.items())


@dataclass
class RolloutCosts:
    running: np.ndarray  # (K, N)
    terminal: np.ndarray  # (K,)


@dataclass
class KernelRecord:
    """Everything one kernel iteration computed, kept for the reverse pass."""

    useq: np.ndarray        # (N, m) input plan
    noise: np.ndarray       # (K, N, m)
    states: np.ndarray      # (K, N+1, n)
    running: np.ndarray     # (K, N)
    terminal: np.ndarray    # (K,)
    cost_to_go: np.ndarray  # (K, N+1)
    weights: np.ndarray     # (K, N) normalized softmax weights
    output: np.ndarray      # (N, m) updated plan


@dataclass
class RolloutTape:
    """Recorded forward pass: per-iteration records plus a parameter snapshot."""

    x0: np.ndarray
    hyper: PIHyperParams
    layout: tuple
    param_values: np.ndarray
    records: list = field(default_factory=list)


def monte_carlo_rollout(x0, useq, noise, dynamics, cost, weight_matrix, nu):
    """Roll out K perturbed plans and collect modified running costs.

    Args:
        x0: (n,) initial state shared by all trajectories.
        useq: (N, m) nominal plan.
        noise: (K, N, m) perturbations; trajectory k applies useq + noise[k].
        dynamics: model with batched forward.
        cost: state-cost model (running / terminal).
        weight_matrix: (m, m) control weight R.
        nu: noise-quadratic coefficient knob.

    Returns:
        (states, RolloutCosts): states is (K, N+1, n);
        running[k, i] = q(x_i^k) + control penalty(u_i, du_i^k).

    Raises:
        NumericError: a trajectory left the finite range (diverging rollout).
    """
    noise = np.asarray(noise, dtype=float)
    K, N, m = noise.shape
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    v = np.asarray(useq, dtype=float)[None, :, :] + noise
    states = np.empty((K, N + 1, n))
    states[:, 0] = x0
    state_cost = np.empty((K, N))
    for i in range(N):
        x = states[:, i]
        state_cost[:, i] = cost.running(x)
        states[:, i + 1] = dynamics.forward(x, v[:, i])
    if not np.all(np.isfinite(states)):
        bad = int(np.argwhere(~np.isfinite(states).all(axis=(1, 2)))[0, 0])
        raise NumericError(f"rollout diverged on trajectory {bad}")
    running = state_cost + control_penalty(useq, noise, weight_matrix, nu)
    terminal = np.asarray(cost.terminal(states[:, N]), dtype=float)
    if not (np.all(np.isfinite(running)) and np.all(np.isfinite(terminal))):
        bad = int(np.argwhere(~(np.isfinite(running).all(axis=1)
                                & np.isfinite(terminal)))[0, 0])
        raise NumericError(f"non-finite cost on trajectory {bad}")
    return states, RolloutCosts(running, terminal)


def cost_to_go(costs: RolloutCosts) -> np.ndarray:
    """Suffix sums S[k, i] = sum_{j >= i} running[k, j] + terminal[k].

    Accumulated as a single reversed running sum so that
    S[k, i] == S[k, i+1] + running[k, i] holds bit-for-bit.
    """
    stacked = np.concatenate([costs.terminal[:, None], costs.running[:, ::-1]], axis=1)
    return np.cumsum(stacked, axis=1)[:, ::-1]


def _softmax_weights(ctg, lambda_):
    """Per-timestep trajectory weights from cost-to-go columns.

    The per-column minimum is subtracted before exponentiation; the
    weights are invariant to that shift, so this is exact, and the
    maximum weight is always 1 (no all-zero columns possible).
    """
    S = ctg[:, :-1]
    z = -(S - S.min(axis=0, keepdims=True)) / lambda_
    w = np.exp(z)
    return w / w.sum(axis=0, keepdims=True)


def update_controls(useq, noise, ctg, lambda_):
    """Exponentially cost-weighted perturbation average, per timestep."""
    w = _softmax_weights(np.asarray(ctg, dtype=float), lambda_)
    return np.asarray(useq, dtype=float) + np.einsum("ki,kim->im", w, noise)


def _kernel_record(x0, useq, models: ModelSet, hp: PIHyperParams,
                   weight_matrix, rng: RngStream) -> KernelRecord:
    m = weight_matrix.shape[0]
    noise = gaussian_noise(rng, hp.num_samples, hp.horizon, m, hp.sigma)
    states, costs = monte_carlo_rollout(x0, useq, noise, models.dynamics,
                                        models.cost, weight_matrix, hp.nu)
    ctg = cost_to_go(costs)
    weights = _softmax_weights(ctg, hp.lambda_)
    output = useq + np.einsum("ki,kim->im", weights, noise)
    return KernelRecord(useq, noise, states, costs.running, costs.terminal,
                        ctg, weights, output)


def pi_kernel(x0, useq, models: ModelSet, hp: PIHyperParams,
              rng: RngStream) -> np.ndarray:
    """One full kernel iteration: noise, rollouts, cost-to-go, update."""
    rec = _kernel_record(np.asarray(x0, dtype=float),
                         np.asarray(useq, dtype=float), models, hp,
                         models.weight.matrix(), rng)
    return rec.output.copy()


def pi_net_forward(x0, useq_init, models: ModelSet, hp: PIHyperParams,
                   rng: RngStream, record=False, recurrences=None):
    """Improve a control plan by repeated kernel iterations.

    Args:
        x0: (n,) current state.
        useq_init: (N, m) starting plan; None means zeros.
        models: dynamics / cost / control-weight bundle.
        hp: hyper-parameters; hp.recurrences used unless overridden.
        rng: stream; iteration t draws noise from rng.child(t).
        record: keep a tape for the reverse pass (off for control-time use).
        recurrences: optional override of the iteration count (warm starts).

    Returns:
        (useq, tape): the improved (N, m) plan, and the RolloutTape when
        record=True else None.
    """
    x0 = np.asarray(x0, dtype=float)
    weight_matrix = models.weight.matrix()
    m = weight_matrix.shape[0]
    if useq_init is None:
        useq = np.zeros((hp.horizon, m))
    else:
        useq = np.array(useq_init, dtype=float)
    count = hp.recurrences if recurrences is None else int(recurrences)
    tape = None
    if record:
        snapshot = models.pack()
        tape = RolloutTape(x0.copy(), hp, snapshot.layout, snapshot.values)
    for t in range(count):
        rec = _kernel_record(x0, useq, models, hp, weight_matrix, rng.child(t))
        useq = rec.output
        if record:
            tape.records.append(rec)
    return useq, tape


def _kernel_backward(rec: KernelRecord, out_bar, models: ModelSet, hp,
                     weight_matrix, grads: ParamVector):
    """Adjoint of one kernel iteration.

    Takes the cotangent on the iteration's output plan, accumulates
    parameter cotangents into grads, and returns the cotangent on the
    input plan.  All intermediates come from the record.
    """
    noise, w, states = rec.noise, rec.weights, rec.states
    K, N, m = noise.shape
    u_bar = np.array(out_bar, dtype=float)  # pass-through u* = u + ...

    # softmax update: w_bar -> z_bar -> cost-to-go cotangent
    w_bar = np.einsum("im,kim->ki", out_bar, noise)
    z_bar = w * (w_bar - (w * w_bar).sum(axis=0, keepdims=True))
    s_bar = -z_bar / hp.lambda_  # (K, N); column N of the cost-to-go gets 0

    # suffix sums: running[j] feeds S[i] for all i <= j; terminal feeds all
    run_bar = np.cumsum(s_bar, axis=1)
    term_bar = s_bar.sum(axis=1)

    # control-penalty terms of the modified running cost (state-independent)
    col = run_bar.sum(axis=0)
    u_bar += col[:, None] * (rec.useq @ weight_matrix)
    weighted_noise = np.einsum("ki,kim->im", run_bar, noise)
    u_bar += weighted_noise @ weight_matrix
    r_bar = 0.5 * np.einsum("i,im,ip->mp", col, rec.useq, rec.useq)
    r_bar += 0.5 * (1.0 - 1.0 / hp.nu) * np.einsum("ki,kim,kip->mp",
                                                   run_bar, noise, noise)
    r_bar += np.einsum("ki,im,kip->mp", run_bar, rec.useq, noise)

    # terminal cost
    x_bar, cost_bar = models.cost.terminal_vjp(states[:, N], term_bar)
    grads.segment("cost")[:] += cost_bar

    # walk the rollout backwards, chaining state cotangents
    dyn_seg = grads.segment("dynamics")
    cost_seg = grads.segment("cost")
    for i in range(N - 1, -1, -1):
        x = states[:, i]
        v = rec.useq[i][None, :] + noise[:, i]
        xb_dyn, v_bar, dyn_bar = models.dynamics.vjp(x, v, x_bar)
        dyn_seg += dyn_bar
        u_bar[i] += v_bar.sum(axis=0)
        xb_cost, cost_bar = models.cost.running_vjp(x, run_bar[:, i])
        cost_seg += cost_bar
        x_bar = xb_dyn + xb_cost

    grads.segment("control_weight")[:] += models.weight.vjp_matrix(r_bar)
    return u_bar


def pi_net_backward(tape: RolloutTape, loss_cotangent, models: ModelSet,
                    freeze=()) -> ParamVector:
    """Reverse pass over a recorded forward.

    Args:
        tape: tape from pi_net_forward(..., record=True).
        loss_cotangent: (N, m) cotangent of the scalar loss on the final plan.
        models: must hold bit-identical parameters to the recording.
        freeze: model ids whose gradient segments are forced to exactly zero.

    Returns:
        ParamVector gradient with the tape's layout.

    Raises:
        ConsistencyError: models changed since the tape was recorded.
    """
    current = models.pack()
    if current.layout != tape.layout or not np.array_equal(current.values,
                                                           tape.param_values):
        raise ConsistencyError("model parameters do not match the tape")
    weight_matrix = models.weight.matrix()
    grads = ParamVector(tape.layout)
    u_bar = np.asarray(loss_cotangent, dtype=float)
    for rec in reversed(tape.records):
        u_bar = _kernel_backward(rec, u_bar, models, tape.hyper,
                                 weight_matrix, grads)
    for name in freeze:
        grads.segment(name)[:] = 0.0
    return grads


class PathIntegralPlanner:
    """Sampling controller for closed-loop use.

    Bundles models and hyper-parameters behind the planner protocol that
    the simulator consumes: plan(x0, init, rng, recurrences).  A reduced
    iteration count for warm-started steps can be configured; the
    simulator reads it off the warm_recurrences attribute.
    """

    def __init__(self, models: ModelSet, hp: PIHyperParams,
                 warm_recurrences=None):
        self.models = models
        self.hp = hp
        self.warm_recurrences = warm_recurrences

    @property
    def horizon(self):
        return self.hp.horizon

    @property
    def control_dim(self):
        return self.models.weight.dim

    def plan(self, x0, init=None, rng=None, recurrences=None):
        if rng is None:
            rng = RngStream(0)
        useq, _ = pi_net_forward(x0, init, self.models, self.hp, rng,
                                 record=False, recurrences=recurrences)
        return useq
