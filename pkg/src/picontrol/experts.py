"""Optimal-control oracles that generate demonstrations.

Finite-horizon discrete-time LQR (exact, via the backward Riccati
recursion) covers the linear experiments; iLQR with Levenberg-style
regularization and backtracking line search covers the pendulum.  Both
minimize the same zero-noise objective the sampling controller targets:
sum_i q(x_i) + u_i'Ru_i/2 plus a terminal cost.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import NumericError, ParameterError, ShapeError


def _check_psd(M, name, strict=False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ParameterError(f"{name} must be symmetric")
    if strict:
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise ParameterError(f"{name} must be positive definite")
    elif np.linalg.eigvalsh(M).min() < -1e-12:
        raise ParameterError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True)
class LQRProblem:
    """x' = Fx + Gu with cost sum (x'Qx + u'Ru)/2 and terminal x'Qx/2."""

    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        object.__setattr__(self, "Q", _check_psd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_psd(self.R, "R", strict=True))
        if self.horizon < 1:
            raise ParameterError(f"horizon must be >= 1, got {self.horizon}")
        n, m = self.G.shape
        if self.F.shape != (n, n) or self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ShapeError("inconsistent LQR problem shapes")


def riccati_gains(p: LQRProblem):
    """Backward Riccati sweep.

    Returns:
        (gains, values): gains[i] is the (m, n) feedback matrix K_i with
        u_i = -K_i x_i; values[i] is the (n, n) cost-to-go matrix P_i,
        values[N] = Q.  Every P_i is symmetric PSD.
    """
    P = p.Q.copy()
    values = [P]
    gains = [None] * p.horizon
    for i in range(p.horizon - 1, -1, -1):
        GP = p.G.T @ P
        K = np.linalg.solve(p.R + GP @ p.G, GP @ p.F)
        P = p.Q + p.F.T @ P @ (p.F - p.G @ K)
        P = 0.5 * (P + P.T)
        gains[i] = K
        values.insert(0, P)
    return gains, values


def lqr_solve(p: LQRProblem, x0) -> np.ndarray:
    """Exact minimizer of the finite-horizon LQ objective from x0."""
    gains, _ = riccati_gains(p)
    x = np.asarray(x0, dtype=float)
    useq = np.empty((p.horizon, p.G.shape[1]))
    for i, K in enumerate(gains):
        u = -K @ x
        useq[i] = u
        x = p.F @ x + p.G @ u
    return useq


def sequence_cost(dynamics, cost, weight_matrix, x0, useq):
    """Zero-noise objective of a plan under the given models."""
    useq = np.asarray(useq, dtype=float)
    x = np.asarray(x0, dtype=float)[None, :]
    states = [x]
    for u in useq:
        x = dynamics.forward(x, u[None, :])
        states.append(x)
    stacked = np.concatenate(states, axis=0)
    if not np.all(np.isfinite(stacked)):
        raise NumericError("plan rollout diverged")
    total = float(cost.running(stacked[:-1]).sum() + cost.terminal(stacked[-1:])[0])
    total += 0.5 * float(np.einsum("im,mp,ip->", useq, weight_matrix, useq))
    return total, stacked


@dataclass(frozen=True)
class ILQRSettings:
    max_iterations: int = 50
    tol: float = 1e-6                # relative cost-decrease convergence
    reg_init: float = 0.0
    reg_min: float = 1e-6
    reg_max: float = 1e10
    reg_factor: float = 10.0
    backtracking_steps: int = 10     # step sizes 1, 1/2, ..., 2^-(steps-1)

    def __post_init__(self):
        if self.max_iterations < 1 or self.backtracking_steps < 1:
            raise ParameterError("iteration counts must be >= 1")
        if not (self.tol > 0 and self.reg_min > 0 and self.reg_max > self.reg_min
                and self.reg_factor > 1 and self.reg_init >= 0):
            raise ParameterError("regularization bounds must be positive")


@dataclass
class ILQRResult:
    controls: np.ndarray
    cost: float
    costs: list = field(default_factory=list)  # initial + accepted iterations
    converged: bool = False
    degraded: bool = False
    iterations: int = 0


def _ilqr_backward(A, B, qx, qxx, useq, R, mu):
    """One value-function sweep; None when a regularized Quu is not PD."""
    N, n, m = B.shape[0], A.shape[1], B.shape[2]
    Vx = qx[N]
    Vxx = qxx[N]
    k = np.empty((N, m))
    Kfb = np.empty((N, m, n))
    expected = 0.0
    for i in range(N - 1, -1, -1):
        Qx = qx[i] + A[i].T @ Vx
        Qu = R @ useq[i] + B[i].T @ Vx
        Qxx = qxx[i] + A[i].T @ Vxx @ A[i]
        Quu = R + B[i].T @ Vxx @ B[i] + mu * np.eye(m)
        Qux = B[i].T @ Vxx @ A[i]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            return None
        rhs = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Qu, Qux])))
        k[i] = -rhs[:, 0]
        Kfb[i] = -rhs[:, 1:]
        expected += -k[i] @ Qu - 0.5 * k[i] @ Quu @ k[i]
        Vx = Qx + Kfb[i].T @ Quu @ k[i] + Kfb[i].T @ Qu + Qux.T @ k[i]
        Vxx = Qxx + Kfb[i].T @ Quu @ Kfb[i] + Kfb[i].T @ Qux + Qux.T @ Kfb[i]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k, Kfb, expected


def ilqr_solve(dynamics, cost, weight_matrix, x0, horizon,
               settings: ILQRSettings | None = None, init=None) -> ILQRResult:
    """Locally optimal plan for the zero-noise objective.

    Args:
        dynamics: model with batched forward and jacobian.
        cost: state cost with batched running/terminal, gradient, hessian.
        weight_matrix: (m, m) control weight R (running and terminal q share
            the cost model, so only R enters the control blocks).
        x0: (n,) start state.
        horizon: plan length N.
        settings: solver knobs; defaults above.
        init: (N, m) starting plan, zeros when omitted.

    Returns:
        ILQRResult; degraded=True means the line search stalled at maximum
        regularization and the best plan so far is returned.

    Raises:
        NumericError: the initial rollout diverged.
    """
    s = settings or ILQRSettings()
    R = np.atleast_2d(np.asarray(weight_matrix, dtype=float))
    m = R.shape[0]
    useq = np.zeros((horizon, m)) if init is None else np.array(init, dtype=float)
    J, states = sequence_cost(dynamics, cost, R, x0, useq)
    result = ILQRResult(useq, J, [J])
    mu = s.reg_init
    for it in range(s.max_iterations):
        result.iterations = it + 1
        A, B = dynamics.jacobian(states[:-1], useq)
        qx = np.concatenate([cost.gradient(states[:-1]),
                             cost.gradient(states[-1:])], axis=0)
        qxx = np.concatenate([cost.hessian(states[:-1]),
                              cost.hessian(states[-1:])], axis=0)
        sweep = _ilqr_backward(A, B, qx, qxx, useq, R, mu)
        while sweep is None:
            mu = max(s.reg_min, mu * s.reg_factor)
            if mu > s.reg_max:
                result.degraded = True
                return result
            sweep = _ilqr_backward(A, B, qx, qxx, useq, R, mu)
        k, Kfb, expected = sweep
        if expected <= s.tol * max(1.0, abs(J)):
            result.converged = True
            return result
        accepted = False
        for step in range(s.backtracking_steps):
            alpha = 0.5 ** step
            new_u = np.empty_like(useq)
            x = states[0].copy()
            new_states = [x[None, :].copy()]
            for i in range(horizon):
                u = useq[i] + alpha * k[i] + Kfb[i] @ (x - states[i])
                new_u[i] = u
                x = dynamics.forward(x[None, :], u[None, :])[0]
                new_states.append(x[None, :].copy())
            stacked = np.concatenate(new_states, axis=0)
            if not np.all(np.isfinite(stacked)):
                continue
            J_new = float(cost.running(stacked[:-1]).sum()
                          + cost.terminal(stacked[-1:])[0]
                          + 0.5 * np.einsum("im,mp,ip->", new_u, R, new_u))
            if np.isfinite(J_new) and J_new < J:
                accepted = True
                break
        if accepted:
            drop = J - J_new
            useq, states, J = new_u, stacked, J_new
            result.controls, result.cost = useq, J
            result.costs.append(J)
            mu = mu / s.reg_factor if mu > s.reg_min else 0.0
            if drop <= s.tol * max(1.0, abs(J)):
                result.converged = True
                return result
        else:
            mu = max(s.reg_min, mu * s.reg_factor)
            if mu > s.reg_max:
                result.degraded = True
                return result
    return result


class LQRPlanner:
    """Planner-protocol wrapper around lqr_solve for closed-loop use."""

    warm_recurrences = None

    def __init__(self, problem: LQRProblem):
        self.problem = problem
        self._gains, _ = riccati_gains(problem)

    @property
    def horizon(self):
        return self.problem.horizon

    @property
    def control_dim(self):
        return self.problem.G.shape[1]

    def plan(self, x0, init=None, rng=None, recurrences=None):
        x = np.asarray(x0, dtype=float)
        useq = np.empty((self.horizon, self.control_dim))
        for i, K in enumerate(self._gains):
            u = -K @ x
            useq[i] = u
            x = self.problem.F @ x + self.problem.G @ u
        return useq


class ILQRPlanner:
    """Planner-protocol wrapper around ilqr_solve (warm-startable)."""

    warm_recurrences = None

    def __init__(self, dynamics, cost, weight_matrix, horizon,
                 settings: ILQRSettings | None = None):
        self.dynamics = dynamics
        self.cost = cost
        self.weight_matrix = np.atleast_2d(np.asarray(weight_matrix, dtype=float))
        self._horizon = int(horizon)
        self.settings = settings or ILQRSettings()

    @property
    def horizon(self):
        return self._horizon

    @property
    def control_dim(self):
        return self.weight_matrix.shape[0]

    def plan(self, x0, init=None, rng=None, recurrences=None):
        result = ilqr_solve(self.dynamics, self.cost, self.weight_matrix,
                            x0, self._horizon, self.settings, init=init)
        return result.controls
