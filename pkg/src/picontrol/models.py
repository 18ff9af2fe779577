"""Differentiable dynamics and cost models.

Model contract (duck-typed, shared by everything in this module):

* ``num_params`` / ``get_params()`` / ``set_params(vec)`` — flat float64
  parameter access, always copied.
* dynamics: ``forward(x, v) -> x_next`` and
  ``vjp(x, v, cot) -> (x_bar, v_bar, param_bar)``.
* state costs: ``running(x) -> q`` / ``terminal(x) -> phi`` and the
  matching ``running_vjp`` / ``terminal_vjp(x, cot) -> (x_bar, param_bar)``.

All evaluations are batched: states (B, n), controls (B, m), scalar costs
(B,).  Cotangents have the output's shape; ``param_bar`` is summed over
the batch.  VJPs rebuild layer activations from their (taped) inputs,
which is bit-exact because the inputs are the same floats.
"""

import numpy as np

from .core import ParameterError, RngStream, ShapeError


class LinearDynamics:
    """x' = F x + G v."""

    def __init__(self, F, G):
        self.F = np.array(F, dtype=float)
        self.G = np.array(G, dtype=float)
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise ShapeError(f"F must be square, got {self.F.shape}")
        if self.G.ndim != 2 or self.G.shape[0] != self.F.shape[0]:
            raise ShapeError(f"G must be (n, m) with n={self.F.shape[0]}, got {self.G.shape}")

    @property
    def state_dim(self):
        return self.F.shape[0]

    @property
    def control_dim(self):
        return self.G.shape[1]

    @property
    def num_params(self):
        return self.F.size + self.G.size

    def get_params(self):
        return np.concatenate([self.F.ravel(), self.G.ravel()])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {vec.shape}")
        nf = self.F.size
        self.F = vec[:nf].reshape(self.F.shape).copy()
        self.G = vec[nf:].reshape(self.G.shape).copy()

    def forward(self, x, v):
        return x @ self.F.T + v @ self.G.T

    def vjp(self, x, v, cot):
        x_bar = cot @ self.F
        v_bar = cot @ self.G
        f_bar = cot.T @ x
        g_bar = cot.T @ v
        return x_bar, v_bar, np.concatenate([f_bar.ravel(), g_bar.ravel()])

    def jacobian(self, x, v):
        B = x.shape[0]
        A = np.broadcast_to(self.F, (B,) + self.F.shape)
        Bm = np.broadcast_to(self.G, (B,) + self.G.shape)
        return A, Bm

    def config(self):
        return {"n": self.state_dim, "m": self.control_dim}

    @classmethod
    def from_config(cls, cfg):
        return cls(np.zeros((cfg["n"], cfg["n"])), np.zeros((cfg["n"], cfg["m"])))


class QuadraticCost:
    """q(x) = x'Qx / 2, shared as running and terminal cost."""

    def __init__(self, Q):
        self.Q = np.array(Q, dtype=float)
        if self.Q.ndim != 2 or self.Q.shape[0] != self.Q.shape[1]:
            raise ShapeError(f"Q must be square, got {self.Q.shape}")

    @property
    def state_dim(self):
        return self.Q.shape[0]

    @property
    def num_params(self):
        return self.Q.size

    def get_params(self):
        return self.Q.ravel().copy()

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {vec.shape}")
        self.Q = vec.reshape(self.Q.shape).copy()

    def running(self, x):
        return 0.5 * np.einsum("bi,ij,bj->b", x, self.Q, x)

    terminal = running

    def running_vjp(self, x, cot):
        sym = 0.5 * (self.Q + self.Q.T)
        x_bar = cot[:, None] * (x @ sym.T)
        q_bar = 0.5 * np.einsum("b,bi,bj->ij", cot, x, x)
        return x_bar, q_bar.ravel()

    terminal_vjp = running_vjp

    def gradient(self, x):
        return x @ (0.5 * (self.Q + self.Q.T)).T

    def hessian(self, x):
        sym = 0.5 * (self.Q + self.Q.T)
        return np.broadcast_to(sym, (x.shape[0],) + sym.shape)

    def config(self):
        return {"n": self.state_dim}

    @classmethod
    def from_config(cls, cfg):
        return cls(np.zeros((cfg["n"], cfg["n"])))


def _mlp_init(rng: RngStream, shapes):
    gen = rng.generator()
    chunks = []
    for fan_out, fan_in in shapes:
        chunks.append(gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)).ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


class MLPDynamics:
    """Pendulum dynamics network.

    A single tanh hidden layer maps (theta, theta_dot, torque) to a scalar
    angular acceleration; the state advances by one explicit Euler step:
    theta' = theta + dt * theta_dot, theta_dot' = theta_dot + dt * accel.
    Angles are consumed raw; wrapping is the environment's business.
    """

    def __init__(self, hidden=12, dt=0.1, init_rng: RngStream | None = None):
        self.hidden = int(hidden)
        self.dt = float(dt)
        self.W1 = np.zeros((self.hidden, 3))
        self.b1 = np.zeros(self.hidden)
        self.W2 = np.zeros((1, self.hidden))
        self.b2 = np.zeros(1)
        if init_rng is not None:
            self.set_params(_mlp_init(init_rng, [(self.hidden, 3), (1, self.hidden)]))

    state_dim = 2
    control_dim = 1

    @property
    def num_params(self):
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def get_params(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {vec.shape}")
        h = self.hidden
        self.W1 = vec[:3 * h].reshape(h, 3).copy()
        self.b1 = vec[3 * h:4 * h].copy()
        self.W2 = vec[4 * h:5 * h].reshape(1, h).copy()
        self.b2 = vec[5 * h:5 * h + 1].copy()

    def _accel(self, x, v):
        z = np.concatenate([x, v], axis=1)
        h = np.tanh(z @ self.W1.T + self.b1)
        return z, h, (h @ self.W2.T + self.b2)[:, 0]

    def forward(self, x, v):
        _, _, accel = self._accel(x, v)
        out = np.empty_like(x)
        out[:, 0] = x[:, 0] + self.dt * x[:, 1]
        out[:, 1] = x[:, 1] + self.dt * accel
        return out

    def vjp(self, x, v, cot):
        z, h, _ = self._accel(x, v)
        a_bar = self.dt * cot[:, 1]
        h_bar = a_bar[:, None] @ self.W2
        p_bar = h_bar * (1.0 - h * h)
        z_bar = p_bar @ self.W1
        x_bar = np.empty_like(x)
        x_bar[:, 0] = cot[:, 0] + z_bar[:, 0]
        x_bar[:, 1] = self.dt * cot[:, 0] + cot[:, 1] + z_bar[:, 1]
        v_bar = z_bar[:, 2:3].copy()
        w1_bar = p_bar.T @ z
        b1_bar = p_bar.sum(axis=0)
        w2_bar = (a_bar[:, None] * h).sum(axis=0)[None, :]
        b2_bar = np.array([a_bar.sum()])
        param_bar = np.concatenate([w1_bar.ravel(), b1_bar, w2_bar.ravel(), b2_bar])
        return x_bar, v_bar, param_bar

    def config(self):
        return {"hidden": self.hidden, "dt": self.dt}

    @classmethod
    def from_config(cls, cfg):
        return cls(hidden=cfg["hidden"], dt=cfg["dt"])


class MLPCost:
    """Pendulum cost network: q = ||g(theta, theta_dot)||^2 >= 0.

    One tanh hidden layer feeding a linear output vector; the squared
    norm keeps the cost non-negative by construction.  Terminal cost
    reuses the same network.
    """

    def __init__(self, hidden=12, outputs=12, init_rng: RngStream | None = None):
        self.hidden = int(hidden)
        self.outputs = int(outputs)
        self.W1 = np.zeros((self.hidden, 2))
        self.b1 = np.zeros(self.hidden)
        self.W2 = np.zeros((self.outputs, self.hidden))
        self.b2 = np.zeros(self.outputs)
        if init_rng is not None:
            self.set_params(_mlp_init(init_rng, [(self.hidden, 2), (self.outputs, self.hidden)]))

    state_dim = 2

    @property
    def num_params(self):
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def get_params(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {vec.shape}")
        h, o = self.hidden, self.outputs
        self.W1 = vec[:2 * h].reshape(h, 2).copy()
        self.b1 = vec[2 * h:3 * h].copy()
        self.W2 = vec[3 * h:3 * h + o * h].reshape(o, h).copy()
        self.b2 = vec[3 * h + o * h:].copy()

    def _net(self, x):
        h = np.tanh(x @ self.W1.T + self.b1)
        return h, h @ self.W2.T + self.b2

    def running(self, x):
        _, out = self._net(x)
        return np.einsum("bo,bo->b", out, out)

    terminal = running

    def running_vjp(self, x, cot):
        h, out = self._net(x)
        out_bar = 2.0 * out * cot[:, None]
        h_bar = out_bar @ self.W2
        p_bar = h_bar * (1.0 - h * h)
        x_bar = p_bar @ self.W1
        w1_bar = p_bar.T @ x
        b1_bar = p_bar.sum(axis=0)
        w2_bar = out_bar.T @ h
        b2_bar = out_bar.sum(axis=0)
        param_bar = np.concatenate([w1_bar.ravel(), b1_bar, w2_bar.ravel(), b2_bar])
        return x_bar, param_bar

    terminal_vjp = running_vjp

    def config(self):
        return {"hidden": self.hidden, "outputs": self.outputs}

    @classmethod
    def from_config(cls, cfg):
        return cls(hidden=cfg["hidden"], outputs=cfg["outputs"])


class PendulumTeacherCost:
    """Ground-truth swing-up cost q = phi = (1 + cos theta)^2 + theta_dot^2.

    Parameter-free; zero exactly at the upright states (+-pi, 0).  Also
    exposes analytic gradient and Hessian for trajectory optimizers.
    """

    state_dim = 2
    num_params = 0

    def get_params(self):
        return np.zeros(0)

    def set_params(self, vec):
        if np.asarray(vec).size != 0:
            raise ShapeError("teacher cost has no parameters")

    def running(self, x):
        return (1.0 + np.cos(x[:, 0])) ** 2 + x[:, 1] ** 2

    terminal = running

    def running_vjp(self, x, cot):
        x_bar = np.empty_like(x)
        x_bar[:, 0] = cot * (-2.0 * np.sin(x[:, 0]) * (1.0 + np.cos(x[:, 0])))
        x_bar[:, 1] = cot * 2.0 * x[:, 1]
        return x_bar, np.zeros(0)

    terminal_vjp = running_vjp

    def gradient(self, x):
        g = np.empty_like(x)
        g[:, 0] = -2.0 * np.sin(x[:, 0]) * (1.0 + np.cos(x[:, 0]))
        g[:, 1] = 2.0 * x[:, 1]
        return g

    def hessian(self, x):
        B = x.shape[0]
        H = np.zeros((B, 2, 2))
        th = x[:, 0]
        H[:, 0, 0] = -2.0 * np.cos(th) - 2.0 * np.cos(2.0 * th)
        H[:, 1, 1] = 2.0
        return H

    def config(self):
        return {}

    @classmethod
    def from_config(cls, cfg):
        return cls()


class ControlCostWeight:
    """Positive-definite control weight R = L L' via a Cholesky factor.

    The strictly-lower entries of L are stored raw; diagonal entries are
    stored as logs, so R stays symmetric positive definite under any
    finite parameter update.  Parameter order is row-major over the lower
    triangle.
    """

    def __init__(self, dim, params=None):
        self.dim = int(dim)
        self._rows, self._cols = np.tril_indices(self.dim)
        self._diag_mask = self._rows == self._cols
        if params is None:
            params = np.zeros(self._rows.size)  # L = I
        self._params = np.asarray(params, dtype=float).copy()
        if self._params.shape != (self._rows.size,):
            raise ShapeError(
                f"expected {self._rows.size} factor parameters, got {self._params.shape}")

    @classmethod
    def from_matrix(cls, R):
        R = np.atleast_2d(np.asarray(R, dtype=float))
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError as err:
            raise ParameterError(f"weight matrix is not positive definite: {err}")
        obj = cls(R.shape[0])
        p = L[obj._rows, obj._cols]
        p[obj._diag_mask] = np.log(p[obj._diag_mask])
        obj._params = p
        return obj

    @property
    def num_params(self):
        return self._params.size

    def get_params(self):
        return self._params.copy()

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != self._params.shape:
            raise ShapeError(f"expected {self._params.size} parameters, got {vec.shape}")
        self._params = vec.copy()

    def factor(self):
        L = np.zeros((self.dim, self.dim))
        vals = self._params.copy()
        vals[self._diag_mask] = np.exp(vals[self._diag_mask])
        L[self._rows, self._cols] = vals
        return L

    def matrix(self):
        L = self.factor()
        return L @ L.T

    def vjp_matrix(self, r_bar):
        """Pull a cotangent on R back to the stored factor parameters."""
        L = self.factor()
        l_bar = (r_bar + r_bar.T) @ L
        p_bar = l_bar[self._rows, self._cols]
        p_bar[self._diag_mask] *= L[self._rows, self._cols][self._diag_mask]
        return p_bar

    def config(self):
        return {"m": self.dim}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["m"])


def modified_running_cost(q_val, u, du, R, nu):
    """Running cost with the control and noise coupling terms.

    q + u'Ru/2 + ((1 - 1/nu)/2) du'R du + u'R du, for one (u, du) pair.
    """
    u = np.asarray(u, dtype=float).ravel()
    du = np.asarray(du, dtype=float).ravel()
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return (q_val + 0.5 * (u @ R @ u)
            + 0.5 * (1.0 - 1.0 / nu) * (du @ R @ du) + u @ R @ du)


def control_penalty(useq, noise, R, nu):
    """Control-dependent part of the modified running cost, batched.

    Args:
        useq: (N, m) nominal plan.
        noise: (K, N, m) perturbations.
        R: (m, m) positive-definite weight.
        nu: coupling knob; the du'R du coefficient is (1 - 1/nu)/2.

    Returns:
        (K, N) array: u'Ru/2 + (1-1/nu)/2 du'Rdu + u'Rdu per (k, i).
    """
    half_u = 0.5 * np.einsum("im,mp,ip->i", useq, R, useq)
    quad_noise = 0.5 * (1.0 - 1.0 / nu) * np.einsum("kim,mp,kip->ki", noise, R, noise)
    cross = np.einsum("im,mp,kip->ki", useq, R, noise)
    return half_u[None, :] + quad_noise + cross


MODEL_TYPES = {
    "linear_dynamics": LinearDynamics,
    "quadratic_cost": QuadraticCost,
    "mlp_dynamics": MLPDynamics,
    "mlp_cost": MLPCost,
    "pendulum_teacher_cost": PendulumTeacherCost,
    "control_weight": ControlCostWeight,
}


def model_type_name(model):
    for name, cls in MODEL_TYPES.items():
        if type(model) is cls:
            return name
    raise ShapeError(f"unregistered model type {type(model).__name__}")
