"""Bilinear prediction, linearization and the open-loop predictor variants."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import lie
from .edmd import BilinearModel
from .lifting import eval_psi_x
from .plant import N_U, N_X, N_Y, PlantParams, output_map, rk4_step_batch, tractor_trailer_system

VARIANTS = ("KBM", "LKBM", "NM", "LLNM")
CHANNELS = ("e_x0y0", "e_x1y1", "e_theta0", "e_theta1")


def step_bilinear(model: BilinearModel, z, u) -> np.ndarray:
    """A z + B u + sum_j u_j H_j z for one point or rows of a batch."""
    z = np.asarray(z, float)
    u = np.asarray(u, float)
    if z.ndim == 1:
        out = model.A @ z + model.B @ u
        for j in range(model.m):
            out += u[j] * (model.H[j] @ z)
        return out
    out = z @ model.A.T + u @ model.B.T
    for j in range(model.m):
        out += u[:, j:j + 1] * (z @ model.H[j].T)
    return out


@dataclass(frozen=True, eq=False)
class LinearizedStep:
    """z+ ~= A_hat z + B_hat u + residual_base around (z_hat, u_hat)."""

    A_hat: np.ndarray
    B_hat: np.ndarray
    residual_base: np.ndarray

    def step(self, z, u) -> np.ndarray:
        return self.A_hat @ z + self.B_hat @ u + self.residual_base


def linearize(model: BilinearModel, z_hat, u_hat) -> LinearizedStep:
    z_hat = np.asarray(z_hat, float)
    u_hat = np.asarray(u_hat, float)
    A_hat = model.A + np.tensordot(u_hat, model.H, axes=1)
    Hz = model.H @ z_hat  # (m, N)
    B_hat = model.B + Hz.T
    return LinearizedStep(A_hat, B_hat, -(u_hat @ Hz))


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, float)
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


# --------------------------------------------------------------------------
# nominal-model Jacobians through the derivative engine

@dataclass(frozen=True, eq=False)
class NominalJacobians:
    """Evaluates F(x,u), dF/dx, dF/du and h(x), dh/dx of the nominal plant."""

    params: PlantParams
    dyn: lie.Program
    out: lie.Program

    def dynamics(self, x, u):
        """(F, Jx, Ju) at one point or a batch of (x, u)."""
        xu = np.concatenate([np.atleast_2d(x), np.atleast_2d(u)], axis=1)
        v = self.dyn(xu)
        F = v[:, :N_X]
        Jx = v[:, N_X:N_X + N_X * N_X].reshape(-1, N_X, N_X)
        Ju = v[:, N_X + N_X * N_X:].reshape(-1, N_X, N_U)
        if np.ndim(x) == 1:
            return F[0], Jx[0], Ju[0]
        return F, Jx, Ju

    def output(self, x):
        """(h, Jh) at one point or a batch."""
        v = self.out(np.atleast_2d(x))
        h = v[:, :N_Y]
        Jh = v[:, N_Y:].reshape(-1, N_Y, N_X)
        if np.ndim(x) == 1:
            return h[0], Jh[0]
        return h, Jh


@lru_cache(maxsize=8)
def nominal_jacobians(params: PlantParams) -> NominalJacobians:
    nominal = params.nominal()
    sys = tractor_trailer_system(nominal)
    u_vars = [lie.var(N_X + j) for j in range(N_U)]
    rhs = sys.rhs_exprs(u_vars)
    J = lie.jacobian_fields(rhs, N_X + N_U)
    dyn = lie.Program(rhs + [J[i][j] for i in range(N_X) for j in range(N_X)]
                      + [J[i][N_X + j] for i in range(N_X) for j in range(N_U)])
    h = [f.expr for f in sys.output]
    Jh = lie.jacobian_fields(h, N_X)
    out = lie.Program(h + [Jh[i][j] for i in range(N_Y) for j in range(N_X)])
    return NominalJacobians(nominal, dyn, out)


# --------------------------------------------------------------------------
# open-loop predictors

def predict_batch(variant: str, X0, controls, model: BilinearModel | None,
                  params: PlantParams, Ts: float) -> np.ndarray:
    """Outputs of shape (R, K+1, 8) for R initial states and (R, K, 2) inputs."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    X0 = np.atleast_2d(np.asarray(X0, float))
    U = np.asarray(controls, float).reshape(X0.shape[0], -1, N_U)
    R, K, _ = U.shape
    nominal = params.nominal()
    out = np.empty((R, K + 1, N_Y))

    if variant in ("KBM", "LKBM"):
        if model is None or model.basis is None:
            raise ValueError(f"{variant} needs a fitted model with its basis")
        Z = eval_psi_x(model.basis, X0)
        out[:, 0] = Z @ model.C.T
        if variant == "KBM":
            for k in range(K):
                Z = step_bilinear(model, Z, U[:, k])
                out[:, k + 1] = Z @ model.C.T
        else:
            # bilinear term frozen at z0: z+ = A z + (B + [H_1 z0, ..., H_m z0]) u
            Hz = np.einsum("jab,rb->rja", model.H, Z)
            B_hat = model.B[None] + Hz.transpose(0, 2, 1)
            for k in range(K):
                Z = Z @ model.A.T + np.einsum("rab,rb->ra", B_hat, U[:, k])
                out[:, k + 1] = Z @ model.C.T
        return out

    if variant == "NM":
        X = X0.copy()
        out[:, 0] = output_map(X, nominal)
        for k in range(K):
            X = rk4_step_batch(X, U[:, k], nominal, 1.0, 1.0, Ts)
            out[:, k + 1] = output_map(X, nominal)
        return out

    # LLNM: forward Euler of the Jacobian linearization frozen at (x0, u0)
    jac = nominal_jacobians(params)
    F0, Jx, Ju = jac.dynamics(X0, U[:, 0])
    X = X0.copy()
    out[:, 0] = output_map(X, nominal)
    for k in range(K):
        dx = F0 + np.einsum("rab,rb->ra", Jx, X - X0) + np.einsum("rab,rb->ra", Ju, U[:, k] - U[:, 0])
        X = X + Ts * dx
        out[:, k + 1] = output_map(X, nominal)
    return out


def predict(variant: str, init, controls, model: BilinearModel | None,
            params: PlantParams, Ts: float) -> np.ndarray:
    """Single-rollout outputs of shape (K+1, 8); row 0 is the initial output."""
    return predict_batch(variant, np.asarray(init, float)[None], np.asarray(controls, float)[None],
                         model, params, Ts)[0]


def truth_batch(X0, controls, params: PlantParams, mu, kappa, Ts: float) -> np.ndarray:
    """Outputs of the slip plant, shape (R, K+1, 8)."""
    X = np.atleast_2d(np.asarray(X0, float)).copy()
    U = np.asarray(controls, float).reshape(X.shape[0], -1, N_U)
    out = np.empty((X.shape[0], U.shape[1] + 1, N_Y))
    out[:, 0] = output_map(X, params)
    for k in range(U.shape[1]):
        X = rk4_step_batch(X, U[:, k], params, mu, kappa, Ts)
        out[:, k + 1] = output_map(X, params)
    return out


def step_errors(truth, pred) -> np.ndarray:
    """Per-sample errors (..., 4) in CHANNELS order."""
    truth = np.asarray(truth, float)
    pred = np.asarray(pred, float)
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {pred.shape}")
    d = truth - pred
    return np.stack([
        np.hypot(d[..., 0], d[..., 1]),
        np.hypot(d[..., 6], d[..., 7]),
        np.abs(wrap_angle(d[..., 2])),
        np.abs(wrap_angle(d[..., 3])),
    ], axis=-1)


def error_metrics(truth, pred) -> dict[str, float]:
    """Mean position distances and mean wrapped heading errors."""
    e = step_errors(truth, pred).reshape(-1, 4).mean(axis=0)
    return dict(zip(CHANNELS, map(float, e)))


def error_curves(truth, pred) -> np.ndarray:
    """Mean error per horizon step over rollouts, shape (K+1, 4)."""
    e = step_errors(truth, pred)
    return e.reshape(-1, e.shape[-2], 4).mean(axis=0)
