"""Iterative-QP bilinear MPC, the linearized-nominal baseline and the
closed-loop harness."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bilinear import error_metrics, linearize, nominal_jacobians, step_bilinear
from .edmd import BilinearModel
from .lifting import eval_psi_x
from .plant import (CONTROL_NAMES, N_U, N_X, N_Y, OUTPUT_NAMES, Limits, PlantParams, Reference,
                    output_map, rk4_step)
from .qpsolver import INFEASIBLE, QpProblem, QpSolver

log = logging.getLogger(__name__)

DEFAULT_Q = (10.0, 10.0, 1.0, 1.0, 0.0, 0.0, 10.0, 10.0)
DEFAULT_R = (0.01, 1.0)


@dataclass
class MpcConfig:
    Np: int = 20
    Q: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_Q))
    Q_Np: np.ndarray | None = None  # defaults to 10 Q
    R: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_R))
    iter_max: int = 3
    eps_conv: float = 1e-4
    Ts: float = 0.05
    limits: Limits = field(default_factory=Limits)
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000

    def __post_init__(self):
        self.Q = np.asarray(self.Q, float)
        self.R = np.asarray(self.R, float)
        self.Q_Np = 10.0 * self.Q if self.Q_Np is None else np.asarray(self.Q_Np, float)
        if self.Np < 1 or self.iter_max < 1:
            raise ValueError("Np and iter_max must be at least 1")
        for name in ("Q", "Q_Np", "R"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """E_k y_k + F_k u_k <= l_k for k = 0..Np (F_Np is zero)."""

    E: tuple[np.ndarray, ...]
    F: tuple[np.ndarray, ...]
    l: tuple[np.ndarray, ...]


def build_constraints(lim: Limits, Np: int, n_y: int = N_Y, m: int = N_U) -> ConstraintSet:
    """Input bounds through F and tan_phi, v, jack-knife bounds through E."""
    F_in = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], float)
    E_out = np.zeros((6, n_y))
    E_out[0, 4], E_out[1, 4] = 1, -1
    E_out[2, 5], E_out[3, 5] = 1, -1
    E_out[4, 2], E_out[4, 3] = 1, -1
    E_out[5, 2], E_out[5, 3] = -1, 1
    l_in = np.array([lim.omega_max] * 2 + [lim.a_max] * 2)
    l_out = np.array([lim.tan_phi_max] * 2 + [lim.v_max] * 2 + [lim.dtheta_max] * 2)
    E = np.vstack([np.zeros((4, n_y)), E_out])
    F = np.vstack([F_in, np.zeros((6, m))])
    l = np.concatenate([l_in, l_out])
    Es = [E] * Np + [E_out]
    Fs = [F] * Np + [np.zeros((6, m))]
    ls = [l] * Np + [l_out]
    return ConstraintSet(tuple(Es), tuple(Fs), tuple(ls))


@dataclass
class IterationState:
    """Estimates around which the problem is linearized."""

    z_hat: np.ndarray  # (Np+1, n)
    u_hat: np.ndarray  # (Np, m)
    iteration: int = 0
    shifted: bool = False


@dataclass(frozen=True, eq=False)
class Condensed:
    """Dense QP over stacked input increments plus the maps back to states."""

    qp: QpProblem
    M: np.ndarray      # (Np+1, n, Np*m): dz_k = M_k w + c_k
    c: np.ndarray      # (Np+1, n)
    const: float       # cost at w = 0
    d: np.ndarray      # (Np, n) linearization residuals


def condense_ltv(A_hat, B_hat, d, Cy, y_hat, u_hat, refs, cfg: MpcConfig,
                 cons: ConstraintSet) -> Condensed:
    """Eliminate the state increments of a time-varying affine model.

    dz_{k+1} = A_hat[k] dz_k + B_hat[k] du_k + d[k],  dz_0 = 0,
    dy_k = Cy[k] dz_k.
    """
    Np = cfg.Np
    n = A_hat[0].shape[0]
    m = B_hat[0].shape[1]
    nw = Np * m
    M = np.zeros((Np + 1, n, nw))
    c = np.zeros((Np + 1, n))
    for k in range(Np):
        M[k + 1] = A_hat[k] @ M[k]
        M[k + 1][:, k * m:(k + 1) * m] += B_hat[k]
        c[k + 1] = A_hat[k] @ c[k] + d[k]

    P = np.zeros((nw, nw))
    q = np.zeros(nw)
    const = 0.0
    rows_G, rows_h = [], []
    for k in range(Np + 1):
        Qk = cfg.Q_Np if k == Np else cfg.Q
        S = Cy[k] @ M[k]                                  # (n_y, nw)
        e = y_hat[k] + Cy[k] @ c[k] - refs[k]
        QS = Qk @ S
        P += S.T @ QS
        q += QS.T @ e
        const += float(e @ Qk @ e)

        E, F, l = cons.E[k], cons.F[k], cons.l[k]
        Gk = E @ S
        if k < Np:
            Gk[:, k * m:(k + 1) * m] += F
            rhs = l - E @ (y_hat[k] + Cy[k] @ c[k]) - F @ u_hat[k]
        else:
            rhs = l - E @ (y_hat[k] + Cy[k] @ c[k])
        live = np.any(Gk != 0.0, axis=1)  # rows independent of w are fixed by the measurement
        rows_G.append(Gk[live])
        rows_h.append(rhs[live])
    for k in range(Np):
        sl = slice(k * m, (k + 1) * m)
        P[sl, sl] += cfg.R
        q[sl] += cfg.R @ u_hat[k]
        const += float(u_hat[k] @ cfg.R @ u_hat[k])
    P = 2.0 * P
    P = 0.5 * (P + P.T)
    qp = QpProblem(P, 2.0 * q, np.vstack(rows_G), np.concatenate(rows_h))
    return Condensed(qp, M, c, const, np.asarray(d))


def condense(model: BilinearModel, state: IterationState, refs, cfg: MpcConfig,
             cons: ConstraintSet) -> Condensed:
    """Condensed QP for the bilinear model linearized along (z_hat, u_hat)."""
    Np = cfg.Np
    if state.z_hat.shape != (Np + 1, model.N) or state.u_hat.shape != (Np, model.m):
        raise ValueError("iteration state does not match the horizon/model")
    if np.shape(refs) != (Np + 1, model.n_y):
        raise ValueError("need Np+1 reference outputs")
    A_hat, B_hat, d = [], [], []
    for k in range(Np):
        lin = linearize(model, state.z_hat[k], state.u_hat[k])
        A_hat.append(lin.A_hat)
        B_hat.append(lin.B_hat)
        # residual of the linearized step around the estimate, using plain A
        d.append(model.A @ state.z_hat[k] + lin.B_hat @ state.u_hat[k] - state.z_hat[k + 1])
    Cy = [model.C] * (Np + 1)
    y_hat = state.z_hat @ model.C.T
    return condense_ltv(A_hat, B_hat, d, Cy, y_hat, state.u_hat, refs, cfg, cons)


def unwrap_reference(refs, theta_now) -> np.ndarray:
    """Shift reference heading channels by multiples of 2 pi towards the state."""
    refs = np.array(refs, float, copy=True)
    for ch, th in ((2, theta_now[0]), (3, theta_now[1])):
        refs[:, ch] += 2.0 * math.pi * np.round((th - refs[0, ch]) / (2.0 * math.pi))
    return refs


def shift_inputs(u_star: np.ndarray) -> np.ndarray:
    """u_k <- u*_{k+1}, last input repeated."""
    return np.vstack([u_star[1:], u_star[-1:]])


def shift_states(z_star: np.ndarray) -> np.ndarray:
    return np.vstack([z_star[1:], z_star[-1:]])


@dataclass
class StepDiagnostics:
    iterations: int = 0
    du_norms: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    merit: list = field(default_factory=list)  # cost of the linearized problem at w = 0
    cost: float = float("nan")
    predicted_violation: float = 0.0
    fallback: bool = False
    solve_time: float = 0.0

    @property
    def last_status(self) -> str:
        return self.qp_status[-1] if self.qp_status else "none"


def _predicted_violation(y_pred: np.ndarray, cons: ConstraintSet) -> float:
    """Worst output-constraint excess of predicted outputs for k >= 1."""
    worst = -np.inf
    for k in range(1, len(y_pred)):
        E, F, l = cons.E[k], cons.F[k], cons.l[k]
        rows = np.any(E != 0.0, axis=1) & ~np.any(F != 0.0, axis=1)
        if np.any(rows):
            worst = max(worst, float(np.max(E[rows] @ y_pred[k] - l[rows])))
    return worst


def _iterate(linearize_fn, state: IterationState, refs, cfg: MpcConfig, cons: ConstraintSet,
             solver: QpSolver, y_of, diag: StepDiagnostics):
    """Inner loop shared by both controllers; updates `state` in place."""
    m = state.u_hat.shape[1]
    for it in range(cfg.iter_max):
        cond = linearize_fn(state)
        diag.merit.append(cond.const)
        sol = solver.solve(cond.qp)
        diag.qp_status.append(sol.status)
        if sol.status == INFEASIBLE:
            diag.fallback = True
            break
        w = sol.w
        du = w.reshape(cfg.Np, m)
        dz = np.einsum("kaw,w->ka", cond.M, w) + cond.c
        state.z_hat = state.z_hat + dz
        state.u_hat = state.u_hat + du
        state.iteration += 1
        diag.iterations += 1
        diag.cost = cond.qp.objective(w) + cond.const
        norm = float(np.max(np.abs(du)))
        diag.du_norms.append(norm)
        if norm <= cfg.eps_conv:
            break
    if not diag.fallback:
        diag.predicted_violation = _predicted_violation(y_of(state), cons)


def _clamp(u, lim: Limits) -> np.ndarray:
    return np.clip(u, -lim.u_max, lim.u_max)


# --------------------------------------------------------------------------
# K-BMPC

def rollout_bilinear(model: BilinearModel, z0, U) -> np.ndarray:
    Z = np.empty((len(U) + 1, model.N))
    Z[0] = z0
    for k, u in enumerate(U):
        Z[k + 1] = step_bilinear(model, Z[k], u)
    return Z


def initial_state_kbmpc(model: BilinearModel, x0, u0, Np: int) -> IterationState:
    """u_hat = u0 repeated, z_hat = psi_x(x0) repeated."""
    z0 = eval_psi_x(model.basis, x0)
    return IterationState(np.tile(z0, (Np + 1, 1)), np.tile(np.asarray(u0, float), (Np, 1)))


def kbmpc_step(model: BilinearModel, x0, refs, cfg: MpcConfig, cons: ConstraintSet,
               warm: IterationState | None = None, solver: QpSolver | None = None,
               u_prev=None):
    """One receding-horizon step; returns (u_applied, next_warm, diagnostics)."""
    t0 = time.perf_counter()
    refs = np.asarray(refs, float)
    if refs.shape != (cfg.Np + 1, model.n_y):
        raise ValueError("need Np+1 reference outputs")
    solver = solver or QpSolver(tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    x0 = np.asarray(x0, float)
    z0 = eval_psi_x(model.basis, x0)
    if warm is None:
        state = initial_state_kbmpc(model, x0, np.zeros(model.m) if u_prev is None else u_prev, cfg.Np)
    elif warm.shifted:
        state = IterationState(rollout_bilinear(model, z0, warm.u_hat), warm.u_hat.copy())
    else:
        state = IterationState(warm.z_hat.copy(), warm.u_hat.copy())
    state.z_hat[0] = z0
    refs = unwrap_reference(refs, x0[2:4])

    diag = StepDiagnostics()
    _iterate(lambda s: condense(model, s, refs, cfg, cons), state, refs, cfg, cons, solver,
             lambda s: s.z_hat @ model.C.T, diag)
    if diag.fallback:
        u = _clamp(np.zeros(model.m) if u_prev is None else u_prev, cfg.limits)
    else:
        u = _clamp(state.u_hat[0], cfg.limits)
    nxt = IterationState(shift_states(state.z_hat), shift_inputs(state.u_hat), shifted=True)
    diag.solve_time = time.perf_counter() - t0
    return u, nxt, diag


# --------------------------------------------------------------------------
# LMPC: nominal model, Jacobian-linearized and Euler-discretized each iteration

def euler_rollout(jac, x0, U, Ts) -> np.ndarray:
    X = np.empty((len(U) + 1, N_X))
    X[0] = x0
    for k, u in enumerate(U):
        F, _, _ = jac.dynamics(X[k], u)
        X[k + 1] = X[k] + Ts * F
    return X


def condense_lmpc(params: PlantParams, state: IterationState, refs, cfg: MpcConfig,
                  cons: ConstraintSet) -> Condensed:
    jac = nominal_jacobians(params)
    Ts = cfg.Ts
    F, Jx, Ju = jac.dynamics(state.z_hat[:-1], state.u_hat)
    A_hat = np.eye(N_X)[None] + Ts * Jx
    B_hat = Ts * Ju
    d = state.z_hat[:-1] + Ts * F - state.z_hat[1:]
    y_hat, Jh = jac.output(state.z_hat)
    return condense_ltv(A_hat, B_hat, d, Jh, y_hat, state.u_hat, refs, cfg, cons)


def lmpc_step(params: PlantParams, x0, refs, cfg: MpcConfig, cons: ConstraintSet,
              warm: IterationState | None = None, solver: QpSolver | None = None,
              u_prev=None):
    """Same machinery as kbmpc_step with the nominal plant as predictor."""
    t0 = time.perf_counter()
    refs = np.asarray(refs, float)
    if refs.shape != (cfg.Np + 1, N_Y):
        raise ValueError("need Np+1 reference outputs")
    solver = solver or QpSolver(tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    jac = nominal_jacobians(params)
    x0 = np.asarray(x0, float)
    if warm is None:
        u0 = np.zeros(N_U) if u_prev is None else np.asarray(u_prev, float)
        state = IterationState(np.tile(x0, (cfg.Np + 1, 1)), np.tile(u0, (cfg.Np, 1)))
    elif warm.shifted:
        state = IterationState(euler_rollout(jac, x0, warm.u_hat, cfg.Ts), warm.u_hat.copy())
    else:
        state = IterationState(warm.z_hat.copy(), warm.u_hat.copy())
    state.z_hat[0] = x0
    refs = unwrap_reference(refs, x0[2:4])

    diag = StepDiagnostics()
    _iterate(lambda s: condense_lmpc(params, s, refs, cfg, cons), state, refs, cfg, cons,
             solver, lambda s: jac.output(s.z_hat)[0], diag)
    if diag.fallback:
        u = _clamp(np.zeros(N_U) if u_prev is None else u_prev, cfg.limits)
    else:
        u = _clamp(state.u_hat[0], cfg.limits)
    nxt = IterationState(shift_states(state.z_hat), shift_inputs(state.u_hat), shifted=True)
    diag.solve_time = time.perf_counter() - t0
    return u, nxt, diag


# --------------------------------------------------------------------------
# controllers and closed loop

class Controller:
    """Stateful wrapper holding the warm start between steps."""

    name = "controller"

    def __init__(self, cfg: MpcConfig, cons: ConstraintSet | None = None):
        self.cfg = cfg
        self.cons = cons or build_constraints(cfg.limits, cfg.Np)
        self.solver = QpSolver(tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
        self.warm: IterationState | None = None
        self.u_prev = np.zeros(N_U)

    def reset(self) -> None:
        self.warm = None
        self.u_prev = np.zeros(N_U)

    def _step(self, x0, refs):
        raise NotImplementedError

    def step(self, x0, refs):
        u, self.warm, diag = self._step(x0, refs)
        self.u_prev = u
        return u, diag


class KbmpcController(Controller):
    name = "kbmpc"

    def __init__(self, model: BilinearModel, cfg: MpcConfig, cons: ConstraintSet | None = None):
        super().__init__(cfg, cons)
        self.model = model

    def _step(self, x0, refs):
        return kbmpc_step(self.model, x0, refs, self.cfg, self.cons, self.warm,
                          self.solver, self.u_prev)


class LmpcController(Controller):
    name = "lmpc"

    def __init__(self, params: PlantParams, cfg: MpcConfig, cons: ConstraintSet | None = None):
        super().__init__(cfg, cons)
        self.params = params.nominal()

    def _step(self, x0, refs):
        return lmpc_step(self.params, x0, refs, self.cfg, self.cons, self.warm,
                         self.solver, self.u_prev)


@dataclass(frozen=True, eq=False)
class TrackingLog:
    t: np.ndarray
    states: np.ndarray     # (K, 6) state at each control instant
    outputs: np.ndarray    # (K, 8)
    controls: np.ndarray   # (K, 2) applied input
    refs: np.ndarray       # (K, 8) reference at the same instant
    cost: np.ndarray
    inner_iters: np.ndarray
    solve_time_us: np.ndarray
    qp_status: list
    predicted_violation: np.ndarray
    controller: str = ""
    diagnostics: list = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        return error_metrics(self.refs, self.outputs)


def closed_loop(params: PlantParams, controller: Controller, reference: Reference,
                cfg: MpcConfig, x_init=None, steps: int | None = None) -> TrackingLog:
    """Run the controller against the true (slip) plant along the reference."""
    if len(reference) < 1:
        raise ValueError("reference is empty")
    if steps is None:
        steps = len(reference)
    x = np.array(reference.outputs[0, :N_X] if x_init is None else x_init, float)
    controller.reset()
    K = steps
    states = np.empty((K, N_X))
    outputs = np.empty((K, N_Y))
    controls = np.empty((K, N_U))
    refs = np.empty((K, N_Y))
    cost = np.empty(K)
    iters = np.empty(K, dtype=int)
    times = np.empty(K)
    pviol = np.empty(K)
    status = []
    diags = []
    for k in range(K):
        window = reference.window(k, cfg.Np + 1)
        try:
            u, diag = controller.step(x, window)
            st = "fallback" if diag.fallback else diag.last_status
        except (ValueError, np.linalg.LinAlgError) as exc:  # keep simulating with held input
            log.warning("controller failed at step %d: %s", k, exc)
            u, diag = controller.u_prev, StepDiagnostics(fallback=True)
            st = "error"
        states[k] = x
        outputs[k] = output_map(x, params)
        controls[k] = u
        refs[k] = window[0]
        cost[k] = diag.cost
        iters[k] = diag.iterations
        times[k] = diag.solve_time * 1e6
        pviol[k] = diag.predicted_violation
        status.append(st)
        diags.append(diag)
        x = rk4_step(x, u, params, cfg.Ts)
    return TrackingLog(np.arange(K) * cfg.Ts, states, outputs, controls, refs, cost, iters,
                       times, status, pviol, controller.name, diags)


TRACKING_HEADER = (("t",) + OUTPUT_NAMES + CONTROL_NAMES + tuple(f"ref_{n}" for n in OUTPUT_NAMES)
                   + ("cost", "inner_iters", "solve_time_us", "qp_status"))


def save_tracking_csv(lg: TrackingLog, path, comment: str | None = None,
                      timing: bool = True) -> None:
    """Write the log; with timing=False the solve-time column is zeroed."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACKING_HEADER)
    for k in range(len(lg.t)):
        nums = ([lg.t[k]] + list(lg.outputs[k]) + list(lg.controls[k]) + list(lg.refs[k])
                + [lg.cost[k]])
        w.writerow([repr(float(v)) for v in nums]
                   + [int(lg.inner_iters[k]), repr(float(lg.solve_time_us[k]) if timing else 0.0),
                      lg.qp_status[k]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
