"""Dense strictly convex QP solver.

Solves ``min 1/2 w'Pw + q'w  s.t.  Gw <= h`` with operator splitting (ADMM
with a cached factorization of P + sigma I + rho G'G and residual-balancing
penalty updates).  Once ADMM settles, the active set it suggests is polished
with a few primal-dual active-set corrections on the exact KKT system, which
gives solutions accurate to near machine precision.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from . import _kernels

log = logging.getLogger(__name__)

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


class NotPositiveDefiniteError(ValueError):
    """The cost matrix P is not positive definite."""


@dataclass(frozen=True, eq=False)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, float)
        n = P.shape[0]
        G = np.asarray(self.G, float).reshape(-1, n)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", np.asarray(self.q, float).reshape(n))
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", np.asarray(self.h, float).reshape(G.shape[0]))
        if P.shape != (n, n):
            raise ValueError("P must be square")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(self.q))
                and np.all(np.isfinite(G)) and np.all(np.isfinite(self.h))):
            raise ValueError("QP data must be finite")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(P))):
            raise ValueError("P must be symmetric")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def objective(self, w) -> float:
        w = np.asarray(w, float)
        return float(0.5 * w @ self.P @ w + self.q @ w)


@dataclass
class QpSolution:
    w: np.ndarray
    duals: np.ndarray
    status: str
    kkt: dict = field(default_factory=dict)
    iterations: int = 0
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


def kkt_residuals(qp: QpProblem, w, lam) -> dict[str, float]:
    """Stationarity, primal, dual and complementarity residuals (inf-norms)."""
    w = np.asarray(w, float)
    lam = np.asarray(lam, float)
    slack = qp.G @ w - qp.h
    return {
        "stationarity": float(np.max(np.abs(qp.P @ w + qp.q + qp.G.T @ lam))),
        "primal": float(np.max(slack, initial=0.0)) if slack.size else 0.0,
        "dual": float(np.max(-lam, initial=0.0)) if lam.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)) if lam.size else 0.0,
    }


def _kkt_ok(res: dict, tol: float) -> bool:
    return all(v <= tol for v in res.values())


def _worst(res: dict) -> float:
    return max(res.values()) if res else np.inf


def _solve_eq_qp(P, q, G_act, h_act):
    """Solve the equality-constrained QP on the given rows; None if singular."""
    n = P.shape[0]
    k = G_act.shape[0]
    if k == 0:
        try:
            return np.linalg.solve(P, -q), np.zeros(0)
        except np.linalg.LinAlgError:
            return None
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = G_act.T
    K[n:, :n] = G_act
    rhs = np.concatenate([-q, h_act])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    # one step of iterative refinement
    sol += np.linalg.solve(K, rhs - K @ sol)
    return sol[:n], sol[n:]


def active_set_polish(qp: QpProblem, active, tol: float, max_rounds: int = 60):
    """Primal-dual active-set corrections starting from `active`.

    Returns (w, lam) satisfying KKT to `tol`, or None.
    """
    active = sorted(set(int(i) for i in active))
    P, q, G, h = qp.P, qp.q, qp.G, qp.h
    seen = set()
    drop_tol = 0.1 * tol
    for _ in range(max_rounds):
        key = tuple(active)
        if key in seen:
            return None
        seen.add(key)
        sol = _solve_eq_qp(P, q, G[active], h[active])
        if sol is None:
            if not active:
                return None
            active = active[:-1]
            continue
        w, lam_a = sol
        lam = np.zeros(qp.n_ineq)
        lam[active] = lam_a
        viol = G @ w - h if qp.n_ineq else np.zeros(0)
        neg = int(np.argmin(lam_a)) if active else -1
        if active and lam_a[neg] < -drop_tol:
            del active[neg]
            continue
        if viol.size:
            cand = np.where(np.isin(np.arange(qp.n_ineq), active), -np.inf, viol)
            worst = int(np.argmax(cand))
            if cand[worst] > drop_tol:
                active = sorted(active + [worst])
                continue
        lam = np.maximum(lam, 0.0)
        return w, lam
    return None


@dataclass
class QpSolver:
    """ADMM with active-set polishing.  One instance is single-threaded."""

    tol: float = 1e-6
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 10
    chunk: int = 200
    polish: bool = True
    eps_pinf: float = 1e-5
    backend: object = None

    def _kernels(self):
        return self.backend if self.backend is not None else _kernels

    def solve(self, qp: QpProblem, warm_w=None, warm_lam=None) -> QpSolution:
        n, mc = qp.n, qp.n_ineq
        try:
            cholesky(qp.P, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise NotPositiveDefiniteError("P is not positive definite") from exc

        if mc == 0:
            sol = _solve_eq_qp(qp.P, qp.q, np.zeros((0, n)), np.zeros(0))
            w = sol[0]
            lam = np.zeros(0)
            return QpSolution(w, lam, SOLVED, kkt_residuals(qp, w, lam), 0, False)

        # scaling: unit-norm constraint rows, unit-size cost diagonal
        norms = np.linalg.norm(qp.G, axis=1)
        zero_rows = norms == 0.0
        if np.any(qp.h[zero_rows] < -self.tol):
            w = np.zeros(n)
            lam = np.zeros(mc)
            return QpSolution(w, lam, INFEASIBLE, kkt_residuals(qp, w, lam), 0, False)
        D = np.where(zero_rows, 1.0, 1.0 / np.where(zero_rows, 1.0, norms))
        c = 1.0 / max(np.max(np.abs(np.diag(qp.P))), 1e-12)
        Ps = c * qp.P
        qs = c * qp.q
        Gs = np.ascontiguousarray(D[:, None] * qp.G)
        hs = D * qp.h

        x = np.zeros(n) if warm_w is None else np.array(warm_w, float)
        z = np.minimum(Gs @ x, hs)
        y = np.zeros(mc) if warm_lam is None else np.maximum(np.array(warm_lam, float), 0) * c / D
        rho = self.rho
        k = self._kernels()

        def factor(r):
            return np.ascontiguousarray(
                cholesky(Ps + self.sigma * np.eye(n) + r * (Gs.T @ Gs), lower=True, check_finite=False))

        L = factor(rho)
        eps = 1e-3
        best = None
        total = 0
        while total < self.max_iter:
            todo = min(self.chunk, self.max_iter - total)
            iters, flag, prim, dual = k.admm_iterate(
                L, Ps, qs, Gs, hs, x, z, y, rho, self.sigma, self.alpha, todo,
                self.check_every, eps, eps, self.eps_pinf)
            total += iters
            if flag == _kernels.PRIMAL_INFEASIBLE:
                w = x.copy()
                lam = y * D / c
                return QpSolution(w, lam, INFEASIBLE, kkt_residuals(qp, w, lam), total, False)

            w = x.copy()
            lam = np.maximum(y, 0.0) * D / c
            res = kkt_residuals(qp, w, lam)
            if best is None or _worst(res) < _worst(best[2]):
                best = (w, lam, res, False)
            if _kkt_ok(res, self.tol):
                return QpSolution(w, lam, SOLVED, res, total, False)

            if self.polish and (flag == _kernels.CONVERGED or total >= self.max_iter):
                active = np.nonzero(y > hs - z)[0]
                pol = active_set_polish(qp, active, self.tol)
                if pol is not None:
                    pres = kkt_residuals(qp, *pol)
                    if _kkt_ok(pres, self.tol):
                        return QpSolution(pol[0], pol[1], SOLVED, pres, total, True)
                    if _worst(pres) < _worst(best[2]):
                        best = (pol[0], pol[1], pres, True)
            if flag == _kernels.CONVERGED:
                eps = max(eps * 0.1, 1e-10)

            # residual balancing
            Gx = Gs @ x
            Px = Ps @ x
            num = prim / max(np.max(np.abs(Gx)), np.max(np.abs(z)), 1e-12)
            den = dual / max(np.max(np.abs(Px)), np.max(np.abs(Gs.T @ y)), np.max(np.abs(qs)), 1e-12)
            if num > 0 and den > 0:
                new_rho = float(np.clip(rho * np.sqrt(num / den), 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < 0.2 * rho:
                    rho = new_rho
                    L = factor(rho)

        w, lam, res, polished = best
        status = SOLVED if _kkt_ok(res, self.tol) else MAX_ITER
        return QpSolution(w, lam, status, res, total, polished)


def solve(qp: QpProblem, tol: float = 1e-6, max_iter: int = 4000,
          warm_w=None, warm_lam=None) -> QpSolution:
    return QpSolver(tol=tol, max_iter=max_iter).solve(qp, warm_w, warm_lam)


QP_MAGIC = b"KBMPCQP\x00"


def dump_problem(qp: QpProblem, path, note: str = "") -> None:
    """Save a problem for offline debugging."""
    from . import container
    container.save(path, QP_MAGIC, {"note": note}, {"P": qp.P, "q": qp.q, "G": qp.G, "h": qp.h})


def load_problem(path) -> QpProblem:
    from . import container
    _, a = container.load(path, QP_MAGIC)
    return QpProblem(a["P"], a["q"], a["G"].reshape(-1, a["P"].shape[0]), a["h"])
