"""Pure numpy implementations of the hot kernels.

These are the reference semantics for ``_ckernels.pyx``; both modules expose
the same functions with the same signatures.
"""
import numpy as np
from scipy.linalg import solve_triangular

CONVERGED = 1
CHUNK_DONE = 0
PRIMAL_INFEASIBLE = 2


def plant_rhs_batch(X, U, l0, l1, lH, mu, kappa):
    """Tractor-trailer right-hand side for rows of X (n, 6) and U (n, 2)."""
    th0 = X[:, 2]
    th1 = X[:, 3]
    tphi = X[:, 4]
    v = X[:, 5]
    tk = np.tan(kappa * np.arctan(tphi))
    mv = mu * v
    dth = th0 - th1
    out = np.empty_like(X)
    out[:, 0] = mv * np.cos(th0)
    out[:, 1] = mv * np.sin(th0)
    out[:, 2] = mv * tk / l0
    out[:, 3] = mv * (np.sin(dth) - tk * np.cos(dth) * lH / l0) / l1
    out[:, 4] = U[:, 0]
    out[:, 5] = U[:, 1]
    return out


def rk4_batch(X, U, l0, l1, lH, mu, kappa, Ts, substeps):
    """Classical RK4 with `substeps` equal sub-intervals per step of Ts."""
    X = np.array(X, dtype=float, copy=True)
    U = np.asarray(U, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    h = Ts / substeps
    for _ in range(substeps):
        k1 = plant_rhs_batch(X, U, l0, l1, lH, mu, kappa)
        k2 = plant_rhs_batch(X + 0.5 * h * k1, U, l0, l1, lH, mu, kappa)
        k3 = plant_rhs_batch(X + 0.5 * h * k2, U, l0, l1, lH, mu, kappa)
        k4 = plant_rhs_batch(X + h * k3, U, l0, l1, lH, mu, kappa)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def admm_iterate(L, P, q, G, h, x, z, y, rho, sigma, alpha, max_iter,
                 check_every, eps_abs, eps_rel, eps_pinf):
    """Run up to `max_iter` ADMM iterations in place on (x, z, y).

    `L` is the lower Cholesky factor of P + sigma*I + rho*G'G.  Returns
    (iterations_done, flag, prim_res, dual_res).
    """
    prim = dual = np.inf
    y_check = y.copy()
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + G.T @ (rho * z - y)
        xt = solve_triangular(L, rhs, lower=True, check_finite=False)
        xt = solve_triangular(L.T, xt, lower=False, check_finite=False)
        zt = G @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.minimum(zr + y / rho, h)
        y += rho * (zr - z_new)
        z[:] = z_new
        if it % check_every == 0 or it == max_iter:
            Gx = G @ x
            Px = P @ x
            Gty = G.T @ y
            prim = np.max(np.abs(Gx - z)) if z.size else 0.0
            dual = np.max(np.abs(Px + q + Gty))
            eps_p = eps_abs + eps_rel * max(np.max(np.abs(Gx)), np.max(np.abs(z)))
            eps_d = eps_abs + eps_rel * max(np.max(np.abs(Px)), np.max(np.abs(Gty)),
                                            np.max(np.abs(q)))
            if prim <= eps_p and dual <= eps_d:
                return it, CONVERGED, prim, dual
            dy = y - y_check
            ndy = np.max(np.abs(dy))
            # one-sided rows: the certificate must be nonnegative
            if ndy > 0.0 and np.min(dy) >= -eps_pinf * ndy:
                if (np.max(np.abs(G.T @ dy)) <= eps_pinf * ndy
                        and h @ np.maximum(dy, 0.0) < -eps_pinf * ndy):
                    return it, PRIMAL_INFEASIBLE, prim, dual
            y_check[:] = y
    return max_iter, CHUNK_DONE, prim, dual
