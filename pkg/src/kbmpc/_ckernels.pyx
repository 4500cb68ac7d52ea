# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, tan, atan, fabs, INFINITY

cnp.import_array()

CONVERGED = 1
CHUNK_DONE = 0
PRIMAL_INFEASIBLE = 2


cdef inline void _rhs(const double* x, double om, double ac, double l0,
                      double l1, double lH, double mu, double kappa,
                      double* out) noexcept nogil:
    cdef double tk = tan(kappa * atan(x[4]))
    cdef double mv = mu * x[5]
    cdef double dth = x[2] - x[3]
    out[0] = mv * cos(x[2])
    out[1] = mv * sin(x[2])
    out[2] = mv * tk / l0
    out[3] = mv * (sin(dth) - tk * cos(dth) * lH / l0) / l1
    out[4] = om
    out[5] = ac


def plant_rhs_batch(X, U, double l0, double l1, double lH, mu, kappa):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef const double[::1] muv = np.ascontiguousarray(np.broadcast_to(mu, (n,)), dtype=np.float64)
    cdef const double[::1] kv = np.ascontiguousarray(np.broadcast_to(kappa, (n,)), dtype=np.float64)
    out = np.empty((n, 6))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r
    with nogil:
        for r in range(n):
            _rhs(&Xv[r, 0], Uv[r, 0], Uv[r, 1], l0, l1, lH, muv[r], kv[r], &ov[r, 0])
    return out


def rk4_batch(X, U, double l0, double l1, double lH, mu, kappa, double Ts, int substeps):
    cdef Py_ssize_t n = np.shape(X)[0]
    out = np.array(X, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Xv = out
    cdef const double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[::1] muv = np.ascontiguousarray(np.broadcast_to(mu, (n,)), dtype=np.float64)
    cdef const double[::1] kv = np.ascontiguousarray(np.broadcast_to(kappa, (n,)), dtype=np.float64)
    cdef double h = Ts / substeps
    cdef double k1[6]
    cdef double k2[6]
    cdef double k3[6]
    cdef double k4[6]
    cdef double tmp[6]
    cdef Py_ssize_t r, i
    cdef int s
    with nogil:
        for r in range(n):
            for s in range(substeps):
                _rhs(&Xv[r, 0], Uv[r, 0], Uv[r, 1], l0, l1, lH, muv[r], kv[r], k1)
                for i in range(6):
                    tmp[i] = Xv[r, i] + 0.5 * h * k1[i]
                _rhs(tmp, Uv[r, 0], Uv[r, 1], l0, l1, lH, muv[r], kv[r], k2)
                for i in range(6):
                    tmp[i] = Xv[r, i] + 0.5 * h * k2[i]
                _rhs(tmp, Uv[r, 0], Uv[r, 1], l0, l1, lH, muv[r], kv[r], k3)
                for i in range(6):
                    tmp[i] = Xv[r, i] + h * k3[i]
                _rhs(tmp, Uv[r, 0], Uv[r, 1], l0, l1, lH, muv[r], kv[r], k4)
                for i in range(6):
                    Xv[r, i] = Xv[r, i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return out


cdef inline double _amax(const double* a, Py_ssize_t n) noexcept nogil:
    cdef double m = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        if fabs(a[i]) > m:
            m = fabs(a[i])
    return m


def admm_iterate(L, P, q, G, h, x, z, y, double rho, double sigma, double alpha,
                 int max_iter, int check_every, double eps_abs, double eps_rel,
                 double eps_pinf):
    cdef const double[:, ::1] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef double[::1] xv = x
    cdef double[::1] zv = z
    cdef double[::1] yv = y
    cdef Py_ssize_t n = Pv.shape[0]
    cdef Py_ssize_t mc = Gv.shape[0]
    cdef double[::1] rhs = np.empty(n)
    cdef double[::1] xt = np.empty(n)
    cdef double[::1] wbuf = np.empty(mc)
    cdef double[::1] ycheck = np.array(y, dtype=np.float64, copy=True)
    cdef double[::1] vn = np.empty(n)
    cdef double[::1] vn2 = np.empty(n)
    cdef double[::1] vm = np.empty(mc)
    cdef Py_ssize_t i, j
    cdef int it
    cdef double acc, zr, znew, prim = INFINITY, dual = INFINITY
    cdef double eps_p, eps_d, ndy, hdy, a1, a2, a3, dmin
    with nogil:
        for it in range(1, max_iter + 1):
            # rhs = sigma x - q + G'(rho z - y)
            for j in range(mc):
                wbuf[j] = rho * zv[j] - yv[j]
            for i in range(n):
                rhs[i] = sigma * xv[i] - qv[i]
            for j in range(mc):
                acc = wbuf[j]
                if acc != 0.0:
                    for i in range(n):
                        rhs[i] += Gv[j, i] * acc
            # forward then backward substitution with L
            for i in range(n):
                acc = rhs[i]
                for j in range(i):
                    acc -= Lv[i, j] * xt[j]
                xt[i] = acc / Lv[i, i]
            for i in range(n - 1, -1, -1):
                acc = xt[i]
                for j in range(i + 1, n):
                    acc -= Lv[j, i] * xt[j]
                xt[i] = acc / Lv[i, i]
            for j in range(mc):
                acc = 0.0
                for i in range(n):
                    acc += Gv[j, i] * xt[i]
                zr = alpha * acc + (1.0 - alpha) * zv[j]
                znew = zr + yv[j] / rho
                if znew > hv[j]:
                    znew = hv[j]
                yv[j] += rho * (zr - znew)
                zv[j] = znew
            for i in range(n):
                xv[i] = alpha * xt[i] + (1.0 - alpha) * xv[i]

            if it % check_every == 0 or it == max_iter:
                # vm = Gx, vn = Px, vn2 = G'y
                for j in range(mc):
                    acc = 0.0
                    for i in range(n):
                        acc += Gv[j, i] * xv[i]
                    vm[j] = acc
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += Pv[i, j] * xv[j]
                    vn[i] = acc
                    vn2[i] = 0.0
                for j in range(mc):
                    acc = yv[j]
                    if acc != 0.0:
                        for i in range(n):
                            vn2[i] += Gv[j, i] * acc
                prim = 0.0
                for j in range(mc):
                    if fabs(vm[j] - zv[j]) > prim:
                        prim = fabs(vm[j] - zv[j])
                dual = 0.0
                for i in range(n):
                    acc = fabs(vn[i] + qv[i] + vn2[i])
                    if acc > dual:
                        dual = acc
                a1 = _amax(&vm[0], mc) if mc > 0 else 0.0
                a2 = _amax(&zv[0], mc) if mc > 0 else 0.0
                eps_p = eps_abs + eps_rel * (a1 if a1 > a2 else a2)
                a1 = _amax(&vn[0], n)
                a2 = _amax(&vn2[0], n)
                a3 = _amax(&qv[0], n)
                if a2 > a1:
                    a1 = a2
                if a3 > a1:
                    a1 = a3
                eps_d = eps_abs + eps_rel * a1
                if prim <= eps_p and dual <= eps_d:
                    with gil:
                        return it, CONVERGED, prim, dual
                # infeasibility certificate on dy = y - ycheck
                # (one-sided rows: the certificate must be nonnegative)
                ndy = 0.0
                hdy = 0.0
                dmin = 0.0
                for j in range(mc):
                    acc = yv[j] - ycheck[j]
                    wbuf[j] = acc
                    if fabs(acc) > ndy:
                        ndy = fabs(acc)
                    if acc < dmin:
                        dmin = acc
                    elif acc > 0.0:
                        hdy += hv[j] * acc
                if ndy > 0.0 and dmin >= -eps_pinf * ndy:
                    for i in range(n):
                        vn2[i] = 0.0
                    for j in range(mc):
                        acc = wbuf[j]
                        if acc != 0.0:
                            for i in range(n):
                                vn2[i] += Gv[j, i] * acc
                    if _amax(&vn2[0], n) <= eps_pinf * ndy and hdy < -eps_pinf * ndy:
                        with gil:
                            return it, PRIMAL_INFEASIBLE, prim, dual
                for j in range(mc):
                    ycheck[j] = yv[j]
    return max_iter, CHUNK_DONE, prim, dual
