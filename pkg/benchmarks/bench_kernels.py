"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json results.json]

Each case runs both backends on identical inputs, checks that the results
agree, and reports the best-of-repeat wall time.
"""
import argparse
import json
import sys
import timeit

import numpy as np
from scipy.linalg import cholesky

from kbmpc import _kernels
from kbmpc.mpc import MpcConfig, build_constraints, condense, initial_state_kbmpc
from kbmpc.plant import DEFAULT_LIMITS, DEFAULT_PARAMS, SamplingBox
from kbmpc.qpsolver import QpProblem, QpSolver

P = DEFAULT_PARAMS


def dynamics_cases(rng):
    box = SamplingBox()
    X = box.sample_states(rng, 2000)
    U = box.sample_controls(rng, 2000)
    mu = rng.uniform(0.97, 0.99, 2000)
    yield ("plant_rhs_batch (2000 states)",
           lambda k: k.plant_rhs_batch(X, U, P.l0, P.l1, P.lH, mu, 0.94))
    yield ("rk4_batch (2000 states, 4 substeps)",
           lambda k: k.rk4_batch(X, U, P.l0, P.l1, P.lH, mu, 0.94, 0.05, 4))


def mpc_qp():
    """A condensed MPC problem of the shipped size, using a model fitted on a small dataset."""
    from kbmpc import edmd, pipeline
    from kbmpc.config import RunConfig

    cfg = RunConfig(seed=0).validate()
    cfg.data.n_traj = 200
    ds = edmd.generate_dataset(pipeline.data_config(cfg))
    model = pipeline.identify(cfg, ds, pipeline.make_basis(cfg))
    mc = MpcConfig()
    x0 = np.array([0.0, 0.0, 0.2, 0.1, 0.05, 0.6])
    st = initial_state_kbmpc(model, x0, np.zeros(2), mc.Np)
    refs = np.tile(st.z_hat[0, :8], (mc.Np + 1, 1))
    refs[:, 0] += np.linspace(0, 0.6, mc.Np + 1)
    return condense(model, st, refs, mc, build_constraints(DEFAULT_LIMITS, mc.Np)).qp


def admm_case(qp: QpProblem):
    n, m = qp.n, qp.n_ineq
    rho, sigma = 0.1, 1e-6
    L = np.ascontiguousarray(cholesky(qp.P + sigma * np.eye(n) + rho * qp.G.T @ qp.G, lower=True))
    G = np.ascontiguousarray(qp.G)

    def run(k):
        x, z, y = np.zeros(n), np.zeros(m), np.zeros(m)
        k.admm_iterate(L, qp.P, qp.q, G, qp.h, x, z, y, rho, sigma, 1.6, 200, 10, 0.0, 0.0, 1e-5)
        return x

    return f"admm_iterate (200 iterations, n={n}, rows={m})", run


def solver_case(qp: QpProblem):
    def run(k):
        return QpSolver(backend=k).solve(qp).w

    return f"QpSolver.solve (MPC QP, n={qp.n}, rows={qp.n_ineq})", run


def best_time(fn, repeat: int) -> float:
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", metavar="PATH", help="also write results as JSON")
    args = ap.parse_args(argv)

    py = _kernels.get_backend("python")
    try:
        cy = _kernels.get_backend("cython")
    except ImportError:
        print("compiled backend not built; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    qp = mpc_qp()
    cases = list(dynamics_cases(rng)) + [admm_case(qp), solver_case(qp)]
    results = []
    print(f"{'case':<52} {'python':>12} {'cython':>12} {'speedup':>8}")
    for name, fn in cases:
        a, b = np.asarray(fn(py)), np.asarray(fn(cy))
        if not np.allclose(a, b, rtol=1e-7, atol=1e-9):
            print(f"{name}: backends disagree (max diff {np.max(np.abs(a - b)):.3g})", file=sys.stderr)
            return 2
        tp = best_time(lambda: fn(py), args.repeat)
        tc = best_time(lambda: fn(cy), args.repeat)
        results.append({"case": name, "python_s": tp, "cython_s": tc, "speedup": tp / tc})
        print(f"{name:<52} {tp * 1e3:>10.3f}ms {tc * 1e3:>10.3f}ms {tp / tc:>7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
