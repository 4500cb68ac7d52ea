"""Acceptance checks; each prints one CRITERION line and asserts it.

Run standalone with ``python tests/test_acceptance.py``.
"""
import itertools
import json

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from kbmpc import bilinear, edmd, pipeline
from kbmpc.bilinear import linearize, step_bilinear
from kbmpc.cli import EXIT_OK, main
from kbmpc.lifting import eval_psi_x, estimate_f_max, state_chains, taylor_predict, truncation_error_bound
from kbmpc.mpc import IterationState, MpcConfig, build_constraints, condense, rollout_bilinear
from kbmpc.plant import DEFAULT_LIMITS, DEFAULT_PARAMS, SamplingBox, rk4_step, tractor_trailer_system
from kbmpc.qpsolver import SOLVED, QpProblem, QpSolver, kkt_residuals

CHANNELS = bilinear.CHANNELS


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def openloop(desk_cfg, desk_model):
    return pipeline.evaluate_openloop(desk_cfg, desk_model)


def test_criterion_1_openloop_ordering(desk_cfg, openloop):
    t = openloop.table
    assert desk_cfg.data.n_traj * desk_cfg.data.steps == 80_000
    assert desk_cfg.evaluation.n_rollouts == 1000 and desk_cfg.evaluation.steps == 20
    ok = all(t["KBM"][c] < t["LKBM"][c] < min(t["NM"][c], t["LLNM"][c]) for c in CHANNELS)
    detail = "; ".join(f"{c}: " + " ".join(f"{v}={t[v][c]:.3g}" for v in bilinear.VARIANTS) for c in CHANNELS)
    report(1, ok, detail)


def test_criterion_2_openloop_magnitude(openloop):
    e = openloop.table["KBM"]["e_x0y0"]
    report(2, e <= 1e-2, f"KBM e_x0y0 = {e:.3e} m (limit 1e-2)")


def _inside(x) -> bool:
    lim = DEFAULT_LIMITS
    return abs(x[4]) <= lim.tan_phi_max and abs(x[5]) <= lim.v_max and abs(x[2] - x[3]) <= lim.dtheta_max


def test_criterion_3_truncation_bound():
    sys = tractor_trailer_system(DEFAULT_PARAMS)
    box = SamplingBox()
    rng = np.random.default_rng(3)
    Ts, steps, floor = 0.05, 20, 1e-12
    violations, worst, drawn = 0, 0.0, 0
    for rho in (1, 2):
        chains = state_chains(sys, rho)
        f_max = estimate_f_max(sys, rho, box.sample_states, box.sample_controls, inflation=1.2)
        kept = 0
        while kept < 100:
            drawn += 1
            x0 = box.sample_states(rng, 1)[0]
            U = box.sample_controls(rng, steps)
            truth, pred = x0.copy(), x0.copy()
            errs = []
            for k in range(steps):
                truth = rk4_step(truth, U[k], DEFAULT_PARAMS, Ts, substeps=20)
                if not _inside(truth):  # F_max only covers the sampled box
                    break
                pred = taylor_predict(chains, rho, pred, U[k], Ts)[0]
                errs.append((np.abs(pred - truth), truncation_error_bound(rho, k + 1, Ts, f_max)))
            else:
                kept += 1
                for err, bound in errs:
                    violations += int(np.sum(err > bound + floor))
                    pos = bound > 0
                    worst = max(worst, float(np.max(err[pos] / bound[pos])))
    report(3, violations == 0,
           f"{violations} violations over 200 rollouts x 20 steps x 6 rows; worst error/bound = {worst:.3g}"
           f" ({drawn} draws, out-of-box rollouts redrawn)")


def test_criterion_4_taylor_order():
    sys = tractor_trailer_system(DEFAULT_PARAMS)
    box = SamplingBox()
    X = box.sample_states(np.random.default_rng(4), 50)
    U = box.sample_controls(np.random.default_rng(5), 50)
    Ts = np.array([0.1, 0.05, 0.025, 0.0125])
    slopes = {}
    for rho in (0, 1, 2):
        chains = state_chains(sys, rho)
        errs = []
        for h in Ts:
            truth = np.array([rk4_step(x, u, DEFAULT_PARAMS, h, substeps=64) for x, u in zip(X, U)])
            errs.append(np.max(np.abs(taylor_predict(chains, rho, X, U, h) - truth)))
        slopes[rho] = float(np.polyfit(np.log(Ts), np.log(errs), 1)[0])
    ok = all(slopes[r] >= r + 0.5 for r in slopes)
    report(4, ok, ", ".join(f"rho={r}: slope {s:.3f} (need {r + 0.5})" for r, s in slopes.items()))


def test_criterion_5_exact_recovery():
    worst = 0.0
    for N, m in itertools.product((5, 12, 20), (1, 2, 3)):
        rng = np.random.default_rng(100 * N + m)
        A = rng.normal(size=(N, N))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        B = rng.normal(size=(N, m))
        H = 0.1 * rng.normal(size=(m, N, N))
        Z = rng.normal(size=(10_000, N))
        U = rng.uniform(-1, 1, (10_000, m))
        Zn = Z @ A.T + U @ B.T + sum(U[:, j:j + 1] * (Z @ H[j].T) for j in range(m))
        model = edmd.fit_arrays(Z, U, Zn, ridge=1e-10, n_y=1)
        err = max(np.linalg.norm(model.A - A), np.linalg.norm(model.B - B),
                  max(np.linalg.norm(model.H[j] - H[j]) for j in range(m)))
        worst = max(worst, err)
    report(5, worst < 1e-8, f"worst Frobenius error {worst:.2e} over N in (5, 12, 20), m in (1, 2, 3)")


def _brute_force(qp: QpProblem):
    best = None
    for k in range(min(qp.n_ineq, qp.n, 3) + 1):
        for S in map(list, itertools.combinations(range(qp.n_ineq), k)):
            K = np.block([[qp.P, qp.G[S].T], [qp.G[S], np.zeros((k, k))]])
            try:
                s = np.linalg.solve(K, np.concatenate([-qp.q, qp.h[S]]))
            except np.linalg.LinAlgError:
                continue
            w = s[:qp.n]
            if np.all(qp.G @ w <= qp.h + 1e-9) and np.all(s[qp.n:] >= -1e-9):
                f = qp.objective(w)
                best = f if best is None else min(best, f)
    return best


def test_criterion_6_qp_correctness():
    rng = np.random.default_rng(6)
    solver = QpSolver()
    worst_kkt, worst_obj, small, unsolved = 0.0, 0.0, 0, 0
    for i in range(100):
        n = int(rng.integers(2, 41))
        mc = int(rng.integers(0, 4)) if i % 3 == 0 else int(rng.integers(4, 201))
        M = rng.normal(size=(n, n))
        G = rng.normal(size=(mc, n))
        qp = QpProblem(M @ M.T + 0.1 * np.eye(n), 3 * rng.normal(size=n), G,
                       G @ rng.normal(size=n) + rng.uniform(0, 1, mc))
        sol = solver.solve(qp)
        unsolved += sol.status != SOLVED
        worst_kkt = max(worst_kkt, max(kkt_residuals(qp, sol.w, sol.duals).values()))
        if mc <= 3:
            small += 1
            worst_obj = max(worst_obj, abs(qp.objective(sol.w) - _brute_force(qp)))
    ok = unsolved == 0 and worst_kkt <= 1e-6 and worst_obj <= 1e-6
    report(6, ok, f"worst KKT residual {worst_kkt:.2e}; worst objective gap {worst_obj:.2e} "
                  f"on {small} small instances; {unsolved} unsolved")


def test_criterion_7_linearization_identities(desk_model):
    rng = np.random.default_rng(7)
    box = SamplingBox()
    tang = 0.0
    for x, u in zip(box.sample_states(rng, 50), box.sample_controls(rng, 50)):
        z = eval_psi_x(desk_model.basis, x)
        lin = linearize(desk_model, z, u)
        tang = max(tang, float(np.max(np.abs(lin.step(z, u) - step_bilinear(desk_model, z, u)))))
    cfg = MpcConfig()
    cons = build_constraints(DEFAULT_LIMITS, cfg.Np)
    resid = 0.0
    for x in box.sample_states(rng, 10):
        U = box.sample_controls(rng, cfg.Np) * 0.25
        Z = rollout_bilinear(desk_model, eval_psi_x(desk_model.basis, x), U)
        c = condense(desk_model, IterationState(Z, U), Z @ desk_model.C.T, cfg, cons)
        resid = max(resid, float(np.max(np.abs(c.d))))
    report(7, tang <= 1e-12 and resid <= 1e-10, f"tangency gap {tang:.2e} (<= 1e-12); d_k max {resid:.2e} (<= 1e-10)")


def test_criterion_8_closed_loop_ordering(desk_cfg, tracking_runs):
    k = pipeline.tracking_summary(desk_cfg, tracking_runs["kbmpc"])
    l = pipeline.tracking_summary(desk_cfg, tracking_runs["lmpc"])
    ek, el = k["mean_errors"], l["mean_errors"]
    ok = (ek["e_x1y1"] < el["e_x1y1"] and ek["e_theta1"] < el["e_theta1"] and ek["e_x1y1"] <= 0.36
          and l["mean_cost"] > k["mean_cost"])
    report(8, ok, f"e_x1y1 {ek['e_x1y1']:.4f} vs {el['e_x1y1']:.4f} m; e_theta1 {ek['e_theta1']:.2e} vs "
                  f"{el['e_theta1']:.2e} rad; mean cost {k['mean_cost']:.4f} vs {l['mean_cost']:.4f} "
                  f"(K-BMPC vs LMPC, {len(tracking_runs['kbmpc'].t)} steps)")


def test_criterion_9_constraint_discipline(desk_cfg, tracking_runs):
    u_max = DEFAULT_LIMITS.u_max
    tol = desk_cfg.mpc.qp_tol
    u_excess = max(float(np.max(np.abs(lg.controls) - u_max)) for lg in tracking_runs.values())
    y_excess = max(float(np.max(lg.predicted_violation)) for lg in tracking_runs.values())
    fallbacks = sum(s in ("fallback", "error") for lg in tracking_runs.values() for s in lg.qp_status)
    ok = u_excess <= 1e-9 and y_excess <= tol and fallbacks == 0
    report(9, ok, f"max input excess {u_excess:.3g} (<= 1e-9); max predicted output excess {y_excess:.3g} "
                  f"(<= {tol:g}); {fallbacks} fallback steps")


def test_criterion_10_demo_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [main(["demo", "--seed", "0", "--out", str(d)]) for d in (a, b)]
    same = (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    digest = json.loads((a / "summary.json").read_text())["config_hash"]
    report(10, codes == [EXIT_OK, EXIT_OK] and same,
           f"exit codes {codes}; summary.json byte-identical: {same} (config {digest})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
