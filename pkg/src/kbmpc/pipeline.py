"""Pipeline stages shared by the command line and the acceptance tests."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bilinear, edmd, lifting, mpc, plant
from .config import ConfigError, RunConfig, mpc_config

log = logging.getLogger(__name__)


def data_config(cfg: RunConfig, n_traj: int | None = None, seed: int | None = None) -> edmd.DataGenConfig:
    d = cfg.data
    return edmd.DataGenConfig(
        n_traj=d.n_traj if n_traj is None else n_traj, steps=d.steps, Ts=d.Ts,
        seed=cfg.data_seed if seed is None else seed, mu_range=tuple(d.mu_range),
        kappa=d.kappa, params=cfg.plant.params(), box=cfg.sampling_box())


def make_basis(cfg: RunConfig, rho: int | None = None) -> lifting.LiftingBasis:
    lim = cfg.plant.limits()
    probe = lifting.ProbeConfig.for_tractor_trailer(
        lim, position=cfg.data.position, n_points=cfg.lifting.probe_points,
        seed=cfg.lifting.probe_seed)
    sys = plant.tractor_trailer_system(cfg.plant.params())
    return lifting.build_basis(sys, cfg.lifting.rho if rho is None else rho, probe)


def check_dataset(cfg: RunConfig, ds: edmd.Dataset) -> None:
    if not np.isclose(ds.Ts, cfg.data.Ts, rtol=1e-12, atol=0.0):
        raise ConfigError(f"dataset Ts={ds.Ts} does not match config Ts={cfg.data.Ts}")


def identify(cfg: RunConfig, ds: edmd.Dataset, basis: lifting.LiftingBasis | None = None,
             threads: int = 1) -> edmd.BilinearModel:
    check_dataset(cfg, ds)
    basis = basis or make_basis(cfg)
    return edmd.fit(ds, basis, cfg.edmd.ridge, cfg.edmd.chunk_traj, threads)


def validation_report(cfg: RunConfig, model: edmd.BilinearModel, threads: int = 1) -> dict:
    """Multi-step KBM output error on held-out trajectories."""
    vd = edmd.generate_dataset(data_config(cfg, cfg.edmd.validation_traj, cfg.validation_seed),
                               threads)
    p = cfg.plant.params()
    pred = bilinear.predict_batch("KBM", vd.states[:, 0], vd.controls, model, p, vd.Ts)
    truth = plant.output_map(vd.states, p)
    Z = lifting.eval_psi_x(model.basis, vd.states.reshape(-1, plant.N_X)).reshape(
        vd.states.shape[0], -1, model.N)
    Z1 = bilinear.step_bilinear(model, Z[:, :-1].reshape(-1, model.N), vd.U)
    resid = Z1 - Z[:, 1:].reshape(-1, model.N)
    scale = np.linalg.norm(Z[:, 1:].reshape(-1, model.N), axis=1)
    y1 = Z1 @ model.C.T
    y1_true = truth[:, 1:].reshape(-1, model.n_y)
    return {
        "n_traj": int(vd.states.shape[0]),
        "steps": int(vd.controls.shape[1]),
        "one_step_relative_residual": float(np.mean(np.linalg.norm(resid, axis=1) / scale)),
        "one_step_position_rms": float(np.sqrt(np.mean(np.sum((y1[:, :2] - y1_true[:, :2]) ** 2, axis=1)))),
        "multi_step": bilinear.error_metrics(truth[:, 1:], pred[:, 1:]),
    }


@dataclass(frozen=True, eq=False)
class OpenLoopResult:
    table: dict        # variant -> channel -> mean error over the horizon
    curves: dict       # variant -> (K+1, 4) mean error per step
    X0: np.ndarray
    controls: np.ndarray
    mu: np.ndarray


def openloop_samples(cfg: RunConfig):
    rng = np.random.default_rng(cfg.eval_seed)
    box = cfg.sampling_box()
    R, K = cfg.evaluation.n_rollouts, cfg.evaluation.steps
    X0 = box.sample_states(rng, R)
    U = box.sample_controls(rng, (R, K))
    mu = rng.uniform(cfg.data.mu_range[0], cfg.data.mu_range[1], R)
    return X0, U, mu


def evaluate_openloop(cfg: RunConfig, model: edmd.BilinearModel, threads: int = 1,
                      variants=bilinear.VARIANTS) -> OpenLoopResult:
    """Compare the predictor variants against the slip plant on random rollouts."""
    for v in variants:
        if v not in bilinear.VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    X0, U, mu = openloop_samples(cfg)
    p = cfg.plant.params()
    Ts = cfg.data.Ts
    truth = bilinear.truth_batch(X0, U, p, mu, cfg.data.kappa, Ts)
    parts = [slice(a, b) for a, b in _edges(len(X0), max(1, threads))]

    def run(args):
        v, sl = args
        return bilinear.predict_batch(v, X0[sl], U[sl], model, p, Ts)

    table, curves = {}, {}
    for v in variants:
        jobs = [(v, sl) for sl in parts]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                pred = np.concatenate(list(pool.map(run, jobs)))
        else:
            pred = np.concatenate([run(j) for j in jobs])
        table[v] = bilinear.error_metrics(truth[:, 1:], pred[:, 1:])
        curves[v] = bilinear.error_curves(truth, pred)
    return OpenLoopResult(table, curves, X0, U, mu)


def _edges(n: int, parts: int):
    e = np.linspace(0, n, parts + 1).astype(int)
    return [(a, b) for a, b in zip(e[:-1], e[1:]) if b > a]


def load_reference(cfg: RunConfig) -> tuple[plant.Reference, str]:
    t = cfg.track
    if t.reference in plant.PROFILES:
        prof = plant.PROFILES[t.reference](coarse_dt=t.coarse_dt)
        ref = plant.generate_reference(prof, cfg.plant.params(), t.coarse_dt, cfg.data.Ts,
                                       cfg.plant.limits())
        return ref, t.reference
    return plant.load_reference_csv(t.reference, cfg.data.Ts), t.reference


def make_controller(name: str, cfg: RunConfig, model: edmd.BilinearModel | None) -> mpc.Controller:
    mc = mpc_config(cfg)
    if name == "kbmpc":
        if model is None:
            raise ConfigError("kbmpc needs a model")
        return mpc.KbmpcController(model, mc)
    if name == "lmpc":
        return mpc.LmpcController(cfg.plant.params(), mc)
    raise ConfigError(f"unknown controller {name!r}")


def run_tracking(cfg: RunConfig, name: str, model, reference: plant.Reference) -> mpc.TrackingLog:
    true_plant = cfg.plant.params().with_slip(cfg.track.mu, cfg.track.kappa)
    ctl = make_controller(name, cfg, model)
    return mpc.closed_loop(true_plant, ctl, reference, ctl.cfg)


def tracking_summary(cfg: RunConfig, lg: mpc.TrackingLog) -> dict:
    """Deterministic summary of a closed-loop run (no wall-clock numbers)."""
    lim = cfg.plant.limits()
    u_excess = float(np.max(np.abs(lg.controls) - lim.u_max))
    y = lg.outputs
    true_viol = max(
        float(np.max(np.abs(y[:, 4]) - lim.tan_phi_max)),
        float(np.max(np.abs(y[:, 5]) - lim.v_max)),
        float(np.max(np.abs(y[:, 2] - y[:, 3]) - lim.dtheta_max)),
    )
    return {
        "controller": lg.controller,
        "steps": int(len(lg.t)),
        "mean_errors": lg.metrics(),
        "mean_cost": float(np.nanmean(lg.cost)),
        "mean_inner_iters": float(np.mean(lg.inner_iters)),
        "fallback_steps": int(sum(s in ("fallback", "error") for s in lg.qp_status)),
        "max_input_excess": u_excess,
        "max_predicted_output_violation": float(np.max(lg.predicted_violation)),
        "max_true_output_violation": true_viol,
    }


def timing_summary(lg: mpc.TrackingLog) -> dict:
    return {"controller": lg.controller,
            "mean_solve_time_us": float(np.mean(lg.solve_time_us)),
            "max_solve_time_us": float(np.max(lg.solve_time_us))}


def compare(summaries: dict) -> dict:
    """Per-channel deltas and relative cost of LMPC over K-BMPC."""
    k, l = summaries["kbmpc"], summaries["lmpc"]
    out = {"delta_lmpc_minus_kbmpc": {c: l["mean_errors"][c] - k["mean_errors"][c]
                                      for c in bilinear.CHANNELS},
           "mean_cost": {"kbmpc": k["mean_cost"], "lmpc": l["mean_cost"]},
           "lmpc_cost_increase_percent": 100.0 * (l["mean_cost"] / k["mean_cost"] - 1.0)}
    out["kbmpc_better_trailer"] = bool(out["delta_lmpc_minus_kbmpc"]["e_x1y1"] > 0
                                       and out["delta_lmpc_minus_kbmpc"]["e_theta1"] > 0)
    return out
