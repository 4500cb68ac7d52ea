"""Training data generation and EDMD identification of the bilinear model."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import container
from .lifting import LiftingBasis, eval_psi_x
from .plant import (N_U, N_X, SLIP_KAPPA, SLIP_MU_RANGE, DEFAULT_PARAMS, PlantParams,
                    SamplingBox, rk4_step_batch)

log = logging.getLogger(__name__)

DATASET_MAGIC = b"KBMPCDS\x00"
MODEL_MAGIC = b"KBMPCMD\x00"
MODEL_VERSION = 1


class RankDeficientError(np.linalg.LinAlgError):
    """Normal equations are singular; use a positive ridge parameter."""


class ModelMismatchError(ValueError):
    """A model file was loaded against a different lifting basis."""


@dataclass(frozen=True)
class DataGenConfig:
    n_traj: int = 2000
    steps: int = 40
    Ts: float = 0.05
    seed: int = 0
    mu_range: tuple[float, float] = SLIP_MU_RANGE
    kappa: float = SLIP_KAPPA
    params: PlantParams = DEFAULT_PARAMS
    box: SamplingBox = field(default_factory=SamplingBox)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Trajectories of the slip plant; transitions are consecutive pairs."""

    states: np.ndarray    # (n_traj, steps + 1, 6)
    controls: np.ndarray  # (n_traj, steps, 2)
    mu: np.ndarray        # (n_traj,)
    kappa: np.ndarray     # (n_traj,)
    Ts: float
    meta: dict = field(default_factory=dict)

    @property
    def n_transitions(self) -> int:
        return self.controls.shape[0] * self.controls.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.states[:, :-1].reshape(-1, N_X)

    @property
    def U(self) -> np.ndarray:
        return self.controls.reshape(-1, N_U)

    @property
    def X_next(self) -> np.ndarray:
        return self.states[:, 1:].reshape(-1, N_X)


def generate_dataset(cfg: DataGenConfig, threads: int = 1) -> Dataset:
    """Random initial states and piecewise-constant random inputs, one slip
    draw per trajectory, integrated with RK4."""
    if cfg.n_traj < 1 or cfg.steps < 1:
        raise ValueError("dataset needs at least one trajectory and one step")
    if not cfg.Ts > 0:
        raise ValueError("Ts must be positive")
    rng = np.random.default_rng(cfg.seed)
    x0 = cfg.box.sample_states(rng, cfg.n_traj)
    U = cfg.box.sample_controls(rng, (cfg.n_traj, cfg.steps))
    mu = rng.uniform(cfg.mu_range[0], cfg.mu_range[1], cfg.n_traj)
    kappa = np.full(cfg.n_traj, float(cfg.kappa))

    states = np.empty((cfg.n_traj, cfg.steps + 1, N_X))
    states[:, 0] = x0

    def run(sl: slice) -> None:
        for k in range(cfg.steps):
            states[sl, k + 1] = rk4_step_batch(states[sl, k], U[sl, k], cfg.params,
                                               mu[sl], kappa[sl], cfg.Ts)

    chunks = _chunks(cfg.n_traj, max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, chunks))
    else:
        for sl in chunks:
            run(sl)
    meta = {"seed": cfg.seed, "n_traj": cfg.n_traj, "steps": cfg.steps, "Ts": cfg.Ts,
            "mu_range": list(cfg.mu_range), "kappa": cfg.kappa}
    return Dataset(states, U, mu, kappa, cfg.Ts, meta)


def _chunks(n: int, parts: int) -> list[slice]:
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def save_dataset(ds: Dataset, path, extra_meta: dict | None = None) -> None:
    meta = dict(ds.meta, Ts=ds.Ts, **(extra_meta or {}))
    container.save(path, DATASET_MAGIC, meta, {
        "states": ds.states, "controls": ds.controls, "mu": ds.mu, "kappa": ds.kappa})


def load_dataset(path) -> Dataset:
    meta, arr = container.load(path, DATASET_MAGIC)
    return Dataset(arr["states"], arr["controls"], arr["mu"], arr["kappa"],
                   float(meta["Ts"]), meta)


# --------------------------------------------------------------------------
# identification

@dataclass(frozen=True, eq=False)
class BilinearModel:
    """z+ = A z + B u + sum_j u_j H_j z,  y = C z."""

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray  # (m, N, N)
    C: np.ndarray
    Ts: float
    basis_hash: str
    basis: LiftingBasis | None = None

    def __post_init__(self):
        N = self.A.shape[0]
        m = self.B.shape[1]
        if self.A.shape != (N, N) or self.B.shape != (N, m) or self.H.shape != (m, N, N):
            raise ValueError("inconsistent bilinear model dimensions")
        if self.C.shape[1] != N:
            raise ValueError("C does not match the lifted dimension")

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]


def selector(n_y: int, N: int) -> np.ndarray:
    """C = [I, 0]."""
    return np.eye(n_y, N)


class GramAccumulator:
    """Streaming sums of Psi'Psi and Psi'Z+ over data chunks."""

    def __init__(self, n_features: int, n_targets: int):
        self.gram = np.zeros((n_features, n_features))
        self.cross = np.zeros((n_features, n_targets))
        self.count = 0

    def add(self, features: np.ndarray, targets: np.ndarray) -> None:
        self.gram += features.T @ features
        self.cross += features.T @ targets
        self.count += features.shape[0]

    def merge(self, other: "GramAccumulator") -> None:
        self.gram += other.gram
        self.cross += other.cross
        self.count += other.count


def features_from_lifted(Z: np.ndarray, U: np.ndarray) -> np.ndarray:
    """[z, u_1 z, ..., u_m z, u] for rows of Z (n, N) and U (n, m)."""
    m = U.shape[1]
    return np.hstack([Z] + [U[:, j:j + 1] * Z for j in range(m)] + [U])


def solve_ridge(acc: GramAccumulator, ridge: float | None) -> tuple[np.ndarray, float]:
    """Minimiser G of sum ||G psi - z+||^2 + ridge ||G||_F^2; returns (G, ridge)."""
    dim = acc.gram.shape[0]
    if ridge is None:
        ridge = 1e-8 * np.trace(acc.gram) / dim
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    M = acc.gram + ridge * np.eye(dim)
    try:
        c, low = cho_factor(M, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise RankDeficientError("normal equations are singular; use ridge > 0") from exc
    d = np.abs(np.diag(c))
    if ridge == 0 and d.min() <= 1e-7 * d.max():
        raise RankDeficientError("normal equations are numerically rank deficient; use ridge > 0")
    Gt = cho_solve((c, low), acc.cross, check_finite=False)
    return Gt.T, float(ridge)


def split_blocks(G: np.ndarray, N: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """G = [A, H_1, ..., H_m, B]."""
    A = G[:, :N]
    H = np.stack([G[:, (j + 1) * N:(j + 2) * N] for j in range(m)])
    B = G[:, (m + 1) * N:]
    return A.copy(), B.copy(), H.copy()


def fit(dataset: Dataset, basis: LiftingBasis, ridge: float | None = None,
        chunk_traj: int = 2000, threads: int = 1) -> BilinearModel:
    """Least-squares fit of the first N rows of the lifted Koopman matrix."""
    N, m = basis.N, basis.m
    if ridge == 0 and dataset.n_transitions <= (m + 1) * N + m:
        raise RankDeficientError("fewer transitions than features; use ridge > 0")
    n_traj = dataset.states.shape[0]
    slices = [slice(a, min(a + chunk_traj, n_traj)) for a in range(0, n_traj, chunk_traj)]

    def part(sl: slice) -> GramAccumulator:
        S = dataset.states[sl]
        nt, T1, _ = S.shape
        Z = eval_psi_x(basis, S.reshape(-1, N_X)).reshape(nt, T1, N)
        acc = GramAccumulator((m + 1) * N + m, N)
        acc.add(features_from_lifted(Z[:, :-1].reshape(-1, N), dataset.controls[sl].reshape(-1, m)),
                Z[:, 1:].reshape(-1, N))
        return acc

    total = GramAccumulator((m + 1) * N + m, N)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(part, slices))
    else:
        parts = [part(sl) for sl in slices]
    for p in parts:  # fixed order keeps the sum deterministic
        total.merge(p)
    G, used = solve_ridge(total, ridge)
    log.info("EDMD fit: N=%d, features=%d, K=%d, ridge=%.3g", N, G.shape[1], total.count, used)
    A, B, H = split_blocks(G, N, m)
    return BilinearModel(A, B, H, selector(basis.n_y, N), dataset.Ts, basis.manifest_hash, basis)


def fit_arrays(Z: np.ndarray, U: np.ndarray, Z_next: np.ndarray, ridge: float | None,
               n_y: int, Ts: float = 1.0, basis_hash: str = "") -> BilinearModel:
    """Fit directly from lifted snapshots (identity lifting)."""
    N, m = Z.shape[1], U.shape[1]
    acc = GramAccumulator((m + 1) * N + m, N)
    acc.add(features_from_lifted(Z, U), Z_next)
    G, _ = solve_ridge(acc, ridge)
    A, B, H = split_blocks(G, N, m)
    return BilinearModel(A, B, H, selector(n_y, N), Ts, basis_hash)


def save_model(model: BilinearModel, path, extra_meta: dict | None = None) -> None:
    meta = {"model_version": MODEL_VERSION, "Ts": model.Ts, "N": model.N, "m": model.m,
            "n_y": model.n_y, "basis_manifest_hash": model.basis_hash,
            "feature_layout": "psi_x,u_1*psi_x,...,u_m*psi_x,u"}
    meta.update(extra_meta or {})
    arrays = {"A": model.A, "B": model.B, "C": model.C}
    for j in range(model.m):
        arrays[f"H{j + 1}"] = model.H[j]
    container.save(path, MODEL_MAGIC, meta, arrays)


def load_model(path, basis: LiftingBasis | None = None) -> BilinearModel:
    """Load a model; with `basis`, refuse a model fitted over another basis."""
    meta, arr = container.load(path, MODEL_MAGIC)
    if meta.get("model_version") != MODEL_VERSION:
        raise container.ContainerError(f"unsupported model version {meta.get('model_version')}")
    if basis is not None and basis.manifest_hash != meta["basis_manifest_hash"]:
        raise ModelMismatchError("model was fitted over a different lifting basis")
    H = np.stack([arr[f"H{j + 1}"] for j in range(int(meta["m"]))])
    return BilinearModel(arr["A"], arr["B"], H, arr["C"], float(meta["Ts"]),
                         meta["basis_manifest_hash"], basis)


def config_digest(obj) -> str:
    """Short stable hash of a dataclass or JSON-able object."""
    import json
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
