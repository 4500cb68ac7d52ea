"""Derivative-based lifting functions.

The lifted state stacks the output map with chains of Lie derivatives:
for every state row the chain starts at ``{f_i, g_i1, ..., g_im}`` and each
field spawns ``m + 1`` children (derivative along ``f`` then along each
``g_j``).  Output rows start from the decomposition of ``dh_i/dt``.  Chains
are truncated at depth ``rho``, duplicates and zero functions are pruned by
numerical fingerprinting, and constant observables are dropped.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .lie import ControlAffineSystem, Program, ScalarField, expand_level

__all__ = [
    "ProbeConfig",
    "Observable",
    "LiftingBasis",
    "build_basis",
    "raw_count",
    "eval_psi_x",
    "eval_psi",
    "state_chains",
    "total_derivatives",
    "taylor_predict",
    "estimate_f_max",
    "truncation_error_bound",
]


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed pseudo-random states used to fingerprint candidate observables."""

    n_points: int = 64
    seed: int = 7
    low: tuple[float, ...] | None = None
    high: tuple[float, ...] | None = None
    zero_tol: float = 1e-10
    dup_tol: float = 1e-10

    def points(self, n_x: int) -> np.ndarray:
        if self.n_points < 1:
            raise ValueError("probe needs at least one sample point")
        low = np.full(n_x, -1.0) if self.low is None else np.asarray(self.low, float)
        high = np.full(n_x, 1.0) if self.high is None else np.asarray(self.high, float)
        if low.shape != (n_x,) or high.shape != (n_x,):
            raise ValueError("probe box dimension does not match the state")
        rng = np.random.default_rng(self.seed)
        return low + (high - low) * rng.random((self.n_points, n_x))

    @classmethod
    def for_tractor_trailer(cls, limits, position: float = 10.0, **kw) -> "ProbeConfig":
        low = (-position, -position, -math.pi, -math.pi - limits.dtheta_max,
               -limits.tan_phi_max, -limits.v_max)
        return cls(low=low, high=tuple(-v for v in low), **kw)


@dataclass(frozen=True)
class Observable:
    field: ScalarField
    seed: str          # "y" for the output prefix, "h<i>" or "F<i>" for chains
    level: int         # -1 for the output prefix
    path: tuple[int, ...]  # 0 = drift, j = j-th input field

    def describe(self) -> str:
        return f"{self.seed}/{self.level}/{''.join(map(str, self.path))}"


@dataclass(frozen=True, eq=False)
class LiftingBasis:
    observables: tuple[Observable, ...]
    rho: int
    n_x: int
    n_y: int
    m: int
    raw_count: int
    fingerprints: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return len(self.observables)

    @property
    def fields(self) -> list[ScalarField]:
        return [o.field for o in self.observables]

    @cached_property
    def program(self) -> Program:
        return Program([o.field.expr for o in self.observables])

    def manifest(self) -> list[dict]:
        out = []
        for i, (obs, fp) in enumerate(zip(self.observables, self.fingerprints.T)):
            digest = hashlib.sha256(np.round(fp, 9).tobytes()).hexdigest()[:16]
            out.append({"index": i, "seed": obs.seed, "level": obs.level,
                        "path": list(obs.path), "fingerprint": digest})
        return out

    @cached_property
    def manifest_hash(self) -> str:
        blob = json.dumps({"rho": self.rho, "observables": self.manifest()},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def raw_count(n_x: int, n_y: int, m: int, rho: int) -> int:
    """Number of candidates before pruning: outputs plus all chain fields."""
    return n_y + (n_y + n_x) * sum((m + 1) ** (n + 1) for n in range(rho + 1))


def _chain_roots(sys: ControlAffineSystem):
    """(seed name, level-0 fields) for output rows then state rows."""
    roots = []
    for i, h in enumerate(sys.output):
        roots.append((f"h{i}", expand_level([h], sys)))
    for i in range(sys.n_x):
        roots.append((f"F{i}", [sys.drift[i]] + [g[i] for g in sys.control]))
    return roots


def _paths(m: int, level: int) -> list[tuple[int, ...]]:
    paths = [(j,) for j in range(m + 1)]
    for _ in range(level):
        paths = [p + (j,) for p in paths for j in range(m + 1)]
    return paths


def build_basis(sys: ControlAffineSystem, rho: int, probe: ProbeConfig = ProbeConfig()) -> LiftingBasis:
    """Truncated derivative-based lifting with deterministic ordering.

    Order: outputs, then level by level; within a level output-row chains
    before state-row chains, each in state index order.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    pts = probe.points(sys.n_x)
    m = sys.m

    candidates: list[Observable] = [Observable(h, "y", -1, (i,)) for i, h in enumerate(sys.output)]
    levels = _chain_roots(sys)
    for n in range(rho + 1):
        paths = _paths(m, n)
        for seed, fields in levels:
            candidates.extend(Observable(f, seed, n, p) for f, p in zip(fields, paths))
        if n < rho:
            levels = [(seed, expand_level(fields, sys)) for seed, fields in levels]

    values = Program([c.field.expr for c in candidates])(pts)
    kept: list[int] = []
    for idx, cand in enumerate(candidates):
        col = values[:, idx]
        if cand.level >= 0:
            if not np.all(np.isfinite(col)) or np.max(np.abs(col)) < probe.zero_tol:
                continue
            # constants are carried by the input columns of the regression
            if np.ptp(col) <= probe.dup_tol:
                continue
            if kept:
                diff = np.max(np.abs(values[:, kept] - col[:, None]), axis=0)
                if np.any(diff <= probe.dup_tol):
                    continue
        kept.append(idx)
    assert len(candidates) == raw_count(sys.n_x, sys.n_y, m, rho)
    return LiftingBasis(
        observables=tuple(candidates[i] for i in kept),
        rho=rho, n_x=sys.n_x, n_y=sys.n_y, m=m,
        raw_count=len(candidates),
        fingerprints=values[:, kept],
    )


def eval_psi_x(basis: LiftingBasis, x) -> np.ndarray:
    """Lifted state(s): shape (N,) for one state, (n, N) for a batch."""
    return basis.program(x)


def eval_psi(basis: LiftingBasis, x, u) -> np.ndarray:
    """EDMD features laid out as [psi_x, u_1 psi_x, ..., u_m psi_x, u_1..u_m]."""
    z = eval_psi_x(basis, x)
    u = np.asarray(u, dtype=float)
    if z.ndim == 1:
        return np.concatenate([z] + [uj * z for uj in u] + [u])
    U = np.broadcast_to(np.atleast_2d(u), (z.shape[0], basis.m))
    return np.hstack([z] + [U[:, j:j + 1] * z for j in range(basis.m)] + [U])


# --------------------------------------------------------------------------
# truncated Taylor predictor and its error bound

@dataclass(frozen=True, eq=False)
class StateChains:
    """F-chains per state row: levels[n] has (m+1)**(n+1) fields."""

    sys: ControlAffineSystem
    depth: int
    programs: tuple[Program, ...]  # one per level, all rows concatenated
    monomial_paths: tuple[tuple[tuple[int, ...], ...], ...]


def state_chains(sys: ControlAffineSystem, depth: int) -> StateChains:
    """Chains F_i^{(0..depth)} for every state row."""
    rows = [[sys.drift[i]] + [g[i] for g in sys.control] for i in range(sys.n_x)]
    programs, paths = [], []
    for n in range(depth + 1):
        if n > 0:
            rows = [expand_level(r, sys) for r in rows]
        programs.append(Program([f.expr for r in rows for f in r]))
        paths.append(tuple(_paths(sys.m, n)))
    return StateChains(sys, depth, tuple(programs), tuple(paths))


def _monomials(paths, U: np.ndarray) -> np.ndarray:
    """Products of inputs along each path, shape (n, len(paths))."""
    ones = np.ones((U.shape[0], 1))
    Uc = np.hstack([ones, U])  # column 0 multiplies drift steps
    out = np.ones((U.shape[0], len(paths)))
    for k, path in enumerate(paths):
        for c in path:
            if c:
                out[:, k] *= Uc[:, c]
    return out


def total_derivatives(chains: StateChains, X, U) -> np.ndarray:
    """F_i^{(n)}(x, u) for n = 0..depth; shape (n_points, depth+1, n_x)."""
    X = np.atleast_2d(np.asarray(X, float))
    U = np.broadcast_to(np.atleast_2d(np.asarray(U, float)), (X.shape[0], chains.sys.m))
    n_x = chains.sys.n_x
    out = np.empty((X.shape[0], chains.depth + 1, n_x))
    for n, (prog, paths) in enumerate(zip(chains.programs, chains.monomial_paths)):
        vals = prog(X).reshape(X.shape[0], n_x, len(paths))
        out[:, n, :] = np.einsum("pil,pl->pi", vals, _monomials(paths, U))
    return out


def taylor_predict(chains: StateChains, rho: int, X, U, Ts: float) -> np.ndarray:
    """One step of the truncated predictor: x + sum_{n<=rho} F^{(n)} Ts^{n+1}/(n+1)!."""
    if rho > chains.depth:
        raise ValueError("chains are not deep enough for this rho")
    X = np.atleast_2d(np.asarray(X, float))
    D = total_derivatives(chains, X, U)
    out = X.copy()
    for n in range(rho + 1):
        out += D[:, n, :] * Ts ** (n + 1) / math.factorial(n + 1)
    return out


def estimate_f_max(sys: ControlAffineSystem, rho: int, sample_states, sample_controls,
                   n_samples: int = 20000, seed: int = 0, inflation: float = 1.2,
                   chains: StateChains | None = None) -> np.ndarray:
    """Per-row max |F_i^{(rho+1)}(x, u)| over sampled (x, u), inflated."""
    rng = np.random.default_rng(seed)
    X = sample_states(rng, n_samples)
    U = sample_controls(rng, n_samples)
    if chains is None or chains.depth < rho + 1:
        chains = state_chains(sys, rho + 1)
    D = total_derivatives(chains, X, U)[:, rho + 1, :]
    return inflation * np.max(np.abs(D), axis=0)


def truncation_error_bound(rho: int, k: int, Ts: float, f_max) -> np.ndarray:
    """(k Ts)^{rho+1} / (rho+1)! * F_max, per state row."""
    return (k * Ts) ** (rho + 1) / math.factorial(rho + 1) * np.asarray(f_max, float)
