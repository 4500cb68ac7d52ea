"""Tractor-trailer plant with longitudinal and side slip.

State ``x = [x0, y0, theta0, theta1, tan_phi, v]``, input ``u = [omega, a]``,
output ``y = [x0, y0, theta0, theta1, tan_phi, v, x1, y1]``.  Headings are
unwrapped reals.  The steering term is ``tan(kappa * arctan(tan_phi))``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from . import lie

N_X = 6
N_U = 2
N_Y = 8
STATE_NAMES = ("x0", "y0", "theta0", "theta1", "tan_phi", "v")
CONTROL_NAMES = ("omega", "a")
OUTPUT_NAMES = STATE_NAMES + ("x1", "y1")
REFERENCE_HEADER = ("t",) + OUTPUT_NAMES


@dataclass(frozen=True)
class PlantParams:
    l0: float = 3.6
    l1: float = 6.0
    lH: float = 1.0
    mu: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.l0 > 0 and self.l1 > 0 and self.lH >= 0):
            raise ValueError("lengths must satisfy l0 > 0, l1 > 0, lH >= 0")
        if not (0 < self.mu <= 1.5 and 0 < self.kappa <= 1.5):
            raise ValueError("slip factors must lie in (0, 1.5]")

    def nominal(self) -> "PlantParams":
        return PlantParams(self.l0, self.l1, self.lH, 1.0, 1.0)

    def with_slip(self, mu: float, kappa: float) -> "PlantParams":
        return PlantParams(self.l0, self.l1, self.lH, mu, kappa)


@dataclass(frozen=True)
class Limits:
    omega_max: float = 2.0
    a_max: float = 2.0
    tan_phi_max: float = math.tan(0.6)
    v_max: float = 1.0
    dtheta_max: float = math.pi / 3

    def __post_init__(self):
        if min(self.omega_max, self.a_max, self.tan_phi_max, self.v_max, self.dtheta_max) <= 0:
            raise ValueError("all limits must be strictly positive")

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.omega_max, self.a_max])


DEFAULT_PARAMS = PlantParams(l0=3.6, l1=6.0, lH=1.0)
DEFAULT_LIMITS = Limits()
SLIP_MU_RANGE = (0.97, 0.99)
SLIP_KAPPA = 0.94


def plant_derivative(x, u, p: PlantParams) -> np.ndarray:
    """Right-hand side of the slip dynamics; accepts single points or batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    U = np.broadcast_to(np.atleast_2d(u), (X.shape[0], N_U))
    out = _kernels.plant_rhs_batch(X, U, p.l0, p.l1, p.lH,
                                   np.full(X.shape[0], p.mu), np.full(X.shape[0], p.kappa))
    return out[0] if single else out


def output_map(x, p: PlantParams) -> np.ndarray:
    """Append the trailer position (x1, y1) to the state."""
    x = np.asarray(x, dtype=float)
    th0 = x[..., 2]
    th1 = x[..., 3]
    x1 = x[..., 0] - p.lH * np.cos(th0) - p.l1 * np.cos(th1)
    y1 = x[..., 1] - p.lH * np.sin(th0) - p.l1 * np.sin(th1)
    return np.concatenate([x, x1[..., None], y1[..., None]], axis=-1)


def rk4_step(x, u, p: PlantParams, Ts: float, substeps: int = 1) -> np.ndarray:
    """One zero-order-hold RK4 step of length Ts (optionally subdivided)."""
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    U = np.broadcast_to(np.atleast_2d(np.asarray(u, dtype=float)), (X.shape[0], N_U))
    n = X.shape[0]
    out = _kernels.rk4_batch(X, U, p.l0, p.l1, p.lH, np.full(n, p.mu),
                             np.full(n, p.kappa), float(Ts), int(substeps))
    return out[0] if single else out


def rk4_step_batch(X, U, p: PlantParams, mu, kappa, Ts: float, substeps: int = 1) -> np.ndarray:
    """RK4 step for a batch with per-row slip factors."""
    X = np.ascontiguousarray(X, dtype=float)
    n = X.shape[0]
    return _kernels.rk4_batch(X, np.ascontiguousarray(U, dtype=float), p.l0, p.l1, p.lH,
                              np.broadcast_to(np.asarray(mu, float), (n,)),
                              np.broadcast_to(np.asarray(kappa, float), (n,)),
                              float(Ts), int(substeps))


def simulate(x0, controls, p: PlantParams, Ts: float, substeps: int = 1) -> np.ndarray:
    """Roll the plant under a control sequence; returns states of shape (K+1, 6)."""
    controls = np.asarray(controls, dtype=float).reshape(-1, N_U)
    xs = np.empty((len(controls) + 1, N_X))
    xs[0] = x0
    for k, u in enumerate(controls):
        xs[k + 1] = rk4_step(xs[k], u, p, Ts, substeps)
    return xs


def check_limits(y, u, lim: Limits) -> dict[str, float]:
    """Signed margins for each physical limit; negative means violated."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    return {
        "omega": lim.omega_max - abs(u[0]),
        "a": lim.a_max - abs(u[1]),
        "tan_phi": lim.tan_phi_max - abs(y[4]),
        "v": lim.v_max - abs(y[5]),
        "dtheta": lim.dtheta_max - abs(y[2] - y[3]),
    }


def tractor_trailer_system(p: PlantParams) -> lie.ControlAffineSystem:
    """Expression form of the dynamics and output map for the derivative engine."""
    x0, y0, th0, th1, tphi, v = (lie.var(i) for i in range(N_X))
    tk = lie.tan(p.kappa * lie.atan(tphi))
    mv = p.mu * v
    dth = th0 - th1
    drift = [
        mv * lie.cos(th0),
        mv * lie.sin(th0),
        mv * tk / p.l0,
        mv * (lie.sin(dth) - tk * lie.cos(dth) * (p.lH / p.l0)) / p.l1,
        lie.const(0.0),
        lie.const(0.0),
    ]
    g_omega = [lie.const(0.0)] * 4 + [lie.const(1.0), lie.const(0.0)]
    g_acc = [lie.const(0.0)] * 5 + [lie.const(1.0)]
    output = [x0, y0, th0, th1, tphi, v,
              x0 - p.lH * lie.cos(th0) - p.l1 * lie.cos(th1),
              y0 - p.lH * lie.sin(th0) - p.l1 * lie.sin(th1)]
    return lie.ControlAffineSystem.from_exprs(drift, [g_omega, g_acc], output, N_X)


# --------------------------------------------------------------------------
# operating box sampling (shared by data generation, probing and evaluation)

@dataclass(frozen=True)
class SamplingBox:
    """Uniform sampling region for states and inputs."""

    position: float = 10.0
    heading: float = math.pi
    limits: Limits = field(default_factory=Limits)

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lim = self.limits
        X = np.empty((n, N_X))
        X[:, 0] = rng.uniform(-self.position, self.position, n)
        X[:, 1] = rng.uniform(-self.position, self.position, n)
        X[:, 2] = rng.uniform(-self.heading, self.heading, n)
        X[:, 3] = X[:, 2] - rng.uniform(-lim.dtheta_max, lim.dtheta_max, n)
        X[:, 4] = rng.uniform(-lim.tan_phi_max, lim.tan_phi_max, n)
        X[:, 5] = rng.uniform(-lim.v_max, lim.v_max, n)
        return X

    def sample_controls(self, rng: np.random.Generator, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return rng.uniform(-1.0, 1.0, shape + (N_U,)) * self.limits.u_max


# --------------------------------------------------------------------------
# reference trajectories

@dataclass(frozen=True)
class ReferenceProfile:
    """Initial state plus one control per coarse interval."""

    x_init: tuple[float, ...]
    controls: tuple[tuple[float, float], ...]
    name: str = "custom"

    @classmethod
    def from_segments(cls, x_init, segments: Sequence[tuple[float, float, float]],
                      coarse_dt: float, name: str = "custom") -> "ReferenceProfile":
        """Build from (duration, omega, a) segments; durations are rounded to nodes."""
        controls = []
        for duration, omega, acc in segments:
            n = int(round(duration / coarse_dt))
            controls.extend([(float(omega), float(acc))] * n)
        return cls(tuple(float(v) for v in x_init), tuple(controls), name)


def parking_profile(coarse_dt: float = 0.5) -> ReferenceProfile:
    """Drive forward at 0.8 m/s, turn left until the rig points roughly
    north, let the trailer straighten, stop, then back into a slot.

    Speeds stay below v_max so a slipping plant can still keep pace.
    """
    segments = [
        (2.0, 0.0, 0.4),     # accelerate to 0.8 m/s
        (4.0, 0.0, 0.0),
        (2.0, 0.25, 0.0),    # steer into the arc
        (12.0, 0.0, 0.0),
        (2.0, -0.25, 0.0),   # straighten
        (14.0, 0.0, 0.0),
        (2.0, 0.0, -0.4),    # stop
        (2.0, 0.0, -0.3),    # start reversing
        (8.0, 0.0, 0.0),
        (2.0, 0.0, 0.3),     # stop in the slot
    ]
    return ReferenceProfile.from_segments((0.0, 0.0, 0.0, 0.0, 0.0, 0.0), segments,
                                          coarse_dt, name="parking")


def straight_profile(speed: float = 1.0, duration: float = 5.0,
                     coarse_dt: float = 0.5) -> ReferenceProfile:
    return ReferenceProfile.from_segments((0.0, 0.0, 0.0, 0.0, 0.0, speed),
                                          [(duration, 0.0, 0.0)], coarse_dt, name="straight")


PROFILES = {"parking": parking_profile, "straight": straight_profile}


@dataclass(frozen=True)
class Reference:
    """Reference outputs on the fine grid; row k is the target at t = k*Ts."""

    t: np.ndarray
    outputs: np.ndarray
    Ts: float

    def __len__(self) -> int:
        return len(self.t)

    def window(self, k: int, n: int) -> np.ndarray:
        """Outputs k .. k+n-1, holding the terminal row past the end."""
        idx = np.minimum(np.arange(k, k + n), len(self.t) - 1)
        return self.outputs[idx]


def generate_reference(profile: ReferenceProfile, p: PlantParams, coarse_dt: float,
                       Ts: float, lim: Limits | None = None, substeps: int = 20) -> Reference:
    """Nominal rollout on a coarse grid, linearly interpolated to Ts.

    The coarse nodes lie on the nominal trajectory, but the interpolated
    samples in between do not satisfy the dynamics at resolution Ts.
    """
    if not coarse_dt > Ts > 0:
        raise ValueError("need coarse_dt > Ts > 0")
    controls = np.asarray(profile.controls, dtype=float).reshape(-1, N_U)
    if len(controls) < 1:
        raise ValueError("reference profile needs at least two coarse nodes")
    if not np.all(np.isfinite(controls)) or len(profile.x_init) != N_X:
        raise ValueError("ill-formed reference profile")
    nominal = p.nominal()
    xs = simulate(np.asarray(profile.x_init), controls, nominal, coarse_dt, substeps)
    ys = output_map(xs, nominal)
    if lim is not None:
        for k, y in enumerate(ys):
            u = controls[min(k, len(controls) - 1)]
            bad = {name: m for name, m in check_limits(y, u, lim).items() if m < 0}
            if bad:
                raise ValueError(f"profile violates limits at coarse node {k}: {bad}")
    t_coarse = np.arange(len(xs)) * coarse_dt
    n_fine = int(math.floor(t_coarse[-1] / Ts + 1e-9)) + 1
    t = np.arange(n_fine) * Ts
    out = np.column_stack([np.interp(t, t_coarse, ys[:, j]) for j in range(N_Y)])
    return Reference(t, out, Ts)


def save_reference_csv(ref: Reference, path, comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REFERENCE_HEADER)
    for t, y in zip(ref.t, ref.outputs):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in y])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_reference_csv(path, Ts: float | None = None) -> Reference:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != REFERENCE_HEADER:
        raise ValueError(f"reference CSV header must be {','.join(REFERENCE_HEADER)}")
    data = np.array(rows[1:], dtype=float)
    if data.ndim != 2 or len(data) < 1:
        raise ValueError("reference CSV has no rows")
    t = data[:, 0]
    step = float(t[1] - t[0]) if len(t) > 1 else (Ts or 0.0)
    if Ts is not None and len(t) > 1 and not math.isclose(step, Ts, rel_tol=1e-6):
        raise ValueError(f"reference step {step} does not match Ts={Ts}")
    return Reference(t, data[:, 1:], Ts if Ts is not None else step)
