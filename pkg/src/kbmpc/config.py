"""Run configuration: one JSON tree with strict parsing and full defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plant import Limits, PlantParams, SamplingBox


class ConfigError(ValueError):
    """Malformed configuration document."""


@dataclass
class PlantSection:
    l0: float = 3.6
    l1: float = 6.0
    lH: float = 1.0
    omega_max: float = 2.0
    a_max: float = 2.0
    tan_phi_max: float = math.tan(0.6)
    v_max: float = 1.0
    dtheta_max: float = math.pi / 3

    def params(self) -> PlantParams:
        return PlantParams(self.l0, self.l1, self.lH)

    def limits(self) -> Limits:
        return Limits(self.omega_max, self.a_max, self.tan_phi_max, self.v_max, self.dtheta_max)


@dataclass
class DataSection:
    n_traj: int = 2000
    steps: int = 40
    Ts: float = 0.05
    mu_range: tuple[float, float] = (0.97, 0.99)
    kappa: float = 0.94
    position: float = 10.0
    heading: float = math.pi


@dataclass
class LiftingSection:
    rho: int = 2
    probe_points: int = 64
    probe_seed: int = 7


@dataclass
class EdmdSection:
    ridge: float | None = None  # None: 1e-8 * trace(gram) / dim
    chunk_traj: int = 2000
    validation_traj: int = 200


@dataclass
class EvaluationSection:
    n_rollouts: int = 1000
    steps: int = 20


@dataclass
class MpcSection:
    Np: int = 20
    Q: tuple[float, ...] = (10.0, 10.0, 1.0, 1.0, 0.0, 0.0, 10.0, 10.0)
    Q_Np: tuple[float, ...] | None = None  # None: 10 Q
    R: tuple[float, ...] = (0.01, 1.0)
    iter_max: int = 3
    eps_conv: float = 1e-4
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000


@dataclass
class TrackSection:
    reference: str = "parking"  # profile name or CSV path
    coarse_dt: float = 0.5
    mu: float = 0.98
    kappa: float = 0.94
    controllers: tuple[str, ...] = ("kbmpc", "lmpc")


@dataclass
class RunConfig:
    seed: int = 0
    plant: PlantSection = field(default_factory=PlantSection)
    data: DataSection = field(default_factory=DataSection)
    lifting: LiftingSection = field(default_factory=LiftingSection)
    edmd: EdmdSection = field(default_factory=EdmdSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    track: TrackSection = field(default_factory=TrackSection)
    timing: bool = True  # False writes zero solve times so every artifact is reproducible

    # derived seeds keep the streams independent
    @property
    def data_seed(self) -> int:
        return self.seed

    @property
    def eval_seed(self) -> int:
        return self.seed + 1

    @property
    def validation_seed(self) -> int:
        return self.seed + 2

    def sampling_box(self) -> SamplingBox:
        return SamplingBox(self.data.position, self.data.heading, self.plant.limits())

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        d, e, m = self.data, self.evaluation, self.mpc
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if d.n_traj < 1 or d.steps < 1 or not d.Ts > 0:
            raise ConfigError("data needs n_traj >= 1, steps >= 1, Ts > 0")
        if not d.mu_range[0] <= d.mu_range[1]:
            raise ConfigError("data.mu_range must be increasing")
        if self.lifting.rho < 0:
            raise ConfigError("lifting.rho must be non-negative")
        if self.edmd.ridge is not None and self.edmd.ridge < 0:
            raise ConfigError("edmd.ridge must be non-negative")
        if e.n_rollouts < 1 or e.steps < 1:
            raise ConfigError("evaluation needs at least one rollout and one step")
        if len(m.Q) != 8 or len(m.R) != 2 or (m.Q_Np is not None and len(m.Q_Np) != 8):
            raise ConfigError("mpc.Q and mpc.Q_Np take 8 diagonal entries, mpc.R takes 2")
        if min(m.Q) < 0 or min(m.R) < 0 or (m.Q_Np is not None and min(m.Q_Np) < 0):
            raise ConfigError("weights must be non-negative")
        if m.Np < 1 or m.iter_max < 1:
            raise ConfigError("mpc.Np and mpc.iter_max must be at least 1")
        bad = set(self.track.controllers) - {"kbmpc", "lmpc"}
        if bad or not self.track.controllers:
            raise ConfigError(f"unknown controllers {sorted(bad)}")
        try:
            self.plant.params()
            self.plant.limits()
            PlantParams(self.plant.l0, self.plant.l1, self.plant.lH, self.track.mu, self.track.kappa)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in doc.items()}
    return cls(**kwargs)


def from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "").validate()


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def mpc_config(cfg: RunConfig):
    """MpcConfig for the configured weights and limits."""
    from .mpc import MpcConfig
    m = cfg.mpc
    return MpcConfig(Np=m.Np, Q=np.diag(m.Q), Q_Np=None if m.Q_Np is None else np.diag(m.Q_Np),
                     R=np.diag(m.R), iter_max=m.iter_max, eps_conv=m.eps_conv, Ts=cfg.data.Ts,
                     limits=cfg.plant.limits(), qp_tol=m.qp_tol, qp_max_iter=m.qp_max_iter)
