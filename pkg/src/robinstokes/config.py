"""Experiment configuration: TOML in, validated dataclasses out.

Every section is optional except ``geometry`` and ``time``. Unknown keys
and invalid values raise :class:`ConfigError` naming the offending key.
Data fields are sympy expressions; the initial velocity is checked for
vanishing divergence symbolically when the config is parsed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import sympy as sym
import tomli
import tomli_w

from .forward import ForwardModel, ProblemData, TimeGrid
from .manufactured import ManufacturedSolution
from .mesh import Mesh, build_channel_mesh, refine
from .parameters import AdmissibleSet, RobinBasis, RobinCoefficient, default_basis

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text", "serialize_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class GeometryConfig:
    L: float = 2.0
    H: float = 1.0
    nx: int = 16
    ny: int = 8
    N: int = 2
    refinements: int = 0


@dataclass
class TimeConfig:
    T: float = 1.0
    n_t: int = 32


def _default_u0():
    return {"kind": "poiseuille", "amplitude": 0.5}


def _default_g():
    return {"kind": "pulsatile", "amplitude": 1.0, "modulation": 0.5}


def _zero():
    return {"kind": "zero"}


@dataclass
class DataConfig:
    u0: dict = field(default_factory=_default_u0)
    g: dict = field(default_factory=_default_g)
    kappa: dict = field(default_factory=_zero)
    f: dict = field(default_factory=_zero)


@dataclass
class ParameterSpaceConfig:
    time_knots: int = 10
    space_nodes: int = 1  # per segment; 0 puts a node at every outlet mesh vertex
    m: float = 0.5
    q_max: float = 5.0


@dataclass
class CoefficientConfig:
    """The coefficient used by ``forward``/``sensitivity`` and as synthetic truth."""

    value: object = "random"  # "random", "midpoint", a number or a coefficient list
    seed: int = 0


@dataclass
class MeasurementConfig:
    interval: list = field(default_factory=lambda: [0.25, 0.75])


@dataclass
class InversionConfig:
    reg: float = 0.0
    noise: float = 0.0
    seed: int = 0
    q_init: object = "midpoint"
    crime_free: bool = False
    max_iter: int = 25
    data_csv: str = ""


@dataclass
class ProbeConfig:
    n_pairs: int = 200
    seed: int = 0
    small_scale: float = 1e-3
    tolerance: float = 0.05


@dataclass
class HypothesesConfig:
    n_samples: int = 5
    n_pairs: int = 20
    seed: int = 0


@dataclass
class ConvergenceConfig:
    stream: str = "y**2*(H - y)**2*cos(x)"
    pressure: str = "sin(x)*cos(y)"
    time_factor: str = "1 + sin(2*pi*t)"
    nx: int = 4
    ny: int = 2
    levels: int = 3
    n_t0: int = 4
    # the temporal study uses a solution the P2/P1 pair represents exactly in space
    temporal_stream: str = "H*y**2/2 - y**3/3"
    temporal_pressure: str = "2*(L - x)"
    temporal_refinements: int = 2
    temporal_steps: list = field(default_factory=lambda: [4, 8, 16])
    coeffs: list = field(default_factory=lambda: [1.0, 2.0])


@dataclass
class SolverConfig:
    method: str = "lowrank"


_SECTIONS = {
    "geometry": GeometryConfig,
    "time": TimeConfig,
    "data": DataConfig,
    "parameter_space": ParameterSpaceConfig,
    "coefficient": CoefficientConfig,
    "measurement": MeasurementConfig,
    "inversion": InversionConfig,
    "probe": ProbeConfig,
    "hypotheses": HypothesesConfig,
    "convergence": ConvergenceConfig,
    "solver": SolverConfig,
}
_REQUIRED = ("geometry", "time")


t_, x_, y_ = sym.symbols("t x y", real=True)


def _components(entry: dict, key: str, H: float, L: float, T: float, timed: bool):
    """Sympy (x, y) components of a data field entry."""
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(f"{key}: expected a table with a 'kind' entry")
    kind = entry["kind"]
    allowed = {
        "zero": set(),
        "poiseuille": {"amplitude"},
        "pulsatile": {"amplitude", "modulation"},
        "expression": {"x", "y"},
    }
    if kind not in allowed:
        raise ConfigError(f"{key}.kind: unknown kind {kind!r}")
    extra = set(entry) - allowed[kind] - {"kind"}
    if extra:
        raise ConfigError(f"{key}.{sorted(extra)[0]}: unknown key for kind {kind!r}")
    prof = 4 * y_ * (H - y_) / H**2
    if kind == "zero":
        return sym.Integer(0), sym.Integer(0)
    if kind == "poiseuille":
        return _number(entry.get("amplitude", 1.0), f"{key}.amplitude") * prof, sym.Integer(0)
    if kind == "pulsatile":
        a = _number(entry.get("amplitude", 1.0), f"{key}.amplitude")
        b = _number(entry.get("modulation", 0.5), f"{key}.modulation")
        if not timed:
            raise ConfigError(f"{key}.kind: 'pulsatile' needs a time variable")
        return a * (1 + b * sym.sin(2 * sym.pi * t_ / T)) * prof, sym.Integer(0)
    env = {"x": x_, "y": y_, "t": t_, "H": sym.Float(H), "L": sym.Float(L), "T": sym.Float(T)}
    out = []
    for c in ("x", "y"):
        try:
            e = sym.sympify(str(entry.get(c, "0")), locals=env)
        except (sym.SympifyError, SyntaxError, TypeError) as exc:
            raise ConfigError(f"{key}.{c}: cannot parse expression ({exc})") from None
        free = e.free_symbols - ({x_, y_, t_} if timed else {x_, y_})
        if free:
            raise ConfigError(f"{key}.{c}: unknown symbols {sorted(map(str, free))}")
        out.append(e)
    return tuple(out)


def _number(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    return float(v)


def _field_fn(comps, timed):
    if all(c == 0 for c in comps):
        return None
    args = (t_, x_, y_) if timed else (x_, y_)
    fns = [sym.lambdify(args, c, "numpy") for c in comps]

    def ev(fn, *a):
        pts = a[-1]
        vals = fn(*a[:-1], pts[:, 0], pts[:, 1])
        return np.broadcast_to(np.asarray(vals, dtype=float), (len(pts),))

    if timed:
        return lambda t, pts: np.column_stack([ev(fn, t, pts) for fn in fns])
    return lambda pts: np.column_stack([ev(fn, pts) for fn in fns])


@dataclass
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    parameter_space: ParameterSpaceConfig = field(default_factory=ParameterSpaceConfig)
    coefficient: CoefficientConfig = field(default_factory=CoefficientConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    hypotheses: HypothesesConfig = field(default_factory=HypothesesConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------
    def validate(self):
        g, tm, ps = self.geometry, self.time, self.parameter_space
        for key in ("L", "H"):
            if _number(getattr(g, key), f"geometry.{key}") <= 0:
                raise ConfigError(f"geometry.{key}: must be positive")
        for key in ("nx", "ny", "N"):
            _count(getattr(g, key), f"geometry.{key}")
        if _integer(g.refinements, "geometry.refinements") < 0:
            raise ConfigError("geometry.refinements: must be nonnegative")
        if g.ny % g.N:
            raise ConfigError("geometry.ny: must be divisible by geometry.N")
        if _number(tm.T, "time.T") <= 0:
            raise ConfigError("time.T: must be positive")
        _count(tm.n_t, "time.n_t")
        if _integer(ps.time_knots, "parameter_space.time_knots") < 2:
            raise ConfigError("parameter_space.time_knots: need at least 2")
        if _integer(ps.space_nodes, "parameter_space.space_nodes") < 0:
            raise ConfigError("parameter_space.space_nodes: must be nonnegative")
        if _number(ps.m, "parameter_space.m") <= 0:
            raise ConfigError(
                "parameter_space.m: must be positive; the Robin coefficient needs a uniform lower bound q >= m > 0"
            )
        if _number(ps.q_max, "parameter_space.q_max") <= ps.m:
            raise ConfigError("parameter_space.q_max: must exceed parameter_space.m")
        iv = self.measurement.interval
        if not isinstance(iv, list) or len(iv) != 2:
            raise ConfigError("measurement.interval: expected [a, b]")
        a, b = (_number(v, "measurement.interval") for v in iv)
        if not (0 <= a < b <= g.H):
            raise ConfigError(f"measurement.interval: must be a nonempty subinterval of [0, {g.H}]")
        self._check_coefficient(self.coefficient.value, "coefficient.value")
        _integer(self.coefficient.seed, "coefficient.seed")
        inv = self.inversion
        if _number(inv.reg, "inversion.reg") < 0:
            raise ConfigError("inversion.reg: must be nonnegative")
        if _number(inv.noise, "inversion.noise") < 0:
            raise ConfigError("inversion.noise: must be nonnegative")
        _integer(inv.seed, "inversion.seed")
        self._check_coefficient(inv.q_init, "inversion.q_init")
        if not isinstance(inv.crime_free, bool):
            raise ConfigError("inversion.crime_free: expected a boolean")
        _count(inv.max_iter, "inversion.max_iter")
        if not isinstance(inv.data_csv, str):
            raise ConfigError("inversion.data_csv: expected a path string")
        _count(self.probe.n_pairs, "probe.n_pairs")
        _integer(self.probe.seed, "probe.seed")
        if not 0 < _number(self.probe.small_scale, "probe.small_scale") < 0.5:
            raise ConfigError("probe.small_scale: must lie in (0, 0.5)")
        if not 0 <= _number(self.probe.tolerance, "probe.tolerance") < 1:
            raise ConfigError("probe.tolerance: must lie in [0, 1)")
        _count(self.hypotheses.n_samples, "hypotheses.n_samples")
        _count(self.hypotheses.n_pairs, "hypotheses.n_pairs")
        _integer(self.hypotheses.seed, "hypotheses.seed")
        cv = self.convergence
        for key in ("nx", "ny", "n_t0"):
            _count(getattr(cv, key), f"convergence.{key}")
        if _integer(cv.levels, "convergence.levels") < 2:
            raise ConfigError("convergence.levels: need at least 2 levels to compute rates")
        if cv.ny % g.N:
            raise ConfigError("convergence.ny: must be divisible by geometry.N")
        if not isinstance(cv.temporal_steps, list) or len(cv.temporal_steps) < 2:
            raise ConfigError("convergence.temporal_steps: need at least 2 step counts")
        for s in cv.temporal_steps:
            _count(s, "convergence.temporal_steps")
        if _integer(cv.temporal_refinements, "convergence.temporal_refinements") < 0:
            raise ConfigError("convergence.temporal_refinements: must be nonnegative")
        if not isinstance(cv.coeffs, list) or not cv.coeffs:
            raise ConfigError("convergence.coeffs: expected a nonempty list")
        for c in cv.coeffs:
            if _number(c, "convergence.coeffs") <= 0:
                raise ConfigError("convergence.coeffs: Robin coefficients must be positive")
        if self.solver.method not in ("lowrank", "direct"):
            raise ConfigError("solver.method: expected 'lowrank' or 'direct'")
        self._data_components()

    def _check_coefficient(self, v, key):
        if isinstance(v, str):
            if v not in ("random", "midpoint"):
                raise ConfigError(f"{key}: expected 'random', 'midpoint', a number or a list")
        elif isinstance(v, list):
            for c in v:
                _number(c, key)
        else:
            _number(v, key)

    def _data_components(self):
        g, T = self.geometry, self.time.T
        comps = {}
        for key, timed in (("u0", False), ("g", True), ("kappa", True), ("f", True)):
            comps[key] = _components(getattr(self.data, key), f"data.{key}", g.H, g.L, T, timed)
        ux, uy = comps["u0"]
        if sym.simplify(sym.diff(ux, x_) + sym.diff(uy, y_)) != 0:
            raise ConfigError("data.u0: initial velocity must be divergence-free")
        return comps

    # -- builders ---------------------------------------------------------
    def build_mesh(self) -> Mesh:
        g = self.geometry
        mesh = build_channel_mesh(g.L, g.H, g.nx, g.ny, g.N)
        for _ in range(g.refinements):
            mesh = refine(mesh)
        return mesh

    def build_grid(self) -> TimeGrid:
        return TimeGrid(self.time.T, self.time.n_t)

    def build_data(self) -> ProblemData:
        c = self._data_components()
        return ProblemData(
            u0=_field_fn(c["u0"], False),
            g=_field_fn(c["g"], True),
            kappa=_field_fn(c["kappa"], True),
            f=_field_fn(c["f"], True),
        )

    def build_basis(self, mesh: Mesh) -> RobinBasis:
        ps = self.parameter_space
        return default_basis(mesh, self.time.T, ps.time_knots, ps.space_nodes or None)

    def admissible_set(self) -> AdmissibleSet:
        return AdmissibleSet(self.parameter_space.m, self.parameter_space.q_max)

    def build_model(self) -> ForwardModel:
        mesh = self.build_mesh()
        return ForwardModel(
            mesh,
            self.build_grid(),
            self.build_data(),
            self.build_basis(mesh),
            window=tuple(self.measurement.interval),
            method=self.solver.method,
        )

    def resolve_coefficient(self, basis: RobinBasis, value=None, seed=None) -> RobinCoefficient:
        value = self.coefficient.value if value is None else value
        seed = self.coefficient.seed if seed is None else seed
        K = self.admissible_set()
        M = len(basis)
        if isinstance(value, str):
            if value == "midpoint":
                return RobinCoefficient.constant(basis, K.midpoint)
            rng = np.random.default_rng(seed)
            return RobinCoefficient(basis, rng.uniform(K.lower, K.upper, M))
        if isinstance(value, list):
            if len(value) != M:
                raise ConfigError(f"coefficient list has {len(value)} entries, basis has {M}")
            return RobinCoefficient(basis, np.asarray(value, dtype=float))
        return RobinCoefficient.constant(basis, float(value))

    def manufactured(self, temporal: bool = False) -> ManufacturedSolution:
        cv, g = self.convergence, self.geometry
        if temporal:
            return ManufacturedSolution(cv.temporal_stream, cv.temporal_pressure, cv.time_factor, g.H, g.L)
        return ManufacturedSolution(cv.stream, cv.pressure, cv.time_factor, g.H, g.L)

    def convergence_mesh(self) -> Mesh:
        return build_channel_mesh(self.geometry.L, self.geometry.H, self.convergence.nx, self.convergence.ny, self.geometry.N)

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose every seed is replaced by ``seed``."""
        d = self.to_dict()
        for sec in ("coefficient", "inversion", "probe", "hypotheses"):
            d[sec]["seed"] = int(seed)
        return _from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _integer(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    return v


def _count(v, key):
    if _integer(v, key) < 1:
        raise ConfigError(f"{key}: must be at least 1")
    return v


def _from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a table")
    for name in raw:
        if name not in _SECTIONS:
            raise ConfigError(f"{name}: unknown section")
    for name in _REQUIRED:
        if name not in raw:
            raise ConfigError(f"{name}: required section missing")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected a table")
        names = {f.name for f in fields(cls)}
        for key in sec:
            if key not in names:
                raise ConfigError(f"{name}.{key}: unknown key")
        # TOML integers are acceptable where floats are expected
        vals = {}
        for f in fields(cls):
            if f.name in sec:
                v = sec[f.name]
                if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                vals[f.name] = v
        kwargs[name] = cls(**vals)
    return ExperimentConfig(**kwargs)


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML ({exc})") from None
    return _from_dict(raw)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a TOML experiment file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {p}")
    return parse_config_text(p.read_text())


def serialize_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.to_dict())
