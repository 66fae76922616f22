"""
Centralised configuration for robust mean field social control experiments.

Configurations live in small INI files. Matrices are written row by row with
``;`` between rows and ``,`` between entries, e.g. ``A = 0.3,0.7; -0.9,0.5``.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .model import CostSpec, SystemModel

INIT_MODES = ("lmi", "user", "zero-check")
DISTURBANCE_MODES = ("per-outer", "per-inner", "both")
DISTRIBUTIONS = ("fixed", "random", "worst")
QUADRATURES = ("trapezoid", "left")


@dataclass(slots=True)
class DualLoopConfig:
    """Stopping rule and iteration caps of the dual-loop solver."""

    xi: float = 1e-5
    max_outer: int = 100
    max_inner: int = 100
    epsilon_lmi: float = 5.0

    def __post_init__(self) -> None:
        if not self.xi > 0:
            raise ConfigError("dualloop.xi must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigError("dualloop iteration caps must be at least 1")
        if not self.epsilon_lmi > 0:
            raise ConfigError("dualloop.epsilon must be positive")


@dataclass(slots=True)
class InitConfig:
    """How the initial admissible gains are produced."""

    mode: str = "lmi"
    epsilon: Optional[float] = None
    K0: Optional[np.ndarray] = None
    # accepted for configuration compatibility; the conic LMI solve is deterministic
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in INIT_MODES:
            raise ConfigError(f"init.mode must be one of {INIT_MODES}, got {self.mode!r}")
        if self.mode == "user" and self.K0 is None:
            raise ConfigError("init.mode = user requires init.K0")


@dataclass(slots=True)
class SimConfig:
    """Population simulation settings."""

    N: int = 500
    dt: float = 0.001
    horizon: float = 14.0
    Ns: int = 500
    seed: int = 2024
    x0_low: np.ndarray = field(default_factory=lambda: np.array([-4.0, 0.0]))
    x0_high: np.ndarray = field(default_factory=lambda: np.array([0.0, 4.0]))
    # Euler-Maruyama steps per sampling interval dt
    substeps: int = 1

    def __post_init__(self) -> None:
        self.x0_low = np.asarray(self.x0_low, dtype=float).ravel()
        self.x0_high = np.asarray(self.x0_high, dtype=float).ravel()
        if not self.dt > 0:
            raise ConfigError("sim.dt must be positive")
        if self.N < 1 or self.Ns < 1:
            raise ConfigError("sim.N and sim.Ns must be at least 1")
        if self.substeps < 1:
            raise ConfigError("sim.substeps must be at least 1")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("sim.horizon must be a multiple of sim.dt")
        if self.x0_low.shape != self.x0_high.shape or np.any(self.x0_low > self.x0_high):
            raise ConfigError("sim.x0_low and sim.x0_high must bound a box")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def substep_dt(self) -> float:
        return self.dt / self.substeps

    @property
    def x0_mean(self) -> np.ndarray:
        return (self.x0_low + self.x0_high) / 2.0


@dataclass(slots=True)
class IrlConfig:
    """Data collection windows and exploration signals of the learning pipeline."""

    t1: float = 0.0
    tl: float = 14.0
    T: float = 0.1
    Ts: float = 0.001
    K_exp: np.ndarray = field(default_factory=lambda: np.array([[6.0, -3.0]]))
    L_exp: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.0]]))
    sigma1: float = 5.0
    sigma2: float = 10.0
    n1: int = 100
    n2: int = 100
    omega1: Tuple[float, float] = (-100.0, 100.0)
    omega2: Tuple[float, float] = (-300.0, 300.0)
    exploration: bool = True
    quadrature: str = "trapezoid"

    def __post_init__(self) -> None:
        if not (self.T > 0 and self.Ts > 0):
            raise ConfigError("irl.T and irl.Ts must be positive")
        if self.tl - self.t1 < self.T:
            raise ConfigError("irl window [t1, tl] shorter than one window length T")
        if self.quadrature not in QUADRATURES:
            raise ConfigError(f"irl.quadrature must be one of {QUADRATURES}")


@dataclass(slots=True)
class RobustConfig:
    """Disturbance sweep settings of the robustness harness."""

    grid: List[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    mode: str = "per-outer"
    distribution: str = "fixed"
    seed: int = 7
    iterations: int = 30
    steady_window: int = 5
    k_fixed: int = 1
    error_cap: float = 1e3
    inner_xi: float = 1e-10

    def __post_init__(self) -> None:
        if self.mode not in DISTURBANCE_MODES:
            raise ConfigError(f"robust.mode must be one of {DISTURBANCE_MODES}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"robust.distribution must be one of {DISTRIBUTIONS}")
        if any(value < 0 or not np.isfinite(value) for value in self.grid):
            raise ConfigError("robust.grid magnitudes must be finite and non-negative")
        if list(self.grid) != sorted(self.grid):
            raise ConfigError("robust.grid must be sorted ascending")
        if self.iterations < self.steady_window:
            raise ConfigError("robust.iterations must cover the steady window")


@dataclass(slots=True)
class ExperimentConfig:
    """Application-wide configuration."""

    model: SystemModel
    cost: CostSpec
    dualloop: DualLoopConfig = field(default_factory=DualLoopConfig)
    init: InitConfig = field(default_factory=InitConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    irl: IrlConfig = field(default_factory=IrlConfig)
    robust: RobustConfig = field(default_factory=RobustConfig)
    output_dir: Path = Path("./runs/latest")
    log_level: str = "INFO"

    @property
    def init_epsilon(self) -> float:
        return self.init.epsilon if self.init.epsilon is not None else self.dualloop.epsilon_lmi


def parse_matrix(text: str) -> np.ndarray:
    rows = [row.strip() for row in text.strip().split(";") if row.strip()]
    if not rows:
        raise ConfigError("empty matrix literal")
    try:
        values = [[float(entry) for entry in row.split(",")] for row in rows]
    except ValueError as exc:
        raise ConfigError(f"bad matrix literal {text!r}: {exc}") from exc
    if len({len(row) for row in values}) != 1:
        raise ConfigError(f"ragged matrix literal {text!r}")
    return np.array(values, dtype=float)


def format_matrix(matrix: np.ndarray) -> str:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    return "; ".join(",".join(repr(float(v)) for v in row) for row in matrix)


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(item) for item in text.replace(";", ",").split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _format_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _section(parser: configparser.ConfigParser, name: str) -> Dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def _require(section: Dict[str, str], key: str, block: str) -> str:
    if key not in section:
        raise ConfigError(f"missing key {block}.{key}")
    return section[key]


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"bad boolean {text!r}")


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from exc

    if not parser.has_section("model") or not parser.has_section("cost"):
        raise ConfigError("configuration needs [model] and [cost] sections")
    model_block = _section(parser, "model")
    model = SystemModel(
        **{key: parse_matrix(_require(model_block, key.lower(), "model")) for key in "ABGCD"}
    )
    cost_block = _section(parser, "cost")
    try:
        cost = CostSpec(
            Q=parse_matrix(_require(cost_block, "q", "cost")),
            R=parse_matrix(_require(cost_block, "r", "cost")),
            Gamma=parse_matrix(_require(cost_block, "gamma_matrix", "cost")),
            gamma=float(_require(cost_block, "gamma", "cost")),
        )
        dual = _section(parser, "dualloop")
        dualloop = DualLoopConfig(
            xi=float(dual.get("xi", 1e-5)),
            max_outer=int(dual.get("max_outer", 100)),
            max_inner=int(dual.get("max_inner", 100)),
            epsilon_lmi=float(dual.get("epsilon", 5.0)),
        )
        init_block = _section(parser, "init")
        init = InitConfig(
            mode=init_block.get("mode", "lmi"),
            epsilon=float(init_block["epsilon"]) if "epsilon" in init_block else None,
            K0=parse_matrix(init_block["k0"]) if "k0" in init_block else None,
            seed=int(init_block["seed"]) if "seed" in init_block else None,
        )
        sim_block = _section(parser, "sim")
        defaults = SimConfig()
        sim = SimConfig(
            N=int(sim_block.get("n", defaults.N)),
            dt=float(sim_block.get("dt", defaults.dt)),
            horizon=float(sim_block.get("horizon", defaults.horizon)),
            Ns=int(sim_block.get("ns", defaults.Ns)),
            seed=int(sim_block.get("seed", defaults.seed)),
            x0_low=_parse_floats(sim_block["x0_low"]) if "x0_low" in sim_block else defaults.x0_low,
            x0_high=_parse_floats(sim_block["x0_high"]) if "x0_high" in sim_block else defaults.x0_high,
            substeps=int(sim_block.get("substeps", defaults.substeps)),
        )
        irl_block = _section(parser, "irl")
        irl_defaults = IrlConfig()
        irl = IrlConfig(
            t1=float(irl_block.get("t1", irl_defaults.t1)),
            tl=float(irl_block.get("tl", irl_defaults.tl)),
            T=float(irl_block.get("t", irl_defaults.T)),
            Ts=float(irl_block.get("ts", irl_defaults.Ts)),
            K_exp=parse_matrix(irl_block["k_exp"]) if "k_exp" in irl_block else irl_defaults.K_exp,
            L_exp=parse_matrix(irl_block["l_exp"]) if "l_exp" in irl_block else irl_defaults.L_exp,
            sigma1=float(irl_block.get("sigma1", irl_defaults.sigma1)),
            sigma2=float(irl_block.get("sigma2", irl_defaults.sigma2)),
            n1=int(irl_block.get("n1", irl_defaults.n1)),
            n2=int(irl_block.get("n2", irl_defaults.n2)),
            omega1=tuple(_parse_floats(irl_block["omega1"])) if "omega1" in irl_block else irl_defaults.omega1,
            omega2=tuple(_parse_floats(irl_block["omega2"])) if "omega2" in irl_block else irl_defaults.omega2,
            exploration=_bool(irl_block.get("exploration", "true")),
            quadrature=irl_block.get("quadrature", irl_defaults.quadrature),
        )
        robust_block = _section(parser, "robust")
        robust_defaults = RobustConfig()
        robust = RobustConfig(
            grid=_parse_floats(robust_block["grid"]) if "grid" in robust_block else robust_defaults.grid,
            mode=robust_block.get("mode", robust_defaults.mode),
            distribution=robust_block.get("distribution", robust_defaults.distribution),
            seed=int(robust_block.get("seed", robust_defaults.seed)),
            iterations=int(robust_block.get("iterations", robust_defaults.iterations)),
            steady_window=int(robust_block.get("steady_window", robust_defaults.steady_window)),
            k_fixed=int(robust_block.get("k_fixed", robust_defaults.k_fixed)),
            error_cap=float(robust_block.get("error_cap", robust_defaults.error_cap)),
            inner_xi=float(robust_block.get("inner_xi", robust_defaults.inner_xi)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    output_block = _section(parser, "output")
    return ExperimentConfig(
        model=model,
        cost=cost,
        dualloop=dualloop,
        init=init,
        sim=sim,
        irl=irl,
        robust=robust,
        output_dir=Path(output_block.get("dir", "./runs/latest")),
        log_level=output_block.get("log_level", "INFO"),
    )


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text)


def serialize_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["model"] = {key.lower(): format_matrix(getattr(config.model, key)) for key in "ABGCD"}
    parser["cost"] = {
        "q": format_matrix(config.cost.Q),
        "r": format_matrix(config.cost.R),
        "gamma_matrix": format_matrix(config.cost.Gamma),
        "gamma": repr(config.cost.gamma),
    }
    parser["dualloop"] = {
        "xi": repr(config.dualloop.xi),
        "max_outer": str(config.dualloop.max_outer),
        "max_inner": str(config.dualloop.max_inner),
        "epsilon": repr(config.dualloop.epsilon_lmi),
    }
    init_block = {"mode": config.init.mode}
    if config.init.epsilon is not None:
        init_block["epsilon"] = repr(config.init.epsilon)
    if config.init.K0 is not None:
        init_block["k0"] = format_matrix(config.init.K0)
    if config.init.seed is not None:
        init_block["seed"] = str(config.init.seed)
    parser["init"] = init_block
    sim = config.sim
    parser["sim"] = {
        "n": str(sim.N),
        "dt": repr(sim.dt),
        "horizon": repr(sim.horizon),
        "ns": str(sim.Ns),
        "seed": str(sim.seed),
        "x0_low": _format_floats(sim.x0_low),
        "x0_high": _format_floats(sim.x0_high),
        "substeps": str(sim.substeps),
    }
    irl = config.irl
    parser["irl"] = {
        "t1": repr(irl.t1),
        "tl": repr(irl.tl),
        "t": repr(irl.T),
        "ts": repr(irl.Ts),
        "k_exp": format_matrix(irl.K_exp),
        "l_exp": format_matrix(irl.L_exp),
        "sigma1": repr(irl.sigma1),
        "sigma2": repr(irl.sigma2),
        "n1": str(irl.n1),
        "n2": str(irl.n2),
        "omega1": _format_floats(irl.omega1),
        "omega2": _format_floats(irl.omega2),
        "exploration": "true" if irl.exploration else "false",
        "quadrature": irl.quadrature,
    }
    robust = config.robust
    parser["robust"] = {
        "grid": _format_floats(robust.grid),
        "mode": robust.mode,
        "distribution": robust.distribution,
        "seed": str(robust.seed),
        "iterations": str(robust.iterations),
        "steady_window": str(robust.steady_window),
        "k_fixed": str(robust.k_fixed),
        "error_cap": repr(robust.error_cap),
        "inner_xi": repr(robust.inner_xi),
    }
    parser["output"] = {"dir": str(config.output_dir), "log_level": config.log_level}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode("utf-8")).hexdigest()


def population_example_config() -> ExperimentConfig:
    """The 500-agent population example with its exploration design."""
    model = SystemModel(
        A=np.array([[0.3, 0.7], [-0.9, 0.5]]),
        B=np.array([[0.2], [0.0]]),
        G=np.array([[0.1], [0.0]]),
        C=np.array([[0.01, 0.03], [0.05, 0.02]]),
        D=np.array([[0.05], [0.05]]),
    )
    cost = CostSpec(
        Q=10.0 * np.eye(2),
        R=np.array([[1.25]]),
        Gamma=0.9 * np.eye(2),
        gamma=2.0,
    )
    return ExperimentConfig(model=model, cost=cost, sim=SimConfig(substeps=10))


DEFAULT_CONFIG = population_example_config()
