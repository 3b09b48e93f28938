import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from dynamics import METHODS, SolverOptions
from errors import ConfigError, GdfError
from model import CoefficientModel, make_kernel, rate_family
from operators import POLICIES
from spaces import StateVector

load_dotenv()

VERSION = "1.0.0"

OUTPUT_DIR_ENV = "GDF_OUTPUT_DIR"
LOG_LEVEL_ENV = "GDF_LOG_LEVEL"
DEFAULT_OUTPUT_DIR = "output"

CONFIG_DIR = Path(__file__).parent / "configs"


# GDF_OUTPUT_DIR (environment or .env) wins over the config/CLI value
def output_directory(default: Optional[str] = None) -> Path:
    return Path(os.getenv(OUTPUT_DIR_ENV) or default or DEFAULT_OUTPUT_DIR)


def log_level() -> str:
    return (os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "experiment"
    fragmentation: dict = field(default_factory=lambda: {"family": "linear", "coeff": 2.0})
    growth: dict = field(default_factory=lambda: {"family": "linear", "coeff": 1.0})
    death: dict = field(default_factory=lambda: {"family": "zero"})
    kernel: Optional[dict] = field(default_factory=lambda: {"type": "monomer_shatter"})
    m: float = 2.0
    m_prime: float = 3.0
    N: int = 400
    t_end: float = 20.0
    sample_dt: float = 0.1
    rtol: float = 1e-8
    atol: float = 1e-12
    max_step: Optional[float] = None
    policy: str = "absorbing"
    method: str = "trbdf2"
    initial: dict = field(default_factory=lambda: {"size": 10, "amount": 10.0})
    t_min: float = 1.0
    t_max: Optional[float] = None
    eig_tol: float = 1e-10
    star_norm: bool = False
    force: bool = False
    output_dir: str = DEFAULT_OUTPUT_DIR
    deterministic: bool = True
    snapshot_indices: tuple = (1, 2, 5, 10, 20, 50)

    def __post_init__(self):
        if self.m < 0:
            raise ConfigError("m must be nonnegative")
        if self.m_prime <= self.m:
            raise ConfigError("m_prime must exceed m")
        if self.N < 2:
            raise ConfigError("N must be at least 2")
        if self.t_end <= 0 or self.sample_dt <= 0:
            raise ConfigError("t_end and sample_dt must be positive")
        if self.rtol <= 0 or self.atol <= 0 or self.eig_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise ConfigError("max_step must be positive")
        if self.policy not in POLICIES:
            raise ConfigError(f"Unknown policy: {self.policy}")
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method: {self.method}")
        if self.deterministic is not True:
            raise ConfigError("deterministic must be true; runs are seedless")
        if not self.snapshot_indices or any(int(i) < 1 for i in self.snapshot_indices):
            raise ConfigError("snapshot_indices must be positive sizes")
        object.__setattr__(self, "snapshot_indices", tuple(int(i) for i in self.snapshot_indices))
        self._check_initial()

    def _check_initial(self):
        keys = set(self.initial)
        if keys == {"size", "amount"}:
            if not 1 <= int(self.initial["size"]) <= self.N:
                raise ConfigError(f"initial size must lie in 1..{self.N}")
            if float(self.initial["amount"]) <= 0:
                raise ConfigError("initial amount must be positive")
        elif keys == {"values"}:
            values = list(self.initial["values"])
            if not values or len(values) > self.N or any(float(v) < 0 for v in values):
                raise ConfigError("initial values must be nonnegative and fit in N")
        else:
            raise ConfigError("initial must be {size, amount} or {values}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as ex:
            raise ConfigError(f"Malformed config: {ex}") from ex

    def to_dict(self) -> dict:
        out = asdict(self)
        out["snapshot_indices"] = list(self.snapshot_indices)
        return out

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as ex:
            raise ConfigError(f"Cannot read config {path}: {ex}") from ex
        except json.JSONDecodeError as ex:
            raise ConfigError(f"Config {path} is not valid JSON: {ex}") from ex
        return cls.from_dict(data)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    def build_model(self) -> CoefficientModel:
        try:
            kernel, induced = make_kernel(self.kernel)
            return CoefficientModel(
                fragmentation_rate=rate_family(self.fragmentation, induced),
                growth_rate=rate_family(self.growth),
                death_rate=rate_family(self.death),
                kernel=kernel,
                label=self.label,
            )
        except ConfigError:
            raise
        except GdfError as ex:
            raise ConfigError(f"Config {self.label} does not describe a valid model: {ex}") from ex

    def solver_options(self) -> SolverOptions:
        return SolverOptions(rtol=self.rtol, atol=self.atol, max_step=self.max_step, method=self.method)

    def initial_state(self) -> StateVector:
        if "values" in self.initial:
            values = [float(v) for v in self.initial["values"]]
            return StateVector(values + [0.0] * (self.N - len(values)))
        return StateVector.delta(int(self.initial["size"]), self.N, float(self.initial["amount"]))


# Figure configurations ship as configs/<fig_id>.json (initial condition 10 clusters of size 10)
FIGURE_IDS = ("fig1", "fig2", "fig3")


def figure_config(fig_id: str, **overrides) -> ExperimentConfig:
    if fig_id not in FIGURE_IDS:
        raise ConfigError(f"Unknown figure: {fig_id} (expected one of {list(FIGURE_IDS)})")
    with open(CONFIG_DIR / f"{fig_id}.json", "r", encoding="utf-8") as handle:
        data = json.load(handle)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)
