import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from conditions import FAILS, evaluate_condition
from config import VERSION, ExperimentConfig, figure_config, output_directory
from dynamics import SimulationTrace, integrate
from errors import FitError, NumericalError, PreconditionError
from export import build_filename, run_metadata, trace_frame, write_json, write_table
from spaces import StateVector, norm, pairing
from spectral import SpectralTriple, perron_eigenpair

logger = logging.getLogger(__name__)

# Verdicts a run needs before the asymptotics are meaningful
REQUIRED_CONDITIONS = ("crucrit", "condi3")

MIN_FIT_SAMPLES = 8
ABSOLUTE_FLOOR = 1e-14
# Plateau detection on the tail of the error curve
PLATEAU_FRACTION = 0.25
PLATEAU_SPREAD = 10.0
PLATEAU_FACTOR = 10.0


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    rms_residual: float
    t_min: float
    t_max: float
    samples: int
    converged: bool = False


# Numerical floor of an error curve: 10x the median of its last quarter when
# that tail is flat (spread within PLATEAU_SPREAD), ABSOLUTE_FLOOR otherwise
def plateau_floor(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    tail = errors[-max(4, int(PLATEAU_FRACTION * errors.size)):]
    if tail.size and tail.max() <= PLATEAU_SPREAD * tail.min():
        return max(ABSOLUTE_FLOOR, PLATEAU_FACTOR * float(np.median(tail)))
    return ABSOLUTE_FLOOR


def _log_linear(t, errors):
    log_err = np.log(errors)
    slope, intercept = np.polyfit(t, log_err, 1)
    rms = float(np.sqrt(np.mean((log_err - (slope * t + intercept)) ** 2)))
    return float(-slope), float(np.exp(intercept)), rms


# Least squares of log(error) against t over [t_min, t_max], cut at the first
# sample that reaches the floor. A curve that reaches the floor with fewer than
# MIN_FIT_SAMPLES points before it is reported as converged: fitted on what is
# left when that gives a positive rate, rate = inf otherwise.
def fit_decay_rate(times, errors, t_min: float = 1.0, floor: float = ABSOLUTE_FLOOR, t_max: Optional[float] = None) -> DecayFit:
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    t_max = float(times[-1]) if t_max is None else float(t_max)

    window = (times >= t_min) & (times <= t_max)
    at_floor = window & (errors <= floor)
    usable = window
    if at_floor.any():
        usable = window & (times < times[at_floor][0])
    count = int(usable.sum())

    if count >= MIN_FIT_SAMPLES:
        rate, prefactor, rms = _log_linear(times[usable], errors[usable])
        return DecayFit(rate, prefactor, rms, t_min, t_max, count)
    if not at_floor.any():
        raise FitError(f"{count} samples above the floor in [{t_min}, {t_max}], need {MIN_FIT_SAMPLES}")

    if count >= 2:
        rate, prefactor, rms = _log_linear(times[usable], errors[usable])
        if rate > 0:
            logger.info("Error reached the floor after %d samples; fit on those only", count)
            return DecayFit(rate, prefactor, rms, t_min, t_max, count, converged=True)
    return DecayFit(np.inf, 0.0, 0.0, t_min, t_max, count, converged=True)


@dataclass(frozen=True, eq=False)
class AegResult:
    config: ExperimentConfig
    spectral: SpectralTriple
    trace: SimulationTrace
    error_curve: np.ndarray
    error_vectors: np.ndarray
    fit: DecayFit
    projection_constant: float
    asymptote: StateVector
    floor: float
    verdicts: dict = field(default_factory=dict)
    forced: bool = False

    @property
    def fit_window(self) -> tuple:
        return (self.fit.t_min, self.fit.t_max)

    def summary(self) -> dict:
        return {
            "label": self.config.label,
            "lambda0": self.spectral.lambda0,
            "residual_right": self.spectral.residual_right,
            "residual_left": self.spectral.residual_left,
            "gap_estimate": self.spectral.gap,
            "projection_constant": self.projection_constant,
            "fitted_rate": self.fit.rate,
            "prefactor": self.fit.prefactor,
            "rms_residual": self.fit.rms_residual,
            "fit_window": list(self.fit_window),
            "fit_samples": self.fit.samples,
            "converged": self.fit.converged,
            "error_floor": self.floor,
            "initial_mass": float(self.trace.mass[0]),
            "forced": self.forced,
            "verdicts": {cid: v.to_dict() for cid, v in self.verdicts.items()},
            "config": self.config.to_dict(),
            "version": VERSION,
        }


def check_preconditions(config: ExperimentConfig, model) -> dict:
    verdicts = {cid: evaluate_condition(model, cid, config.m, config.m_prime) for cid in REQUIRED_CONDITIONS}
    failed = [cid for cid, v in verdicts.items() if v.verdict == FAILS]
    if failed:
        if not config.force:
            raise PreconditionError(f"{', '.join(failed)} fails for {config.label}; rerun with --force to override", verdicts)
        logger.warning("Running %s despite failing %s (forced)", config.label, ", ".join(failed))
    return verdicts


def run_experiment(config: ExperimentConfig, f_in: Optional[StateVector] = None) -> AegResult:
    model = config.build_model()
    verdicts = check_preconditions(config, model)
    f_in = f_in if f_in is not None else config.initial_state()

    spectral = perron_eigenpair(model, config.N, config.eig_tol, config.m, config.policy)
    c = pairing(spectral.h, f_in)
    if not c > 0:
        raise NumericalError(f"projection constant <h, f_in> = {c:.6g} is not positive")
    asymptote = spectral.e * c

    # Shifted system: the state is exp(-lambda0 t) f(t) directly
    trace = integrate(
        model,
        f_in,
        (0.0, config.t_end),
        config.solver_options(),
        config.policy,
        shift=spectral.lambda0,
        m=config.m,
        sample_dt=config.sample_dt,
    )
    flavor = "gamma" if config.star_norm else "power"
    error_vectors = trace.states - asymptote.entries
    errors = np.array([norm(v, config.m, flavor) for v in error_vectors])
    floor = plateau_floor(errors)

    fit = fit_decay_rate(trace.times, errors, config.t_min, floor, config.t_max)
    logger.info("AEG %s: lambda0=%.10g, fitted rate %.6g (rms %.3g)", config.label, spectral.lambda0, fit.rate, fit.rms_residual)
    return AegResult(config, spectral, trace, errors, error_vectors, fit, c, asymptote, floor, verdicts, config.force)


# =============================================================================
# Figure datasets
# =============================================================================


def result_tables(result: AegResult) -> dict:
    config, trace = result.config, result.trace
    indices = [n for n in config.snapshot_indices if n <= trace.N]

    solution = trace_frame(trace, indices)

    error_vector = pd.DataFrame({"t": trace.times})
    for n in indices:
        error_vector[f"err_{n}"] = result.error_vectors[:, n - 1]

    sizes = np.arange(1, trace.N + 1)
    asymptotic = pd.DataFrame({
        "n": sizes,
        "asymptotic_f": result.asymptote.entries,
        "e": result.spectral.e.entries,
        "h": result.spectral.h.entries,
        "asymptotic_mass": sizes * result.asymptote.entries,
    })

    with np.errstate(divide="ignore"):
        log_error = np.where(result.error_curve > 0, np.log(np.maximum(result.error_curve, 1e-300)), -np.inf)
    error_norm = pd.DataFrame({
        "t": trace.times,
        "error_norm": result.error_curve,
        "log_error": log_error,
        "above_floor": result.error_curve > result.floor,
    })

    return {
        "solution": solution,
        "error_vector": error_vector,
        "asymptotic": asymptotic,
        "error_norm": error_norm,
    }


def write_result(result: AegResult, output_dir) -> dict:
    output_dir = Path(output_dir)
    meta = run_metadata(result.config)
    meta["lambda0"] = result.spectral.lambda0
    meta["shift"] = "states are exp(-lambda0 t) f(t)"

    paths = {}
    for kind, df in result_tables(result).items():
        paths[kind] = write_table(df, output_dir / build_filename(result.config.label, kind), meta)
    paths["summary"] = write_json(result.summary(), output_dir / build_filename(result.config.label, "summary", "json"))
    return paths


def figure_dataset(fig_id: str, output_dir=None, N: Optional[int] = None, t_end: Optional[float] = None, force: bool = False) -> dict:
    config = figure_config(fig_id, N=N, t_end=t_end, force=force or None)
    result = run_experiment(config)
    return write_result(result, output_directory(output_dir or config.output_dir))
