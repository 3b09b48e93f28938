import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from errors import NonFiniteStateError, StepSizeUnderflowError, ValidationError
from model import CoefficientModel
from operators import POLICIES, assemble
from spaces import StateVector, as_array, moment, norm

logger = logging.getLogger(__name__)

METHODS = ("trbdf2", "euler")

# TR-BDF2 with gamma = 2 - sqrt(2): both stages factor the same I - c h A
GAMMA = 2.0 - math.sqrt(2.0)
TR_DIAG = GAMMA / 2.0
BDF_NEW = 1.0 / (GAMMA * (2.0 - GAMMA))
BDF_OLD = (1.0 - GAMMA) ** 2 / (GAMMA * (2.0 - GAMMA))

# Step sizes are output spacing / 2^j with j <= MAX_HALVINGS
MAX_HALVINGS = 40
# Factorizations kept per run (one per step level)
FACTOR_CACHE = 6
# Mass above N/2 beyond this fraction of M(t) means N is too small
UPPER_HALF_WARNING = 1e-8

DEFAULT_SAMPLE_DT = 0.1


@dataclass(frozen=True)
class SolverOptions:
    rtol: float = 1e-8
    atol: float = 1e-12
    max_step: Optional[float] = None
    method: str = "trbdf2"

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValidationError("rtol and atol must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise ValidationError("max_step must be positive")
        if self.method not in METHODS:
            raise ValidationError(f"Unknown method: {self.method}")

    @property
    def order(self) -> int:
        return 2 if self.method == "trbdf2" else 1


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    times: np.ndarray
    states: np.ndarray
    mass: np.ndarray
    norm_m: np.ndarray
    boundary_flux: np.ndarray
    leaked_mass: np.ndarray
    m: float
    shift: float
    N: int
    policy: str
    steps: int = 0
    rejected: int = 0

    def state(self, k: int) -> StateVector:
        return StateVector(self.states[k])

    @property
    def final(self) -> StateVector:
        return self.state(-1)


# One linear solver per step level: sparse LU when the operator allows it, dense LU otherwise
class _Factorizations:
    def __init__(self, matrix, coeff: float):
        self.matrix = matrix
        self.coeff = coeff
        self.is_sparse = sparse.issparse(matrix)
        self.cache = OrderedDict()

    def solve(self, h: float, rhs: np.ndarray) -> np.ndarray:
        if h not in self.cache:
            if self.is_sparse:
                system = (sparse.identity(self.matrix.shape[0], format="csc") - self.coeff * h * self.matrix).tocsc()
                self.cache[h] = splinalg.splu(system).solve
            else:
                lu = linalg.lu_factor(np.eye(self.matrix.shape[0]) - self.coeff * h * self.matrix, check_finite=False)
                self.cache[h] = lambda b, lu=lu: linalg.lu_solve(lu, b, check_finite=False)
            if len(self.cache) > FACTOR_CACHE:
                self.cache.popitem(last=False)
        return self.cache[h](rhs)


def _one_step(y, h, matrix, solver, method):
    if method == "euler":
        return solver.solve(h, y)
    # trapezoid to t + gamma h, then BDF2 to t + h
    stage = solver.solve(h, y + TR_DIAG * h * (matrix @ y))
    return solver.solve(h, BDF_NEW * stage - BDF_OLD * y)


def _boundary_flux(states: np.ndarray, N: int, g_out_N: float) -> np.ndarray:
    return N * g_out_N * states[..., -1]


# Solves df/dt = (U - shift I) f on the truncation fixed by f_in. Steps are the
# output spacing / 2^j; one step of h is compared with two of h/2 and accepted
# when the scaled difference is within tolerance and no entry drops below -atol.
# TR-BDF2 keeps the Richardson value, implicit Euler the two half steps.
def integrate(
    model: CoefficientModel,
    f_in,
    t_span,
    opts: Optional[SolverOptions] = None,
    policy: str = "absorbing",
    shift: float = 0.0,
    m: float = 2.0,
    sample_dt: Optional[float] = None,
    n_samples: Optional[int] = None,
) -> SimulationTrace:
    opts = opts or SolverOptions()
    f0 = as_array(f_in).astype(float)
    if f0.size < 2:
        raise ValidationError("integration needs N >= 2")
    if np.any(f0 < 0):
        raise ValidationError("initial state must be nonnegative")
    if policy not in POLICIES:
        raise ValidationError(f"Unknown truncation policy: {policy}")
    t0, t_end = (float(t) for t in t_span)
    if t_end <= t0:
        raise ValidationError("t_span must satisfy T > t0")

    if n_samples is None:
        n_samples = max(1, math.ceil((t_end - t0) / (sample_dt or DEFAULT_SAMPLE_DT) - 1e-9))
    times = np.linspace(t0, t_end, n_samples + 1)
    spacing = (t_end - t0) / n_samples

    N = f0.size
    op = assemble(model, N, "U_full", policy)
    matrix = op.as_matrix()
    if shift != 0.0:
        matrix = matrix - shift * (sparse.identity(N, format="csr") if op.is_sparse else np.eye(N))
    solver = _Factorizations(matrix, 1.0 if opts.method == "euler" else TR_DIAG)
    g_out_N = float(model.g(N)) if policy == "absorbing" else 0.0

    # j_min: coarsest level allowed by max_step
    j_min = 0
    if opts.max_step is not None and opts.max_step < spacing:
        j_min = math.ceil(math.log2(spacing / opts.max_step) - 1e-12)
    richardson = 2 ** opts.order - 1

    states = np.empty((times.size, N))
    states[0] = f0
    leaked = np.zeros(times.size)
    y = f0.copy()
    level = j_min
    leaked_so_far = 0.0
    steps = rejected = 0
    full = 2 ** MAX_HALVINGS

    for k in range(1, times.size):
        done = 0
        while done < full:
            h = spacing / 2 ** level
            big = _one_step(y, h, matrix, solver, opts.method)
            half = _one_step(y, h / 2, matrix, solver, opts.method)
            half = _one_step(half, h / 2, matrix, solver, opts.method)

            diff = (half - big) / richardson
            scale = opts.atol + opts.rtol * np.maximum(np.abs(y), np.abs(half))
            err = float(np.max(np.abs(diff) / scale))
            candidate = half + diff if opts.method == "trbdf2" else half
            if candidate.min() < -opts.atol:
                candidate = half

            if not np.all(np.isfinite(candidate)):
                raise NonFiniteStateError(f"non-finite state at t={times[k - 1] + done / full * spacing:.6g}")

            if err <= 1.0 and candidate.min() >= -opts.atol:
                flux_old = N * g_out_N * max(y[-1], 0.0)
                flux_new = N * g_out_N * max(candidate[-1], 0.0)
                leaked_so_far += 0.5 * h * (flux_old + flux_new)
                y = candidate
                done += 2 ** (MAX_HALVINGS - level)
                steps += 1
                # Double only on an aligned boundary of the coarser grid
                coarser = 2 ** (MAX_HALVINGS - level + 1)
                if err < 0.1 and level > j_min and done % coarser == 0:
                    level -= 1
            else:
                rejected += 1
                level += 1
                if level > MAX_HALVINGS:
                    raise StepSizeUnderflowError(
                        f"step size fell below {spacing / full:.3e} near t={times[k - 1] + done / full * spacing:.6g}"
                    )
                logger.debug("Step rejected (err=%.3e), halving to h=%.3e", err, spacing / 2 ** level)

        states[k] = y
        leaked[k] = leaked_so_far

    mass_series = np.array([moment(s, 1.0) for s in states])
    norms = np.array([norm(s, m) for s in states])
    flux = _boundary_flux(states, N, g_out_N)

    upper = states[:, N // 2:] @ np.arange(N // 2 + 1, N + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail_fraction = np.where(mass_series > 0, upper / mass_series, 0.0)
    if np.max(tail_fraction) > UPPER_HALF_WARNING:
        logger.warning(
            "Mass above N/2 reached %.2e of M(t); N=%d may be too small for t <= %g",
            float(np.max(tail_fraction)), N, t_end,
        )

    logger.info("Integrated N=%d to t=%g: %d steps, %d rejected", N, t_end, steps, rejected)
    return SimulationTrace(times, states, mass_series, norms, flux, leaked, m, shift, N, policy, steps, rejected)


def trotter_evolve(
    model: CoefficientModel,
    f_in,
    t: float,
    n_steps: int,
    policy: str = "absorbing",
    scheme: str = "lie",
) -> StateVector:
    if n_steps < 1:
        raise ValidationError("n_steps must be at least 1")
    if scheme not in ("lie", "strang"):
        raise ValidationError(f"Unknown splitting scheme: {scheme}")
    f = as_array(f_in).astype(float)
    N = f.size
    tau = t / n_steps

    birth_death = assemble(model, N, "V_birth_death", policy).to_dense()
    fragmentation = assemble(model, N, "F_fragmentation", policy).to_dense()
    flow_f = linalg.expm(tau * fragmentation)
    if scheme == "lie":
        flow_v = linalg.expm(tau * birth_death)
        for _ in range(n_steps):
            f = flow_v @ (flow_f @ f)
    else:
        half_v = linalg.expm(0.5 * tau * birth_death)
        for _ in range(n_steps):
            f = half_v @ (flow_f @ (half_v @ f))

    if not np.all(np.isfinite(f)):
        raise NonFiniteStateError("splitting produced a non-finite state")
    return StateVector(f)


# dM/dt - [sum_{n<N} (g_n - d_n) f_n - (N g~_N + d_N) f_N - shift M], per grid point
def mass_balance_series(trace: SimulationTrace, model: CoefficientModel) -> np.ndarray:
    if trace.times.size < 3:
        raise ValidationError("mass balance needs at least 3 grid points")
    N = trace.N
    sizes = np.arange(1, N + 1)
    g, d = model.g(sizes), model.d(sizes)
    g_out_N = g[-1] if trace.policy == "absorbing" else 0.0

    rates = g - d
    rates[-1] = -(N * g_out_N + d[-1])
    expected = trace.states @ rates - trace.shift * trace.mass
    observed = np.gradient(trace.mass, trace.times, edge_order=2)
    return observed - expected


def mass_balance_residual(trace: SimulationTrace, model: CoefficientModel) -> float:
    return float(np.max(np.abs(mass_balance_series(trace, model))))
