import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from conditions import angnle_constants
from errors import BracketError, EigensolverError, PowerIterationError, ValidationError
from model import RATE_PROBE, CoefficientModel
from operators import assemble
from spaces import StateVector, dual_norm, moment, norm, pairing

logger = logging.getLogger(__name__)

MIN_SIZE = 16
DENSE_EIG_LIMIT = 1500
CHECK_EVERY = 100
MAX_ITER = 2_000_000

# Relative accuracy of the monomer-shatter root equation series
SERIES_TOL = 1e-14
SERIES_CAP = 10_000_000
ORTHOGONALITY_TOL = 1e-8
LINEAR_GROWTH_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SpectralTriple:
    lambda0: float
    e: StateVector
    h: StateVector
    residual_right: float
    residual_left: float
    gap: float
    N: int
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "residual_right": self.residual_right,
            "residual_left": self.residual_left,
            "gap": None if np.isnan(self.gap) else self.gap,
            "N": self.N,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class _PowerRun:
    vector: np.ndarray
    value: float
    residual: float
    iterations: int
    contraction: float


# Power iteration on A + sigma I (entrywise nonnegative), all-ones start, L1 normalization
def _power_iterate(matvec, N, sigma, residual_of, tol, max_iter, label):
    x = np.full(N, 1.0 / N)
    history = []
    residuals = []
    for it in range(1, max_iter + 1):
        ax = matvec(x)
        y = ax + sigma * x
        total = y.sum()
        if not np.isfinite(total) or total <= 0:
            raise PowerIterationError(f"{label} power iteration collapsed at iteration {it}", history)
        x = y / total
        if it % CHECK_EVERY == 0:
            ax = matvec(x)
            value = float(ax.sum() / x.sum())
            history.append(value)
            residual = residual_of(x, ax, value)
            residuals.append(residual)
            if residual <= tol:
                contraction = np.nan
                if len(residuals) >= 3 and residuals[-3] > 0:
                    # Residuals shrink by ((lambda1 + sigma)/(lambda0 + sigma))^CHECK_EVERY per check
                    contraction = (residuals[-1] / residuals[-3]) ** (1.0 / (2 * CHECK_EVERY))
                logger.debug("%s power iteration converged in %d iterations", label, it)
                return _PowerRun(x, value, residual, it, contraction)
    raise PowerIterationError(
        f"{label} power iteration did not reach tol={tol:g} in {max_iter} iterations", history
    )


def perron_eigenpair(
    model: CoefficientModel,
    N: int,
    tol: float = 1e-10,
    m: float = 2.0,
    policy: str = "absorbing",
    shift: float = 0.0,
    max_iter: int = MAX_ITER,
) -> SpectralTriple:
    if N < MIN_SIZE:
        raise ValidationError(f"perron_eigenpair needs N >= {MIN_SIZE}")

    op = assemble(model, N, "U_full", policy)
    A = op.as_matrix()
    At = A.T
    diagonal = op.diagonal + shift
    sigma = max(0.0, float(np.max(-diagonal))) + 1.0

    def shifted(x):
        return A @ x + shift * x

    def shifted_t(x):
        return At @ x + shift * x

    def right_residual(x, ax, value):
        return norm(ax - value * x, m) / norm(x, m)

    # Row N of U^T carries the truncation; only rows 1..N-1 are checked
    def left_residual(x, ax, value):
        return dual_norm((ax - value * x)[:-1], m) / dual_norm(x, m)

    right = _power_iterate(shifted, N, sigma, right_residual, tol, max_iter, "right")
    left = _power_iterate(shifted_t, N, sigma, left_residual, tol, max_iter, "left")

    e = right.vector / moment(right.vector, 1.0)
    if np.any(e < 0):
        raise PowerIterationError("right Perron vector has negative entries")
    h = left.vector / pairing(left.vector, e)

    # Two-sided quotient: error is quadratic in the eigenvector errors
    lambda0 = float(h @ shifted(e) / (h @ e))
    res_right = right_residual(e, shifted(e), lambda0)
    res_left = left_residual(h, shifted_t(h), lambda0)

    gap = np.nan
    if np.isfinite(right.contraction) and 0 < right.contraction < 1:
        gap = float((lambda0 + sigma) * (1.0 - right.contraction))

    logger.info("Perron eigenvalue %.12g at N=%d (%d iterations)", lambda0, N, right.iterations)
    return SpectralTriple(lambda0, StateVector(e), StateVector(h), res_right, res_left, gap, N, right.iterations)


# =============================================================================
# Monomer-shatter root equation
# =============================================================================


@dataclass(frozen=True, eq=False)
class RootSolution:
    lambda0: float
    eigenvector: StateVector
    gamma_const: float
    g_const: float
    ggamcond: bool
    bracket: tuple
    n_terms: int


def _require_shatter_model(model: CoefficientModel):
    if model.kernel is None or model.kernel.variant != "monomer_shatter":
        raise ValidationError("the root equation needs a monomer_shatter kernel")
    if np.any(model.d(np.arange(1, RATE_PROBE + 1)) != 0):
        raise ValidationError("the root equation needs d = 0")


def _step_ratio(model: CoefficientModel, lam: float, n: int) -> float:
    g = model.g(n)
    return g / (lam + g + model.a(n))


# phi(lambda) = sum_{n>=2} a_n n/(lambda + a_n + g_n) prod_{j=2}^{n-1} g_j/(lambda + g_j + a_j)
def _phi(model: CoefficientModel, lam: float):
    total = 0.0
    prefix = 1.0
    c_seen = 0.0
    n = 2
    while n < SERIES_CAP:
        a, g = model.a(n), model.g(n)
        total += a * n / (lam + a + g) * prefix
        ratio = g / (lam + g + a)
        c_seen = max(c_seen, ratio)
        prefix *= ratio
        n += 1
        # sum_{k>=n} prefix_k k <= prefix_n (n/(1-c) + c/(1-c)^2) with c the sup of
        # the step ratios, taken over the terms so far and two sizes ahead
        if c_seen < 1 and prefix * (n / (1 - c_seen) + c_seen / (1 - c_seen) ** 2) < SERIES_TOL * total:
            c = max(c_seen, _step_ratio(model, lam, 2 * n), _step_ratio(model, lam, 4 * n))
            if c < 1 and prefix * (n / (1 - c) + c / (1 - c) ** 2) < SERIES_TOL * total:
                return total, n
    raise BracketError(f"series for phi did not converge within {SERIES_CAP} terms")


def example1_solve(model: CoefficientModel, bracket: Optional[tuple] = None, size: int = 2000) -> RootSolution:
    _require_shatter_model(model)
    gamma_const, g_const = angnle_constants(model)
    holds = g_const + 1 < (gamma_const + 1) ** 2 <= (g_const + 1) ** 2
    if not holds:
        logger.warning("ggamcond fails for gamma=%.6g, g=%.6g; phi(0) may not exceed 1", gamma_const, g_const)
    g1 = model.g(1)
    if g1 <= 0:
        raise ValidationError("the root equation needs g_1 > 0")

    def gap(lam):
        return (lam + g1) / g1 - _phi(model, lam)[0]

    if bracket is None:
        sizes = np.arange(2, 101)
        a = model.a(sizes)
        lo, hi = 0.0, 10.0 * (g1 + float(np.max(a * sizes / (a + model.g(sizes)))))
    else:
        lo, hi = (float(b) for b in bracket)

    if gap(lo) >= 0:
        raise BracketError(f"psi - phi is nonnegative at lambda={lo}; phi(0) <= 1 and no positive root is guaranteed")
    for _ in range(60):
        if gap(hi) > 0:
            break
        hi *= 2.0
    else:
        raise BracketError("no sign change found while expanding the bracket")

    lambda0 = float(optimize.bisect(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))
    _, n_terms = _phi(model, lambda0)

    # f_1 = 1, f_n = f_{n-1} g_{n-1}/(lambda0 + g_n + a_n)
    sizes = np.arange(1, size + 1)
    a, g = model.a(sizes), model.g(sizes)
    f = np.empty(size)
    f[0] = 1.0
    for n in range(1, size):
        f[n] = f[n - 1] * g[n - 1] / (lambda0 + g[n] + a[n])

    logger.info("Root equation solved: lambda0=%.12g (%d series terms)", lambda0, n_terms)
    return RootSolution(lambda0, StateVector(f), gamma_const, g_const, holds, (lo, hi), n_terms)


# =============================================================================
# Exact pair for linear growth without death
# =============================================================================


@dataclass(frozen=True)
class ExactLinearGrowth:
    rate: float

    # h_n = n
    def adjoint(self, N: int) -> StateVector:
        return StateVector(np.arange(1, N + 1, dtype=float))


def exact_linear_growth(model: CoefficientModel, n_probe: int = RATE_PROBE) -> Optional[ExactLinearGrowth]:
    limits = [r.max_n for r in (model.growth_rate, model.death_rate) if r.max_n]
    sizes = np.arange(1, min([n_probe] + limits) + 1)
    if np.any(model.d(sizes) != 0):
        return None
    ratio = model.g(sizes) / sizes
    r = float(ratio[0])
    if r <= 0 or np.max(np.abs(ratio - r)) > LINEAR_GROWTH_TOL * r:
        return None
    return ExactLinearGrowth(r)


# =============================================================================
# Dense spectrum
# =============================================================================


@dataclass(frozen=True, eq=False)
class GapReport:
    lambda0: float
    gap: float
    eigenvalues: np.ndarray
    orthogonality: Optional[float] = None
    raw_moment: Optional[float] = None

    @property
    def orthogonal(self) -> Optional[bool]:
        if self.orthogonality is None:
            return None
        return self.orthogonality <= ORTHOGONALITY_TOL

    def to_dict(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "gap": self.gap,
            "orthogonality": self.orthogonality,
            "raw_moment": self.raw_moment,
        }


def spectral_gap(model: CoefficientModel, N: int, policy: str = "absorbing") -> GapReport:
    if N > DENSE_EIG_LIMIT:
        raise ValidationError(f"dense eigensolve limited to N <= {DENSE_EIG_LIMIT}")
    dense = assemble(model, N, "U_full", policy).to_dense()
    try:
        values, left, right = linalg.eig(dense, left=True, right=True)
    except (linalg.LinAlgError, ValueError) as ex:
        raise EigensolverError(f"dense eigensolve failed at N={N}: {ex}") from ex
    if not np.all(np.isfinite(values)):
        raise EigensolverError(f"dense eigensolve returned non-finite eigenvalues at N={N}")

    order = np.argsort(-values.real, kind="stable")
    values, left, right = values[order], left[:, order], right[:, order]
    lambda0 = float(values[0].real)
    gap = float(lambda0 - values[1].real)

    orthogonality = raw = None
    if exact_linear_growth(model) is not None:
        # Left Perron vector of the truncation, scaled like h_n = n
        h = left[:, 0].real
        h = h / h[0]
        sizes = np.arange(1, N + 1)
        weight = np.abs(right[:, 1:]).T @ sizes
        orthogonality = float(np.max(np.abs(h @ right[:, 1:]) / weight))
        raw = float(np.max(np.abs(sizes @ right[:, 1:]) / weight))
        if orthogonality > ORTHOGONALITY_TOL:
            logger.warning("Biorthogonality %.3e exceeds %.0e at N=%d", orthogonality, ORTHOGONALITY_TOL, N)

    return GapReport(lambda0, gap, values, orthogonality, raw)


# =============================================================================
# Convergence in N
# =============================================================================


@dataclass(frozen=True, eq=False)
class ConvergenceStudy:
    sizes: tuple
    lambdas: np.ndarray
    increments: np.ndarray

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.increments) <= 0))

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "lambdas": self.lambdas.tolist(),
            "increments": self.increments.tolist(),
        }


def truncation_convergence(
    model: CoefficientModel,
    Ns,
    tol: float = 1e-10,
    m: float = 2.0,
    policy: str = "absorbing",
) -> ConvergenceStudy:
    sizes = tuple(int(n) for n in Ns)
    if len(sizes) < 2 or list(sizes) != sorted(sizes):
        raise ValidationError("Ns must be ascending with at least two entries")
    lambdas = np.array([perron_eigenpair(model, n, tol, m, policy).lambda0 for n in sizes])
    increments = np.abs(np.diff(lambdas))
    study = ConvergenceStudy(sizes, lambdas, increments)
    if not study.decreasing:
        logger.warning("Cauchy increments are not decreasing over N=%s", list(sizes))
    return study
