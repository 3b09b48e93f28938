import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from conditions import evaluate_condition
from errors import ResolventDomainError, ValidationError
from model import CoefficientModel
from spaces import StateVector, as_array, norm, star_norm

logger = logging.getLogger(__name__)

OPERATOR_KINDS = ("K_subdiagonal", "U_full", "U_adjoint", "V_birth_death", "F_fragmentation")
POLICIES = ("absorbing", "reflecting")

# Up to this size the fragmentation block is stored; above it columns are rebuilt per matvec
DENSE_LIMIT = 4000

# Kernels whose fragmentation block has O(N) nonzeros
SPARSE_KERNELS = ("monomer_shatter", "ends_only")


# Columns of B rebuilt on the fly: column i holds a_i b_{k,i} for k < i
class FragmentationColumns:
    def __init__(self, model: CoefficientModel, N: int):
        self.model = model
        self.N = N
        self.rates = model.a(np.arange(1, N + 1))

    @property
    def shape(self):
        return (self.N, self.N)

    def __matmul__(self, x):
        out = np.zeros(self.N)
        for i in range(2, self.N + 1):
            if x[i - 1] != 0.0:
                out[: i - 1] += self.rates[i - 1] * x[i - 1] * self.model.kernel_row(i)
        return out

    def rmatvec(self, y):
        out = np.zeros(self.N)
        for i in range(2, self.N + 1):
            out[i - 1] = self.rates[i - 1] * float(np.dot(self.model.kernel_row(i), y[: i - 1]))
        return out

    def toarray(self):
        out = np.zeros((self.N, self.N))
        for i in range(2, self.N + 1):
            out[: i - 1, i - 1] = self.rates[i - 1] * self.model.kernel_row(i)
        return out


# N x N generator piece stored by structure: diagonal, lower (g_n at (n+1, n)),
# upper (d_{n+1} at (n, n+1)) and the strictly upper fragmentation block (dense,
# CSR, on-the-fly columns or None). U_adjoint shares U_full storage, transposed.
@dataclass(frozen=True, eq=False)
class TruncatedOperator:
    N: int
    which: str
    policy: str
    diagonal: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    fragmentation: Optional[object] = None
    transposed: bool = False

    @property
    def is_sparse(self) -> bool:
        return self.fragmentation is None or sparse.issparse(self.fragmentation)

    def to_dense(self) -> np.ndarray:
        out = np.diag(self.diagonal) + np.diag(self.lower, -1) + np.diag(self.upper, 1)
        if self.fragmentation is not None:
            frag = self.fragmentation
            out = out + (frag if isinstance(frag, np.ndarray) else frag.toarray())
        return out.T if self.transposed else out

    def to_sparse(self):
        out = sparse.diags([self.lower, self.diagonal, self.upper], [-1, 0, 1], shape=(self.N, self.N), format="csr")
        if self.fragmentation is not None:
            out = out + sparse.csr_matrix(self.fragmentation)
        return out.T.tocsr() if self.transposed else out

    # Sparse when the structure allows it, dense otherwise
    def as_matrix(self):
        if self.is_sparse:
            return self.to_sparse()
        return self.to_dense()


def _fragmentation_block(model: CoefficientModel, N: int):
    if model.kernel is None:
        return None

    rates = model.a(np.arange(1, N + 1))
    if model.kernel.variant in SPARSE_KERNELS:
        rows, cols, vals = [], [], []
        for i in range(2, N + 1):
            col = rates[i - 1] * model.kernel_row(i)
            nz = np.flatnonzero(col)
            rows.extend(nz.tolist())
            cols.extend([i - 1] * nz.size)
            vals.extend(col[nz].tolist())
        return sparse.csr_matrix((vals, (rows, cols)), shape=(N, N))

    if N > DENSE_LIMIT:
        logger.debug("N=%d above %d, fragmentation columns generated per matvec", N, DENSE_LIMIT)
        return FragmentationColumns(model, N)

    block = np.zeros((N, N))
    for i in range(2, N + 1):
        block[: i - 1, i - 1] = rates[i - 1] * model.kernel_row(i)
    return block


def assemble(model: CoefficientModel, N: int, which: str = "U_full", policy: str = "absorbing") -> TruncatedOperator:
    if N < 2:
        raise ValidationError("truncation size N must be at least 2")
    if which not in OPERATOR_KINDS:
        raise ValidationError(f"Unknown operator: {which}")
    if policy not in POLICIES:
        raise ValidationError(f"Unknown truncation policy: {policy}")

    sizes = np.arange(1, N + 1)
    a, g, d = model.a(sizes), model.g(sizes), model.d(sizes)

    # Reflecting closes the top: no growth out of size N
    g_out = g.copy()
    if policy == "reflecting":
        g_out[-1] = 0.0

    zeros = np.zeros(N - 1)
    if which == "K_subdiagonal":
        return TruncatedOperator(N, which, policy, -(g_out + d + a), g[:-1], zeros)
    if which == "V_birth_death":
        return TruncatedOperator(N, which, policy, -(g_out + d), g[:-1], d[1:])
    if which == "F_fragmentation":
        return TruncatedOperator(N, which, policy, -a, zeros, zeros, _fragmentation_block(model, N))

    return TruncatedOperator(
        N,
        which,
        policy,
        -(g_out + d + a),
        g[:-1],
        d[1:],
        _fragmentation_block(model, N),
        transposed=which == "U_adjoint",
    )


def apply(op: TruncatedOperator, f) -> StateVector:
    x = as_array(f)
    if x.size != op.N:
        raise ValidationError(f"dimension mismatch: operator N={op.N}, vector size {x.size}")

    out = op.diagonal * x
    frag = op.fragmentation
    if not op.transposed:
        out[1:] += op.lower * x[:-1]
        out[:-1] += op.upper * x[1:]
        if frag is not None:
            out += frag @ x
    else:
        out[:-1] += op.lower * x[1:]
        out[1:] += op.upper * x[:-1]
        if frag is not None:
            out += frag.rmatvec(x) if isinstance(frag, FragmentationColumns) else frag.T @ x
    return StateVector(out)


# Sum_n n * U_{n,i} for every column i: g_i - d_i below N, -N g~_N - d_N at N
def weighted_column_sums(op: TruncatedOperator) -> np.ndarray:
    adjoint = TruncatedOperator(
        op.N, op.which, op.policy, op.diagonal, op.lower, op.upper, op.fragmentation, not op.transposed
    )
    return apply(adjoint, np.arange(1, op.N + 1, dtype=float)).entries


def is_metzler(op: TruncatedOperator) -> bool:
    dense = op.to_dense()
    off = dense - np.diag(np.diag(dense))
    return bool(np.all(off >= 0))


# =============================================================================
# Resolvents
# =============================================================================


def _resolvent_denominators(model: CoefficientModel, lam: float, N: int, policy: str):
    op = assemble(model, N, "K_subdiagonal", policy)
    denom = lam - op.diagonal
    bad = np.flatnonzero(denom <= 0)
    if bad.size:
        raise ResolventDomainError(f"lambda + theta_n <= 0 at n={int(bad[0]) + 1}; lambda={lam} outside the resolvent set")
    return denom, op.lower


# u_n = (f_n + g_{n-1} u_{n-1}) / (lambda + theta_n), u_0 = 0
def resolvent_K_apply(model: CoefficientModel, lam: float, f, policy: str = "absorbing") -> StateVector:
    x = as_array(f)
    N = x.size
    if N < 2:
        raise ValidationError("resolvent needs a state with at least two sizes")
    denom, g = _resolvent_denominators(model, lam, N, policy)

    u = np.empty(N)
    u[0] = x[0] / denom[0]
    for n in range(1, N):
        u[n] = (x[n] + g[n - 1] * u[n - 1]) / denom[n]
    return StateVector(u)


# Partial sums sum_{k<n_terms} R(l,T) (G^- R(l,T))^k f; exact on components 1..n_terms
def neumann_resolvent_K(model: CoefficientModel, lam: float, f, n_terms: int, policy: str = "absorbing") -> StateVector:
    if n_terms < 1:
        raise ValidationError("n_terms must be at least 1")
    x = as_array(f)
    denom, g = _resolvent_denominators(model, lam, x.size, policy)

    term = x / denom
    total = term.copy()
    for _ in range(n_terms - 1):
        shifted = np.zeros_like(term)
        shifted[1:] = g * term[:-1]
        term = shifted / denom
        total += term
    return StateVector(total)


def resolvent_U_apply(model: CoefficientModel, lam: float, f, policy: str = "absorbing") -> StateVector:
    x = as_array(f)
    op = assemble(model, x.size, "U_full", policy)
    try:
        if op.is_sparse:
            system = sparse.identity(op.N, format="csc") * lam - op.to_sparse().tocsc()
            u = splinalg.spsolve(system, x)
        else:
            u = linalg.solve(lam * np.eye(op.N) - op.to_dense(), x)
    except (linalg.LinAlgError, RuntimeError) as ex:
        raise ResolventDomainError(f"lambda={lam} is not in the resolvent set of the truncation: {ex}") from ex
    if not np.all(np.isfinite(u)):
        raise ResolventDomainError(f"lambda={lam} gives a singular system")
    return StateVector(u)


# sum_k R(l,K) [Bsf R(l,K)]^k f with Bsf = D+ + B; converges for large lambda
def neumann_resolvent_U(model: CoefficientModel, lam: float, f, n_terms: int, policy: str = "absorbing") -> StateVector:
    if n_terms < 1:
        raise ValidationError("n_terms must be at least 1")
    x = as_array(f)
    N = x.size
    full = assemble(model, N, "U_full", policy)
    coupling = TruncatedOperator(N, "U_full", policy, np.zeros(N), np.zeros(N - 1), full.upper, full.fragmentation)

    term = resolvent_K_apply(model, lam, x, policy).entries
    total = term.copy()
    for _ in range(n_terms - 1):
        term = resolvent_K_apply(model, lam, apply(coupling, term), policy).entries
        total += term
    return StateVector(total)


# =============================================================================
# Resolvent-norm probes
# =============================================================================


@dataclass(frozen=True, eq=False)
class ProbeResult:
    max_ratio: float
    bound: float
    ratios: np.ndarray
    lam: float
    N: int
    precondition: str

    @property
    def within_bound(self) -> bool:
        return self.max_ratio <= self.bound


# lambda ||R(lambda,K) f||_* / ||f||_*
def resolvent_ratio(model: CoefficientModel, m: float, lam: float, f, policy: str = "absorbing") -> float:
    size = star_norm(f, m)
    if size == 0:
        raise ValidationError("ratio needs a nonzero state")
    return lam * star_norm(resolvent_K_apply(model, lam, f, policy), m) / size


def resolvent_bound_probe(
    model: CoefficientModel,
    m: float,
    m_prime: float,
    lam: float,
    samples: int = 100,
    N: int = 500,
    seed: int = 0,
    policy: str = "absorbing",
) -> ProbeResult:
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    if samples < 1:
        raise ValidationError("samples must be at least 1")
    if m_prime <= m:
        raise ValidationError("m_prime must exceed m")

    # Diagnostic mode: the probe runs whatever the verdict
    verdict = evaluate_condition(model, "condi2", m, m_prime).verdict
    if verdict != "holds":
        logger.warning("condi2 is %s for m'=%s; the bound m'/(m'-m) is not guaranteed", verdict, m_prime)

    rng = np.random.default_rng(seed)
    ratios = np.array([resolvent_ratio(model, m, lam, rng.random(N), policy) for _ in range(samples)])
    result = ProbeResult(float(ratios.max()), m_prime / (m_prime - m), ratios, lam, N, verdict)
    logger.info("Resolvent probe lambda=%s: max ratio %.6f against bound %.6f", lam, result.max_ratio, result.bound)
    return result


@dataclass(frozen=True, eq=False)
class GrowthDiagnostic:
    sizes: tuple
    norms: np.ndarray
    lam: float
    m: float

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.norms) > 0))

    @property
    def growth_factor(self) -> float:
        return float(self.norms[-1] / self.norms[0])


# ||R_lambda delta_1||_[m] over growing truncations; unbounded growth signals non-generation
def growth_resolvent_diagnostic(model: CoefficientModel, m: float = 1.0, lam: float = 1.0, sizes=(100, 1000, 10000)) -> GrowthDiagnostic:
    sizes = tuple(int(n) for n in sizes)
    if list(sizes) != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValidationError("sizes must be strictly ascending")
    norms = np.array([norm(resolvent_K_apply(model, lam, StateVector.delta(1, n)), m) for n in sizes])
    return GrowthDiagnostic(sizes, norms, lam, m)
