import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from errors import ConfigError, DegenerateRateError, ValidationError

logger = logging.getLogger(__name__)

# Relative tolerance for every kernel identity (mass rule, effective kernel sums)
MASS_RULE_TOL = 1e-10

# How far rate invariants are probed when a model is built
RATE_PROBE = 1000

# Entries per memoized normalizer (keyed by kernel and n)
CACHE_SIZE = 65_536

RATE_FAMILIES = ("zero", "constant", "linear", "power", "table", "induced")
KERNEL_VARIANTS = (
    "monomer_shatter",
    "uniform_binary",
    "homogeneous",
    "binary_psi",
    "ends_only",
    "table",
)


# Evaluate fn on an int or an array of ints; scalars come back as float
def _on_sizes(fn, n):
    arr = np.atleast_1d(np.asarray(n))
    out = np.asarray(fn(arr.astype(float)), dtype=float)
    if np.ndim(n) == 0:
        return float(out[0])
    return out


# =============================================================================
# Profiles and psi matrices (hashable so kernels built from equal
# descriptors compare equal and share memoized normalizers)
# =============================================================================


@dataclass(frozen=True)
class BetaProfile:
    beta: float
    symmetric: bool = True

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = z ** self.beta
        if self.symmetric:
            out = out * (1.0 - z) ** self.beta
        return out


@dataclass(frozen=True)
class PowerPsi:
    beta: float
    product: bool = False

    def __call__(self, i, j):
        i = np.asarray(i, dtype=float)
        j = np.asarray(j, dtype=float)
        base = i * j if self.product else i + j
        return base ** self.beta


# =============================================================================
# Fragmentation kernels
# =============================================================================


@dataclass(frozen=True)
class FragmentationKernel:
    variant: str
    profile: Optional[Callable] = None
    psi: Optional[Callable] = None
    rows: tuple = ()
    descriptor: Optional[dict] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise ConfigError(f"Unknown kernel variant: {self.variant}")
        if self.variant == "homogeneous" and self.profile is None:
            raise ConfigError("homogeneous kernel needs a profile h(z)")
        if self.variant == "binary_psi" and self.psi is None:
            raise ConfigError("binary_psi kernel needs a symmetric psi(i, j)")

    # b_{k,n} for k = 1..n-1 as one array (index k-1)
    def row(self, n: int) -> np.ndarray:
        n = int(n)
        if n < 2:
            raise ValidationError(f"kernel rows start at n=2, got n={n}")
        k = np.arange(1, n, dtype=float)

        if self.variant == "monomer_shatter":
            out = np.zeros(n - 1)
            out[0] = float(n)
            return out

        if self.variant == "uniform_binary":
            return np.full(n - 1, 2.0 / (n - 1))

        if self.variant == "ends_only":
            if n == 2:
                return np.array([2.0])
            out = np.zeros(n - 1)
            out[0] = 1.0
            out[-1] = 1.0
            return out

        if self.variant == "homogeneous":
            return _homogeneous_zeta(self, n) * np.asarray(self.profile(k / n), dtype=float)

        if self.variant == "binary_psi":
            return np.asarray(self.psi(k, n - k), dtype=float) / _psi_half_sum(self, n)

        table = dict(self.rows)
        if n not in table:
            raise ValidationError(f"kernel table has no row for n={n}")
        return np.asarray(table[n], dtype=float)

    # a_n = (1/2) sum_i psi(i, n-i); only defined for binary_psi kernels
    def induced_rate(self, n):
        if self.variant != "binary_psi":
            raise ValidationError("only binary_psi kernels induce a fragmentation rate")

        def total(sizes):
            return np.array([_psi_half_sum(self, int(s)) if s >= 2 else 0.0 for s in sizes])

        return _on_sizes(total, n)

    def to_descriptor(self):
        if self.descriptor is not None:
            return dict(self.descriptor)
        return {"type": self.variant}


# Per-n normalizers are memoized; rows themselves are cheap once these exist
@lru_cache(maxsize=CACHE_SIZE)
def _homogeneous_zeta(kernel: FragmentationKernel, n: int) -> float:
    j = np.arange(1, n, dtype=float)
    weight = float(np.dot(j, kernel.profile(j / n)))
    if not np.isfinite(weight) or weight <= 0.0:
        raise ValidationError(f"degenerate profile: sum_j j*h(j/n) = {weight} at n={n}")
    return n / weight


@lru_cache(maxsize=CACHE_SIZE)
def _psi_half_sum(kernel: FragmentationKernel, n: int) -> float:
    i = np.arange(1, n, dtype=float)
    total = 0.5 * float(np.sum(kernel.psi(i, n - i)))
    if not np.isfinite(total) or total <= 0.0:
        raise ValidationError(f"psi gives a non-positive fragmentation rate at n={n}")
    return total


def kernel_eval(kernel: FragmentationKernel, k: int, n: int) -> float:
    if n < 2 or not 1 <= k <= n - 1:
        raise ValidationError(f"kernel index out of range: k={k}, n={n}")
    return float(kernel.row(n)[k - 1])


# Sum_k b_{k,n}; always >= 1 because Delta^(0)_n <= 0
def daughter_count(kernel: FragmentationKernel, n: int) -> float:
    return float(np.sum(kernel.row(n)))


# Returns (kernel, induced_rate). induced_rate is a_n = (1/2) sum psi for
# binary_psi kernels and None otherwise; a None descriptor means no fragmentation
def make_kernel(spec):
    if spec is None:
        return None, None
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"Malformed kernel descriptor: {spec!r}")

    variant = spec["type"]
    allowed = {
        "monomer_shatter": {"type"},
        "uniform_binary": {"type"},
        "ends_only": {"type"},
        "homogeneous": {"type", "profile", "beta"},
        "binary_psi": {"type", "psi", "beta"},
        "table": {"type", "rows"},
    }
    if variant not in allowed:
        raise ConfigError(f"Unknown kernel type: {variant}")
    extra = set(spec) - allowed[variant]
    if extra:
        raise ConfigError(f"Unknown fields for {variant} kernel: {sorted(extra)}")

    descriptor = dict(spec)

    if variant in ("monomer_shatter", "uniform_binary", "ends_only"):
        return FragmentationKernel(variant, descriptor=descriptor), None

    if variant == "homogeneous":
        beta = _real_parameter(spec, "beta")
        profile_name = spec.get("profile", "beta_symmetric")
        if profile_name not in ("beta_symmetric", "power"):
            raise ConfigError(f"Unknown homogeneous profile: {profile_name}")
        if beta <= -1.0:
            raise ConfigError("profile exponent must exceed -1 to be integrable")
        profile = BetaProfile(beta, symmetric=profile_name == "beta_symmetric")
        return FragmentationKernel(variant, profile=profile, descriptor=descriptor), None

    if variant == "binary_psi":
        beta = _real_parameter(spec, "beta")
        psi_name = spec.get("psi")
        if psi_name not in ("sum_power", "product_power"):
            raise ConfigError(f"Unknown psi family: {psi_name}")
        kernel = FragmentationKernel(
            variant,
            psi=PowerPsi(beta, product=psi_name == "product_power"),
            descriptor=descriptor,
        )
        return kernel, RateFamily("induced", source=kernel)

    rows = spec.get("rows")
    if not isinstance(rows, dict) or not rows:
        raise ConfigError("table kernel needs a non-empty 'rows' mapping")
    parsed = []
    for key, values in rows.items():
        n = int(key)
        if n < 2 or len(values) != n - 1:
            raise ConfigError(f"table row n={n} must hold n-1 entries")
        if any(float(v) < 0 for v in values):
            raise ConfigError(f"table row n={n} has negative entries")
        parsed.append((n, tuple(float(v) for v in values)))
    return FragmentationKernel(variant, rows=tuple(sorted(parsed)), descriptor=descriptor), None


def _real_parameter(spec, name):
    if name not in spec:
        raise ConfigError(f"{spec['type']} kernel needs '{name}'")
    try:
        value = float(spec[name])
    except (TypeError, ValueError) as ex:
        raise ConfigError(f"'{name}' must be a real number: {ex}") from ex
    if not np.isfinite(value):
        raise ConfigError(f"'{name}' must be finite")
    return value


# =============================================================================
# Mass rule and Delta functionals
# =============================================================================


@dataclass(frozen=True)
class MassRuleReport:
    sizes: np.ndarray
    residuals: np.ndarray
    tol: float

    @property
    def violations(self) -> np.ndarray:
        return self.sizes[self.residuals > self.tol]

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else 0.0

    @property
    def passed(self) -> bool:
        return self.violations.size == 0


def validate_mass_rule(kernel: FragmentationKernel, n_max: int, tol: float = MASS_RULE_TOL) -> MassRuleReport:
    if n_max < 2:
        raise ValidationError("n_max must be at least 2")
    sizes = np.arange(2, n_max + 1)
    residuals = np.empty(sizes.size)
    for idx, n in enumerate(sizes):
        k = np.arange(1, n, dtype=float)
        residuals[idx] = abs(float(np.dot(k, kernel.row(int(n)))) - n) / n
    report = MassRuleReport(sizes, residuals, tol)
    if not report.passed:
        logger.warning("Mass rule violated at %d sizes (max residual %.3e)", report.violations.size, report.max_residual)
    return report


# Delta^(m)_n = n^m - sum_k k^m b_{k,n}
def delta_sequence(kernel: FragmentationKernel, m: float, n_range) -> np.ndarray:
    if m < 0:
        raise ValidationError("moment order m must be nonnegative")
    sizes = [int(n) for n in n_range]
    out = np.empty(len(sizes))
    for idx, n in enumerate(sizes):
        k = np.arange(1, n, dtype=float)
        out[idx] = float(n) ** m - float(np.dot(k ** m, kernel.row(n)))
    return out


# =============================================================================
# Rate families
# =============================================================================


@dataclass(frozen=True)
class RateFamily:
    family: str
    coeff: float = 1.0
    exponent: float = 1.0
    values: tuple = ()
    source: Optional[FragmentationKernel] = None

    def __post_init__(self):
        if self.family not in RATE_FAMILIES:
            raise ConfigError(f"Unknown rate family: {self.family}")
        if self.family == "table" and not self.values:
            raise ConfigError("table rate family needs values")
        if self.family == "induced" and self.source is None:
            raise ConfigError("induced rate family needs its binary_psi kernel")

    def __call__(self, n):
        return _on_sizes(self._evaluate, n)

    def _evaluate(self, n: np.ndarray) -> np.ndarray:
        if self.family == "zero":
            return np.zeros_like(n)
        if self.family == "constant":
            return np.full_like(n, self.coeff)
        if self.family == "linear":
            return self.coeff * n
        if self.family == "power":
            return self.coeff * n ** self.exponent
        if self.family == "induced":
            return self.coeff * self.source.induced_rate(n.astype(int))

        idx = n.astype(int) - 1
        if np.any(idx < 0) or np.any(idx >= len(self.values)):
            raise ValidationError(f"tabulated rate only covers n=1..{len(self.values)}")
        return np.asarray(self.values, dtype=float)[idx]

    # Largest n the family can be evaluated at (None means every n)
    @property
    def max_n(self) -> Optional[int]:
        return len(self.values) if self.family == "table" else None

    @property
    def is_zero(self) -> bool:
        if self.family == "zero":
            return True
        if self.family == "table":
            return all(v == 0 for v in self.values)
        return self.family != "induced" and self.coeff == 0.0

    def scaled(self, factor: float) -> "RateFamily":
        if self.family == "table":
            return replace(self, values=tuple(factor * v for v in self.values))
        return replace(self, coeff=factor * self.coeff)

    def to_descriptor(self) -> dict:
        if self.family == "zero":
            return {"family": "zero"}
        if self.family == "constant":
            return {"family": "constant", "value": self.coeff}
        if self.family == "linear":
            return {"family": "linear", "coeff": self.coeff}
        if self.family == "power":
            return {"family": "power", "coeff": self.coeff, "exponent": self.exponent}
        if self.family == "table":
            return {"family": "table", "values": list(self.values)}
        out = {"family": "induced"}
        if self.coeff != 1.0:
            out["coeff"] = self.coeff
        return out


def rate_family(spec, induced: Optional[RateFamily] = None) -> RateFamily:
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigError(f"Malformed rate descriptor: {spec!r}")
    family = spec["family"]
    allowed = {
        "zero": {"family"},
        "constant": {"family", "value"},
        "linear": {"family", "coeff"},
        "power": {"family", "coeff", "exponent"},
        "table": {"family", "values"},
        "induced": {"family", "coeff"},
    }
    if family not in allowed:
        raise ConfigError(f"Unknown rate family: {family}")
    extra = set(spec) - allowed[family]
    if extra:
        raise ConfigError(f"Unknown fields for {family} rate: {sorted(extra)}")

    try:
        if family == "zero":
            return RateFamily("zero", coeff=0.0)
        if family == "constant":
            return RateFamily("constant", coeff=float(spec["value"]))
        if family == "linear":
            return RateFamily("linear", coeff=float(spec.get("coeff", 1.0)))
        if family == "power":
            return RateFamily("power", coeff=float(spec.get("coeff", 1.0)), exponent=float(spec["exponent"]))
        if family == "table":
            return RateFamily("table", values=tuple(float(v) for v in spec["values"]))
    except (KeyError, TypeError, ValueError) as ex:
        raise ConfigError(f"Malformed {family} rate descriptor: {ex}") from ex

    if induced is None:
        raise ConfigError("'induced' fragmentation rate needs a binary_psi kernel")
    return replace(induced, coeff=float(spec.get("coeff", 1.0)))


# =============================================================================
# Coefficient model
# =============================================================================


@dataclass(frozen=True)
class CoefficientModel:
    fragmentation_rate: RateFamily
    growth_rate: RateFamily
    death_rate: RateFamily
    kernel: Optional[FragmentationKernel]
    label: str = "model"

    def __post_init__(self):
        limits = [r.max_n for r in (self.fragmentation_rate, self.growth_rate, self.death_rate) if r.max_n]
        probe = np.arange(1, min([RATE_PROBE] + limits) + 1)
        for name, values in (("fragmentation", self.a(probe)), ("growth", self.g(probe)), ("death", self.d(probe))):
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise ValidationError(f"{name} rate must be finite and nonnegative")

        frag = self.a(probe[1:])
        if self.kernel is None and np.any(frag != 0):
            raise ValidationError("a model without a kernel must have a zero fragmentation rate")
        if self.kernel is not None and np.any(frag <= 0):
            raise ValidationError("fragmentation rate must be positive for n >= 2 when a kernel is active")

    # a_1 = 0 and d_1 = 0 regardless of the family
    def a(self, n):
        return _on_sizes(lambda s: np.where(s == 1, 0.0, self.fragmentation_rate(s)), n)

    def g(self, n):
        return self.growth_rate(n)

    def d(self, n):
        return _on_sizes(lambda s: np.where(s == 1, 0.0, self.death_rate(s)), n)

    # theta_n = g_n + d_n + a_n, so theta_1 = g_1
    def theta(self, n):
        return _on_sizes(lambda s: self.a(s) + self.g(s) + self.d(s), n)

    def a_eff(self, n):
        return _on_sizes(lambda s: self.a(s) + self.d(s), n)

    def kernel_row(self, n: int) -> np.ndarray:
        if self.kernel is None:
            return np.zeros(int(n) - 1)
        return self.kernel.row(n)

    def scaled(self, factor: float) -> "CoefficientModel":
        return replace(
            self,
            fragmentation_rate=self.fragmentation_rate.scaled(factor),
            growth_rate=self.growth_rate.scaled(factor),
            death_rate=self.death_rate.scaled(factor),
        )


# =============================================================================
# Death-absorbing (effective) kernel
# =============================================================================


@dataclass(frozen=True)
class EffectiveKernel:
    model: CoefficientModel

    def rate(self, n):
        return self.model.a_eff(n)

    # bsf_{k,n}: deaths land on k = n-1, fragments keep their share a_n/(a_n+d_n)
    def row(self, n: int) -> np.ndarray:
        a, d = self.model.a(n), self.model.d(n)
        total = a + d
        if total <= 0:
            raise DegenerateRateError(f"a_n + d_n = 0 at n={n}")
        out = a * self.model.kernel_row(n) / total
        out[-1] += d / total
        return out

    def daughters(self, k: int, n: int) -> float:
        if n < 2 or not 1 <= k <= n - 1:
            raise ValidationError(f"kernel index out of range: k={k}, n={n}")
        return float(self.row(n)[k - 1])

    def mass_loss_fraction(self, n: int) -> float:
        a, d = self.model.a(n), self.model.d(n)
        return d / (n * (a + d))


def effective_kernel(model: CoefficientModel, n_probe: int = RATE_PROBE) -> EffectiveKernel:
    limits = [r.max_n for r in (model.fragmentation_rate, model.death_rate) if r.max_n]
    probe = np.arange(2, max(2, min([n_probe] + limits)) + 1)
    zero = probe[model.a_eff(probe) <= 0]
    if zero.size:
        raise DegenerateRateError(f"a_n + d_n = 0 at n={int(zero[0])}")
    return EffectiveKernel(model)


# bsf_{n-1,n} > 0 for every n keeps the full semigroup irreducible
def is_irreducible(model: CoefficientModel, n_max: int = RATE_PROBE) -> bool:
    try:
        eff = effective_kernel(model, n_max)
        return all(eff.row(n)[-1] > 0 for n in range(2, n_max + 1))
    except DegenerateRateError:
        return False
