import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from errors import ValidationError

FLAVORS = ("power", "gamma")

# Above this size norms and moments switch to compensated summation
COMPENSATED_FROM = 1000


@dataclass(frozen=True, eq=False)
class StateVector:
    entries: np.ndarray

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValidationError("a state needs at least one entry")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("state entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @classmethod
    def delta(cls, n: int, size: int, amount: float = 1.0) -> "StateVector":
        if not 1 <= n <= size:
            raise ValidationError(f"delta index {n} outside 1..{size}")
        arr = np.zeros(size)
        arr[n - 1] = amount
        return cls(arr)

    @classmethod
    def zeros(cls, size: int) -> "StateVector":
        return cls(np.zeros(size))

    @property
    def size(self) -> int:
        return int(self.entries.size)

    # Physical states (cluster counts) are nonnegative; eigenvector arithmetic is not
    @property
    def is_nonnegative(self) -> bool:
        return bool(np.all(self.entries >= 0))

    def __len__(self):
        return self.size

    def __add__(self, other):
        return StateVector(self.entries + as_array(other))

    def __sub__(self, other):
        return StateVector(self.entries - as_array(other))

    def __mul__(self, factor):
        return StateVector(self.entries * float(factor))

    __rmul__ = __mul__


def as_array(f) -> np.ndarray:
    if isinstance(f, StateVector):
        return f.entries
    return np.asarray(f, dtype=float)


# w_n = n^m (power) or Gamma(n+m)/Gamma(n) (gamma)
# Gamma weights use w_1 = Gamma(1+m), w_{n+1} = w_n (n+m)/n so nothing overflows at large n
@lru_cache(maxsize=64)
def _weights(m: float, size: int, flavor: str) -> np.ndarray:
    n = np.arange(1, size + 1, dtype=float)
    if flavor == "power":
        out = n ** m
    else:
        ratios = (n[:-1] + m) / n[:-1]
        out = float(special.gamma(1.0 + m)) * np.concatenate(([1.0], np.cumprod(ratios)))
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class WeightTable:
    m: float
    size: int
    flavor: str = "power"

    def __post_init__(self):
        if self.m < 0:
            raise ValidationError("moment order m must be nonnegative")
        if self.flavor not in FLAVORS:
            raise ValidationError(f"Unknown weight flavor: {self.flavor}")
        if self.size < 1:
            raise ValidationError("weight table needs at least one size")

    @property
    def weights(self) -> np.ndarray:
        return _weights(float(self.m), int(self.size), self.flavor)


def weights(m: float, size: int, flavor: str = "power") -> np.ndarray:
    return WeightTable(m, size, flavor).weights


def _weighted_sum(values: np.ndarray) -> float:
    if values.size > COMPENSATED_FROM:
        return math.fsum(values)
    return float(np.sum(values))


def norm(f, m: float, flavor: str = "power") -> float:
    x = as_array(f)
    return _weighted_sum(weights(m, x.size, flavor) * np.abs(x))


def star_norm(f, m: float) -> float:
    return norm(f, m, "gamma")


# sup_n n^{-m} |h_n|, the norm dual to the [m]-norm
def dual_norm(h, m: float) -> float:
    x = as_array(h)
    return float(np.max(np.abs(x) / weights(m, x.size, "power")))


# Signed physical moment; p = 1 gives the total mass M(t)
def moment(f, p: float) -> float:
    if p < 0:
        raise ValidationError("moment order p must be nonnegative")
    x = as_array(f)
    return _weighted_sum(weights(p, x.size, "power") * x)


def mass(f) -> float:
    return moment(f, 1.0)


# P_N f keeps f_1..f_N
def project(f, N: int) -> StateVector:
    if N < 1:
        raise ValidationError("projection size must be at least 1")
    x = as_array(f)
    return StateVector(x[: min(int(N), x.size)])


# <h, f> = sum_n h_n f_n
def pairing(h, f) -> float:
    hx, fx = as_array(h), as_array(f)
    if hx.size != fx.size:
        raise ValidationError(f"pairing needs equal sizes, got {hx.size} and {fx.size}")
    return _weighted_sum(hx * fx)
