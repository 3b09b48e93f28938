import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import GdfError, ValidationError
from model import CoefficientModel, delta_sequence

logger = logging.getLogger(__name__)

CONDITION_IDS = (
    "condi1",
    "condi2",
    "condi3",
    "condi4a",
    "condi4b",
    "riai",
    "crucrit_prime",
    "crucrit",
    "ggamcond",
    "bdp1",
    "thm3_2a",
    "thm3_2b",
    "thm3_2c",
    "growth_linear",
    "growth_superlinear",
)

# Conditions that take m' (their verdict compares against m, m' or m/m')
NEEDS_M_PRIME = ("condi2", "crucrit_prime", "thm3_2c")

DEFAULT_WINDOW = (2, 10_000)
WINDOW_POINTS = 200
MIN_WINDOW_POINTS = 16

# Strict inequalities closer than this are left inconclusive
MARGIN = 1e-6
# Witness values below this are treated as exact zeros
SNAP = 1e-9
# Last-half oscillation below this fraction of the level counts as a stable trend
OSCILLATION = 0.10
# Log-log slope beyond which a tail is read as diverging (or vanishing)
SLOPE = 0.1

HOLDS, FAILS, INCONCLUSIVE = "holds", "fails", "inconclusive"


@dataclass(frozen=True, eq=False)
class ConditionVerdict:
    condition_id: str
    verdict: str
    window: tuple
    sizes: np.ndarray
    witness: np.ndarray
    limit: Optional[float]
    stable: bool
    detail: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "verdict": self.verdict,
            "window": list(self.window),
            "limit": _json_float(self.limit),
            "stable": self.stable,
            "detail": self.detail,
            "extras": {k: _json_float(v) if isinstance(v, float) else v for k, v in self.extras.items()},
        }


def _json_float(x):
    if x is None:
        return None
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


# Geometric sample of the window, clipped to what tabulated rates can answer
def window_sizes(model: CoefficientModel, window=None) -> np.ndarray:
    lo, hi = window or DEFAULT_WINDOW
    limits = [r.max_n for r in (model.fragmentation_rate, model.growth_rate, model.death_rate) if r.max_n]
    if limits:
        hi = min([hi] + limits)
    if lo < 1 or hi <= lo:
        raise ValidationError(f"window [{lo}, {hi}] is empty")
    sizes = np.unique(np.round(np.geomspace(lo, hi, WINDOW_POINTS)).astype(int))
    if sizes.size < MIN_WINDOW_POINTS:
        raise ValidationError(f"window [{lo}, {hi}] has {sizes.size} points, need {MIN_WINDOW_POINTS}")
    return sizes


# =============================================================================
# Trend classification
# =============================================================================


@dataclass(frozen=True)
class Trend:
    limit: float
    stable: bool


def _loglog_slope(sizes, values) -> float:
    vals = np.abs(values)
    if np.any(vals == 0):
        return 0.0
    slope, _ = np.polyfit(np.log(sizes), np.log(vals), 1)
    return float(slope)


def classify_trend(sizes: np.ndarray, values: np.ndarray) -> Trend:
    values = np.where(np.abs(values) < SNAP, 0.0, values)
    half = values.size // 2
    tail, tail_sizes = values[half:], sizes[half:]

    if np.any(np.isposinf(tail)):
        return Trend(np.inf, True)
    if np.any(np.isnan(tail)):
        return Trend(np.nan, False)

    steps = np.diff(tail)
    scale = max(float(np.max(np.abs(tail))), SNAP)
    monotone = bool(np.all(steps >= -1e-12 * scale) or np.all(steps <= 1e-12 * scale))
    level = float(np.mean(np.abs(tail)))
    wobble = float(np.max(tail) - np.min(tail))
    stable = monotone or (level == 0.0) or wobble < OSCILLATION * level

    if np.all(tail == 0):
        return Trend(0.0, True)
    slope = _loglog_slope(tail_sizes, tail)
    if monotone and slope > SLOPE and np.all(tail != 0):
        return Trend(np.inf if tail[-1] > 0 else -np.inf, stable)
    if monotone and slope < -SLOPE:
        return Trend(0.0, stable)
    return Trend(float(tail[-1]), stable)


def _decide(cid, sizes, window, witness, passes, fails_when, detail="", extras=None) -> ConditionVerdict:
    trend = classify_trend(sizes, witness)
    if not trend.stable or np.isnan(trend.limit):
        verdict = INCONCLUSIVE
    elif passes(trend.limit):
        verdict = HOLDS
    elif fails_when(trend.limit):
        verdict = FAILS
    else:
        verdict = INCONCLUSIVE
    return ConditionVerdict(cid, verdict, window, sizes, witness, trend.limit, trend.stable, detail, extras or {})


# =============================================================================
# Diagnostic sequences
# =============================================================================


def _steps(sizes: np.ndarray, m: float):
    n = sizes.astype(float)
    up = np.expm1(m * np.log1p(1.0 / n))
    down = -np.expm1(m * np.log1p(-1.0 / n))
    return up, down


def _delta_ratio(model: CoefficientModel, sizes: np.ndarray, m: float) -> np.ndarray:
    if model.kernel is None:
        return np.zeros(sizes.size)
    return delta_sequence(model.kernel, m, sizes) / sizes.astype(float) ** m


@dataclass(frozen=True, eq=False)
class DiagnosticSequences:
    sizes: np.ndarray
    Lambda: np.ndarray
    Theta: np.ndarray
    Gamma: np.ndarray
    delta_ratio: np.ndarray


# Exact forms (no 1/n expansion); explicit sizes override the geometric window
def diagnostic_sequences(model: CoefficientModel, m: float, window=None, sizes=None) -> DiagnosticSequences:
    if m < 1:
        raise ValidationError("diagnostic sequences need m >= 1")
    sizes = window_sizes(model, window) if sizes is None else np.asarray(sizes, dtype=int)
    a, g, d = model.a(sizes), model.g(sizes), model.d(sizes)
    up, down = _steps(sizes, m)
    ratio = _delta_ratio(model, sizes, m)

    with np.errstate(divide="ignore", invalid="ignore"):
        a_eff = a + d
        theta = a + g + d
        Lambda = (a * ratio + d * down - g * up) / a_eff
        Theta = (a * ratio + d * down - g * up) / theta
    Gamma = g * up - d * down
    return DiagnosticSequences(sizes, Lambda, Theta, Gamma, ratio)


# gamma, g with gamma a_n <= g_n <= g a_n over the window
def angnle_constants(model: CoefficientModel, window=None):
    sizes = window_sizes(model, window)
    a = model.a(sizes)
    if np.any(a <= 0):
        raise ValidationError("fragmentation rate vanishes in the window")
    ratio = model.g(sizes) / a
    return float(ratio.min()), float(ratio.max())


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(den == 0, np.inf, out)


# =============================================================================
# Conditions
# =============================================================================


def evaluate_condition(
    model: CoefficientModel,
    condition_id: str,
    m: float = 2.0,
    m_prime: Optional[float] = None,
    window=None,
    constants: Optional[dict] = None,
) -> ConditionVerdict:
    if condition_id not in CONDITION_IDS:
        raise ValidationError(f"Unknown condition id: {condition_id}")
    if condition_id in NEEDS_M_PRIME and (m_prime is None or m_prime <= m):
        raise ValidationError(f"{condition_id} needs m_prime > m")
    constants = constants or {}

    sizes = window_sizes(model, window)
    span = (int(sizes[0]), int(sizes[-1]))
    n = sizes.astype(float)
    a, g, d = model.a(sizes), model.g(sizes), model.d(sizes)
    a_eff = a + d
    up, down = _steps(sizes, m)

    # liminf (a_n + d_n - g_n((n+1)^m - n^m)/n^m) >= 0
    if condition_id == "condi1":
        seq = a_eff - g * up
        omega = float(max(0.0, np.max(-seq)))
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x >= -MARGIN, lambda x: x < -MARGIN,
            "liminf of a_n + d_n - g_n((n+1)^m - n^m)/n^m against 0",
            {"omega_surrogate": omega},
        )

    if condition_id == "condi2":
        seq = _ratio(n * a_eff, g)
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x >= m_prime - MARGIN, lambda x: x < m_prime - MARGIN,
            f"liminf n(a_n + d_n)/g_n against m'={m_prime}",
        )

    if condition_id == "condi3":
        return _decide(
            condition_id, sizes, span, a_eff,
            np.isposinf, lambda x: np.isfinite(x),
            "liminf (a_n + d_n) must be infinite",
        )

    # sum 1/g_n < infinity, read off the tail exponent of 1/g_n
    if condition_id == "condi4a":
        all_sizes = np.arange(1, sizes[-1] + 1)
        inv = _ratio(np.ones(all_sizes.size), model.g(all_sizes))
        partial = np.cumsum(inv)[sizes - 1]
        if np.any(np.isinf(inv)):
            return ConditionVerdict(condition_id, FAILS, span, sizes, partial, np.inf, True, "g_n vanishes, 1/g_n is not summable")
        half = sizes.size // 2
        exponent = -_loglog_slope(sizes[half:], inv[sizes[half:] - 1])
        if exponent > 1.05:
            verdict = HOLDS
        elif exponent <= 1.001:
            verdict = FAILS
        else:
            verdict = INCONCLUSIVE
        return ConditionVerdict(
            condition_id, verdict, span, sizes, partial, float(partial[-1]), True,
            "tail exponent p of 1/g_n ~ n^-p (summable when p > 1)", {"tail_exponent": exponent},
        )

    if condition_id == "condi4b":
        seq = _ratio(n, g)
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x == 0.0, lambda x: x != 0.0,
            "n/g_n must vanish",
        )

    if condition_id == "riai":
        seq = _ratio(a_eff, g)
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x > MARGIN, lambda x: x <= MARGIN,
            "liminf (a_n + d_n)/g_n must be positive",
        )

    if condition_id in ("crucrit", "crucrit_prime"):
        ratio = _delta_ratio(model, sizes, m)
        if condition_id == "crucrit":
            theta = model.theta(sizes)
            seq = np.where(theta > 0, a / np.where(theta > 0, theta, 1.0), 0.0) * ratio
            threshold = 0.0
        else:
            seq = np.where(a_eff > 0, a / np.where(a_eff > 0, a_eff, 1.0), 0.0) * ratio
            threshold = m / m_prime
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x > threshold + MARGIN, lambda x: x < threshold - MARGIN or x == threshold,
            f"liminf of (a_n/rate) Delta_n^(m)/n^m against {threshold}",
        )

    # g + 1 < (gamma + 1)^2 <= (g + 1)^2, from constants (estimated when absent)
    if condition_id == "ggamcond":
        if "gamma" in constants and "g" in constants:
            low, high = float(constants["gamma"]), float(constants["g"])
        else:
            low, high = angnle_constants(model, window)
        holds = high + 1 < (low + 1) ** 2 <= (high + 1) ** 2
        witness = np.array([low, high])
        return ConditionVerdict(
            condition_id, HOLDS if holds else FAILS, span, sizes, witness, None, True,
            "g + 1 < (gamma + 1)^2 <= (g + 1)^2", {"gamma": low, "g": high},
        )

    if condition_id == "bdp1":
        seq = g * up - d * down
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: not np.isposinf(x), np.isposinf,
            "limsup Gamma_n must be bounded above",
        )

    if condition_id in ("thm3_2a", "growth_linear"):
        seq = g / n
        return _decide(
            condition_id, sizes, span, seq,
            np.isfinite, np.isposinf,
            "g_n <= C n",
        )

    if condition_id == "thm3_2b":
        ratio = _ratio(d, g)
        quad = d / n ** 2
        bounded = not np.isposinf(classify_trend(sizes, quad).limit)
        verdict = _decide(
            condition_id, sizes, span, ratio,
            lambda x: x >= 1 - MARGIN and bounded, lambda x: x < 1 - MARGIN or not bounded,
            "limsup d_n/g_n >= 1 with d_n = O(n^2)",
        )
        return verdict

    if condition_id == "thm3_2c":
        seq = n * (_ratio(d, g) - 1.0)
        return _decide(
            condition_id, sizes, span, seq,
            lambda x: x >= m_prime - 1 - MARGIN, lambda x: x < m_prime - 1 - MARGIN,
            f"n(d_n/g_n - 1) >= m' - 1 = {m_prime - 1} for large n",
        )

    # c n^q <= g_n <= C n^q with 1 < q <= m + 1
    half = sizes.size // 2
    if np.any(g[half:] <= 0):
        return ConditionVerdict(condition_id, FAILS, span, sizes, g, 0.0, True, "g_n vanishes in the tail")
    q = float(constants.get("q", round(_loglog_slope(sizes[half:], g[half:]), 6)))
    seq = g / n ** q
    within = 1.0 + SLOPE / 2 < q <= m + 1 + MARGIN
    verdict = _decide(
        condition_id, sizes, span, seq,
        lambda x: within and np.isfinite(x) and x > MARGIN, lambda x: not within or x <= MARGIN or np.isposinf(x),
        f"c n^q <= g_n <= C n^q with 1 < q <= m + 1 (q={q})",
        {"q": q},
    )
    return verdict


# =============================================================================
# Full report
# =============================================================================


@dataclass(frozen=True, eq=False)
class ConditionReport:
    verdicts: dict
    claims: list
    m: float
    m_prime: float

    def holds(self, condition_id: str) -> bool:
        return self.verdicts[condition_id].verdict == HOLDS

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "m_prime": self.m_prime,
            "verdicts": {cid: v.to_dict() for cid, v in self.verdicts.items()},
            "claims": list(self.claims),
        }


def _claims(v: dict) -> list:
    def holds(cid):
        return v[cid].verdict == HOLDS

    claims = []
    if holds("condi2"):
        claims.append("condi2 holds => condi1 holds => the subdiagonal resolvent has the explicit product form")
    if holds("condi2") and holds("condi3") and (holds("condi4a") or holds("condi4b")):
        claims.append("condi2, condi3 and condi4 hold => the subdiagonal resolvent is compact")
    if holds("riai"):
        claims.append("riai holds => the subdiagonal part generates an analytic semigroup")
    if holds("riai") and holds("condi3"):
        claims.append("riai and condi3 hold => the subdiagonal semigroup is also compact")
    if holds("crucrit_prime"):
        claims.append("crucrit_prime holds => the full operator generates a positive semigroup")
    if holds("crucrit"):
        claims.append("crucrit holds => the full operator is closed on the diagonal domain => analytic semigroup expected")
    if holds("crucrit") and holds("condi3"):
        claims.append("crucrit and condi3 hold => analytic compact semigroup => asynchronous exponential growth expected")
    for cid in ("thm3_2a", "thm3_2b", "thm3_2c"):
        if holds(cid):
            claims.append(f"{cid} holds => bdp1 holds => the birth-death part generates a quasicontractive semigroup")
    if holds("growth_linear"):
        claims.append("growth_linear holds => the pure growth operator generates a semigroup")
    if holds("growth_superlinear"):
        claims.append("growth_superlinear holds => no realisation of the growth operator has a bounded resolvent (non-generation)")
    return claims


def full_report(
    model: CoefficientModel,
    m: float = 2.0,
    m_prime: float = 3.0,
    window=None,
    constants: Optional[dict] = None,
) -> ConditionReport:
    if m < 1:
        raise ValidationError("full report needs m >= 1")
    if m_prime <= m:
        raise ValidationError("full report needs m_prime > m")

    verdicts = {}
    for cid in CONDITION_IDS:
        try:
            verdicts[cid] = evaluate_condition(model, cid, m, m_prime, window, constants)
        except GdfError as ex:
            logger.warning("Condition %s could not be evaluated: %s", cid, ex)
            verdicts[cid] = ConditionVerdict(cid, INCONCLUSIVE, tuple(window or DEFAULT_WINDOW), np.array([]), np.array([]), None, False, str(ex))

    if verdicts["ggamcond"].verdict == FAILS and model.kernel is not None and model.kernel.variant == "monomer_shatter":
        logger.warning("ggamcond fails; the monomer-shatter root equation may have no positive root")
    return ConditionReport(verdicts, _claims(verdicts), m, m_prime)
