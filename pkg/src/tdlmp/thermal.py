"""Transformer thermal dynamics and insulation aging.

Top-oil temperature follows the hourly difference equation of the IEC/IEEE
loading guides, the hot-spot rise over top oil is quasi-static, and insulation
aging is measured with the exponential aging acceleration factor referenced to
a 110 °C hot spot.  Two families of functions live here:

* exact evaluations (``aging_factor_exact``, ``top_oil_step_exact``,
  ``simulate_exact``) used for ex-post scoring of schedules, and
* the convex surrogate embedded in the conic program: a chord-based piecewise
  linear aging factor (``build_pwl``) and first-order Taylor coefficients of
  the thermal recursion around rated current (``linearize``).

Temperatures are in °C, currents are squared per-unit magnitudes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

AGING_B = 15000.0
REFERENCE_HOT_SPOT = 110.0
KELVIN = 273.0
DEFAULT_BREAKPOINTS = (0.0, 110.0, 120.0, 130.0, 140.0, 150.0, 160.0, 170.0, 180.0)
VALID_RANGE = (-30.0, 200.0)
NORMAL_LIFE_HOURS = 180_000.0


@dataclass(frozen=True)
class ThermalParams:
    """Per-transformer thermal constants.

    ``rated_current_sq`` is the squared rated current in per-unit of the
    feeder base; ``hourly_cost`` is the cost of one hour of insulation life.
    """

    rated_current_sq: float
    loss_ratio: float = 5.0
    dtheta_to_rated: float = 55.0
    dtheta_h_rated: float = 25.0
    tau_to: float = 3.0
    k11: float = 1.0
    n: float = 0.8
    m: float = 0.8
    hourly_cost: float = 0.0
    rated_kva: float | None = None
    name: str = ""

    def __post_init__(self):
        for attr in ("rated_current_sq", "loss_ratio", "dtheta_to_rated", "dtheta_h_rated", "tau_to", "k11"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"thermal parameter {attr} must be positive, got {getattr(self, attr)!r}")
        for attr in ("n", "m"):
            v = getattr(self, attr)
            if not 0 < v <= 1:
                raise ValueError(f"exponent {attr} must lie in (0, 1], got {v!r}")
        if self.hourly_cost < 0:
            raise ValueError("hourly_cost must be nonnegative")


def suggested_hourly_cost(replacement_cost: float, life_hours: float = NORMAL_LIFE_HOURS) -> float:
    """Cost of one aging-hour as replacement cost spread over normal life."""
    return replacement_cost / life_hours


def aging_factor_exact(theta_h):
    """Aging acceleration factor ``exp(15000/383 - 15000/(θ+273))``."""
    theta = np.asarray(theta_h, dtype=float)
    if np.any(theta <= -KELVIN):
        raise ValueError("hot-spot temperature must exceed -273 °C")
    out = np.exp(AGING_B / (REFERENCE_HOT_SPOT + KELVIN) - AGING_B / (theta + KELVIN))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PwlSegments:
    """Chord segments of the aging factor; ``evaluate`` is the max of affines."""

    breakpoints: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.slopes)

    def evaluate(self, theta_h):
        theta = np.asarray(theta_h, dtype=float)
        vals = np.multiply.outer(theta, self.slopes) - self.intercepts
        out = vals.max(axis=-1)
        return float(out) if out.ndim == 0 else out


def build_pwl(breakpoints=DEFAULT_BREAKPOINTS) -> PwlSegments:
    """Secant of the aging factor over each interval between breakpoints.

    Segment ``k`` reads ``a_k θ - b_k``.  Because the aging factor is convex on
    the validity range, the max of the secant lines interpolates it at the
    breakpoints and overestimates it in between.
    """
    bp = np.asarray(breakpoints, dtype=float)
    if bp.ndim != 1 or len(bp) < 2:
        raise ValueError("need at least two breakpoints")
    if np.any(np.diff(bp) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    fv = np.asarray(aging_factor_exact(bp))
    a = np.diff(fv) / np.diff(bp)
    b = a * bp[:-1] - fv[:-1]
    for arr in (bp, a, b):
        arr.setflags(write=False)
    return PwlSegments(bp, a, b)


@dataclass(frozen=True)
class LinearizedCoefficients:
    """Coefficients of the epigraph rows and of the linear top-oil recursion.

    Epigraph: ``f_t >= alpha1[k] h_t + alpha2[k] l_t + beta[k]``.
    Recursion: ``h_t = gamma1 h_{t-1} + gamma2 l_t + delta[t]``.
    """

    alpha1: np.ndarray
    alpha2: np.ndarray
    beta: np.ndarray
    gamma1: float
    gamma2: float
    delta: np.ndarray


def linearize(params: ThermalParams, pwl: PwlSegments, ambient, dt: float = 1.0) -> LinearizedCoefficients:
    if dt <= 0:
        raise ValueError("dt must be positive")
    amb = np.asarray(ambient, dtype=float)
    p = params
    ktau = p.k11 * p.tau_to
    alpha1 = pwl.slopes.copy()
    alpha2 = pwl.slopes * p.dtheta_h_rated * p.m / p.rated_current_sq
    beta = pwl.slopes * p.dtheta_h_rated * (1.0 - p.m) - pwl.intercepts
    gamma1 = ktau / (ktau + dt)
    gamma2 = gamma1 * dt * p.dtheta_to_rated * p.n * p.loss_ratio / (ktau * (1.0 + p.loss_ratio) * p.rated_current_sq)
    base = p.dtheta_to_rated * (1.0 + (1.0 - p.n) * p.loss_ratio) / (1.0 + p.loss_ratio)
    delta = gamma1 * dt / ktau * (base + amb)
    return LinearizedCoefficients(alpha1, alpha2, beta, gamma1, gamma2, delta)


def _oil_bracket(k_sq, params: ThermalParams):
    return ((1.0 + np.asarray(k_sq, dtype=float) * params.loss_ratio) / (1.0 + params.loss_ratio)) ** params.n


def _oil_bracket_affine(k_sq, params: ThermalParams):
    R, n = params.loss_ratio, params.n
    return (n * R * np.asarray(k_sq, dtype=float) + 1.0 + (1.0 - n) * R) / (1.0 + R)


def top_oil_step_exact(theta_prev, k_sq, ambient, params: ThermalParams, dt: float = 1.0):
    """Advance the top-oil temperature one period with the exact power-n term."""
    if np.any(np.asarray(k_sq) < 0):
        raise ValueError("load ratio squared must be nonnegative")
    ktau = params.k11 * params.tau_to
    g = ktau / (ktau + dt)
    return g * theta_prev + (1.0 - g) * (params.dtheta_to_rated * _oil_bracket(k_sq, params) + ambient)


def top_oil_initial(params: ThermalParams, ambient0: float, current_sq0: float) -> float:
    """Steady-state top oil for a constant current (derivative set to zero)."""
    if current_sq0 < 0:
        raise ValueError("current_sq0 must be nonnegative")
    return float(ambient0 + params.dtheta_to_rated * _oil_bracket(current_sq0 / params.rated_current_sq, params))


def top_oil_initial_linearized(params: ThermalParams, ambient0: float, current_sq0: float) -> float:
    """Steady state of the Taylor-linearized recursion (fixed point of the affine map)."""
    k_sq = current_sq0 / params.rated_current_sq
    return float(ambient0 + params.dtheta_to_rated * _oil_bracket_affine(k_sq, params))


def hot_spot_rise_exact(k_sq, params: ThermalParams):
    if np.any(np.asarray(k_sq) < 0):
        raise ValueError("load ratio squared must be nonnegative")
    out = params.dtheta_h_rated * np.asarray(k_sq, dtype=float) ** params.m
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ThermalTrajectory:
    """Result of an exact hourly simulation.

    ``top_oil`` has T+1 entries (index 0 is the initial condition); the other
    arrays are per period t = 1..T.
    """

    top_oil: np.ndarray
    hot_spot: np.ndarray
    aging_factor: np.ndarray
    loss_of_life: float
    warnings: list[str] = field(default_factory=list)

    def states(self):
        return [
            {"top_oil": float(self.top_oil[t + 1]), "hot_spot": float(h), "aging_factor": float(f)}
            for t, (h, f) in enumerate(zip(self.hot_spot, self.aging_factor))
        ]


def _oil_targets(params, current_sq, ambient):
    k_sq = np.asarray(current_sq, dtype=float) / params.rated_current_sq
    return k_sq, params.dtheta_to_rated * _oil_bracket(k_sq, params) + np.asarray(ambient, dtype=float)


def periodic_top_oil(params: ThermalParams, current_sq, ambient, dt: float = 1.0) -> float:
    """Initial top oil that makes the exact daily recursion periodic.

    The recursion is affine in the initial value, so the periodic orbit has a
    closed form: theta_0 = theta_T(theta_0 = 0) / (1 - g^T).
    """
    _, target = _oil_targets(params, current_sq, ambient)
    ktau = params.k11 * params.tau_to
    g = ktau / (ktau + dt)
    acc = 0.0
    for tgt in target:
        acc = g * acc + (1.0 - g) * tgt
    return acc / (1.0 - g ** len(target))


def simulate_exact(params: ThermalParams, current_sq, ambient, initial_top_oil: float, dt: float = 1.0) -> ThermalTrajectory:
    """Exact hour-by-hour hot-spot and aging simulation used for scoring.

    Loss of life is ``sum_t F_AA(θ^H_t) dt`` in hours.
    """
    cur = np.asarray(current_sq, dtype=float)
    amb = np.asarray(ambient, dtype=float)
    if cur.shape != amb.shape:
        raise ValueError(f"current series length {cur.shape} does not match ambient {amb.shape}")
    if np.any(cur < 0):
        raise ValueError("current_sq must be nonnegative")
    k_sq, target = _oil_targets(params, cur, amb)
    ktau = params.k11 * params.tau_to
    g = ktau / (ktau + dt)
    top = np.empty(len(cur) + 1)
    top[0] = initial_top_oil
    for t in range(len(cur)):
        top[t + 1] = g * top[t] + (1.0 - g) * target[t]
    hot = top[1:] + params.dtheta_h_rated * k_sq**params.m
    msgs = []
    lo, hi = VALID_RANGE
    if np.any(hot < lo) or np.any(hot > hi):
        msgs.append(
            f"hot-spot temperature outside validity range [{lo}, {hi}] °C "
            f"(min {hot.min():.1f}, max {hot.max():.1f})"
        )
        warnings.warn(msgs[-1], RuntimeWarning, stacklevel=2)
    faa = np.asarray(aging_factor_exact(hot), dtype=float).reshape(hot.shape)
    return ThermalTrajectory(top, hot, faa, float(faa.sum() * dt), msgs)


@dataclass
class LinearizationErrorReport:
    top_oil_term_max: float
    top_oil_term_mean: float
    hot_spot_term_max: float
    hot_spot_term_mean: float
    pwl_max: float
    pwl_mean: float
    pwl_min: float


def linearization_error_report(params: ThermalParams, pwl: PwlSegments, currents_sq, hot_spots) -> LinearizationErrorReport:
    """Approximation quality of the two Taylor terms and of the PWL aging factor.

    Taylor errors are expressed in °C (scaled by the rated rises); PWL errors in
    aging-factor units, signed as ``pwl - exact`` (nonnegative on the range).
    """
    l = np.asarray(currents_sq, dtype=float)
    k_sq = l / params.rated_current_sq
    oil_err = params.dtheta_to_rated * np.abs(_oil_bracket(k_sq, params) - _oil_bracket_affine(k_sq, params))
    hs_exact = k_sq**params.m
    hs_affine = 1.0 + params.m * (k_sq - 1.0)
    hs_err = params.dtheta_h_rated * np.abs(hs_exact - hs_affine)
    th = np.asarray(hot_spots, dtype=float)
    pw = pwl.evaluate(th) - aging_factor_exact(th)
    return LinearizationErrorReport(
        float(oil_err.max()), float(oil_err.mean()), float(hs_err.max()), float(hs_err.mean()),
        float(np.abs(pw).max()), float(np.abs(pw).mean()), float(np.min(pw)),
    )


def analytic_top_oil_step(params: ThermalParams, theta0: float, k_sq: float, ambient: float, times):
    """Closed-form solution of the top-oil ODE for constant load and ambient."""
    target = ambient + params.dtheta_to_rated * _oil_bracket(k_sq, params)
    t = np.asarray(times, dtype=float)
    return target + (theta0 - target) * np.exp(-t / (params.k11 * params.tau_to))


def aging_convexity_margin(theta_h):
    """``B/(θ+273) - 2``; positive where the aging factor is convex."""
    return AGING_B / (np.asarray(theta_h, dtype=float) + KELVIN) - 2.0


__all__ = [
    "ThermalParams", "PwlSegments", "LinearizedCoefficients", "ThermalTrajectory", "LinearizationErrorReport",
    "aging_factor_exact", "build_pwl", "linearize", "top_oil_step_exact", "top_oil_initial",
    "top_oil_initial_linearized", "hot_spot_rise_exact", "simulate_exact", "periodic_top_oil",
    "linearization_error_report", "analytic_top_oil_step", "suggested_hourly_cost", "DEFAULT_BREAKPOINTS",
]
