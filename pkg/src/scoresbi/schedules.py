"""Noise-schedule algebra.

A schedule is a strictly decreasing log signal-to-noise ratio lambda(t) on a
truncated time interval, combined with a variance kind that turns lambda into
the pair (alpha_t, sigma_t) of the perturbation kernel

    z_t = alpha_t * z_0 + sigma_t * eps.

Drift and diffusion coefficients of the forward SDE follow from the identities
f = alpha'/alpha and g^2 = 2*sigma*(sigma' - (alpha'/alpha)*sigma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri  # inverse standard-normal CDF

__all__ = [
    "LogSnrSchedule",
    "TimeDistribution",
    "ScheduleEval",
    "VARIANCE_KINDS",
    "eval_log_snr",
    "alpha_sigma",
    "alpha_sigma_prime",
    "drift_diffusion",
    "schedule_eval",
    "sample_training_time",
    "inference_time_grid",
    "normalized_log_snr",
]

SCHEDULE_KINDS = ("linear", "cosine", "edm_training", "edm_inference", "flow_matching")
# "flow_matching" as a variance kind means alpha + sigma = 1 (alpha_t = 1 - t,
# sigma_t = t under the flow-matching schedule); it is none of vp/ve/sub_vp.
VARIANCE_KINDS = ("vp", "ve", "sub_vp", "flow_matching")

DEFAULT_T0 = 1e-4
DEFAULT_T1 = 1.0 - 1e-4


class ConfigurationError(ValueError):
    """Invalid static configuration (dimensions, enum values, ranges)."""


class DomainError(ValueError):
    """Evaluation outside the schedule's truncated time interval."""


@dataclass(frozen=True)
class LogSnrSchedule:
    """Log-SNR schedule lambda(t) with truncation interval [t0, t1].

    kind-specific fields: ``shift`` (cosine), ``mean``/``std`` (edm_training
    lognormal quantile), ``rho``/``sigma_min``/``sigma_max`` (edm_inference).
    """

    kind: str
    shift: float = 0.0
    mean: float = 2.4
    std: float = 2.4
    rho: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    t0: float = DEFAULT_T0
    t1: float = DEFAULT_T1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 <= self.t0 < self.t1 <= 1.0):
            raise ConfigurationError(f"bad truncation ({self.t0}, {self.t1})")
        if self.kind == "edm_inference":
            if not (0.0 < self.sigma_min < self.sigma_max):
                raise ConfigurationError("need 0 < sigma_min < sigma_max")
            if self.rho <= 0:
                raise ConfigurationError("rho must be positive")
        if self.kind == "edm_training" and self.std <= 0:
            raise ConfigurationError("std must be positive")

    def with_truncation(self, t0, t1):
        return replace(self, t0=t0, t1=t1)

    @property
    def lambda_min(self) -> float:
        return float(eval_log_snr(self, self.t1)[0])

    @property
    def lambda_max(self) -> float:
        return float(eval_log_snr(self, self.t0)[0])


@dataclass(frozen=True)
class TimeDistribution:
    """Training-time proposal on (0, 1), rescaled to the truncated interval.

    power_law has density proportional to (1-t)^(1/(1+rho)) with rho > -1;
    quartic_root draws t = u^4 with u uniform.
    """

    kind: str = "uniform"
    rho: float = -0.6

    def __post_init__(self):
        if self.kind not in ("uniform", "power_law", "quartic_root"):
            raise ConfigurationError(f"unknown time distribution {self.kind!r}")
        if self.kind == "power_law" and self.rho <= -1:
            raise ConfigurationError("power_law requires rho > -1")

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "uniform":
            return t
        if self.kind == "power_law":
            k = 1.0 / (1.0 + self.rho)
            return 1.0 - (1.0 - t) ** (k + 1.0)
        return t ** 0.25


@dataclass(frozen=True)
class ScheduleEval:
    """All schedule quantities at one time point."""

    t: float
    lam: float
    dlam_dt: float
    alpha: float
    sigma: float
    drift_f: float
    diffusion_g2: float


def _check_time(sched: LogSnrSchedule, t):
    t = np.asarray(t, dtype=float)
    slack = 1e-12
    if np.any(t < sched.t0 - slack) or np.any(t > sched.t1 + slack):
        raise DomainError(
            f"t outside truncation [{sched.t0}, {sched.t1}] for {sched.kind}"
        )
    return np.clip(t, sched.t0, sched.t1)


def eval_log_snr(sched: LogSnrSchedule, t):
    """Return (lambda, dlambda/dt) at t; analytic derivatives where available.

    Raises DomainError outside the truncation interval.
    """
    t = _check_time(sched, t)
    if sched.kind == "linear":
        e = np.exp(t * t)
        lam = -np.log(e - 1.0)
        dlam = -2.0 * t * e / (e - 1.0)
    elif sched.kind == "cosine":
        x = 0.5 * math.pi * t
        lam = -2.0 * np.log(np.tan(x)) + 2.0 * sched.shift
        dlam = -math.pi / (np.sin(x) * np.cos(x))
    elif sched.kind == "edm_training":
        q = ndtri(1.0 - t)
        lam = sched.mean + sched.std * q
        # quantile derivative via density reciprocal; the density is clamped
        # at 1e-300, reachable only outside any practical truncation
        dens = np.maximum(np.exp(-0.5 * q * q) / math.sqrt(2.0 * math.pi), 1e-300)
        dlam = -sched.std / dens
    elif sched.kind == "edm_inference":
        r = 1.0 / sched.rho
        a, b = sched.sigma_max ** r, sched.sigma_min ** r
        inner = a + (1.0 - t) * (b - a)
        lam = -2.0 * sched.rho * np.log(inner)
        dlam = 2.0 * sched.rho * (b - a) / inner
    else:  # flow_matching: alpha = 1 - t, sigma = t
        lam = 2.0 * (np.log1p(-t) - np.log(t))
        dlam = -2.0 / (t * (1.0 - t))
    return lam, dlam


def alpha_sigma(kind: str, lam):
    """Map log-SNR to (alpha, sigma) under the given variance kind."""
    lam = np.asarray(lam, dtype=float)
    if kind == "vp":
        alpha = np.sqrt(_sigmoid(lam))
        sigma = np.sqrt(_sigmoid(-lam))
    elif kind == "ve":
        alpha = np.ones_like(lam)
        sigma = np.exp(-0.5 * lam)
    elif kind == "sub_vp":
        # alpha = sqrt(1 - sigma) with lambda = log((1-sigma)/sigma^2);
        # positive quadratic root, rationalized so both tails stay accurate:
        # sigma = 2/(1+sqrt(1+4x)), 1-sigma = 4x/(1+sqrt(1+4x))^2, x = e^lambda
        den = 1.0 + np.sqrt(1.0 + 4.0 * np.exp(lam))
        sigma = 2.0 / den
        alpha = 2.0 * np.exp(0.5 * lam) / den
    elif kind == "flow_matching":
        alpha = _sigmoid(0.5 * lam)
        sigma = _sigmoid(-0.5 * lam)
    else:
        raise ConfigurationError(f"unknown variance kind {kind!r}")
    return alpha, sigma


def alpha_sigma_prime(kind: str, lam, dlam_dt):
    """(alpha, sigma, dalpha/dt, dsigma/dt) via chain rule through lambda."""
    lam = np.asarray(lam, dtype=float)
    alpha, sigma = alpha_sigma(kind, lam)
    if kind == "vp":
        da = 0.5 * alpha * sigma ** 2 * dlam_dt
        ds = -0.5 * sigma * alpha ** 2 * dlam_dt
    elif kind == "ve":
        da = np.zeros_like(alpha)
        ds = -0.5 * sigma * dlam_dt
    elif kind == "sub_vp":
        ds = -dlam_dt * sigma * (1.0 - sigma) / (2.0 - sigma)
        da = -0.5 * ds / alpha
    else:  # flow_matching
        da = 0.5 * alpha * sigma * dlam_dt
        ds = -0.5 * sigma * alpha * dlam_dt
    return alpha, sigma, da, ds


def drift_diffusion(kind: str, sched: LogSnrSchedule, t):
    """Forward-SDE coefficients (f, g^2) at time t.

    Satisfies f = alpha'/alpha and g^2 = 2*sigma*(sigma' - f*sigma) for every
    schedule/kind pair (VE has f = 0 exactly).
    """
    lam, dlam = eval_log_snr(sched, t)
    alpha, sigma, da, ds = alpha_sigma_prime(kind, lam, dlam)
    if kind == "ve":
        f = np.zeros_like(alpha)
    else:
        f = da / alpha
    g2 = 2.0 * sigma * (ds - f * sigma)
    return f, g2


def schedule_eval(kind: str, sched: LogSnrSchedule, t: float) -> ScheduleEval:
    lam, dlam = eval_log_snr(sched, t)
    alpha, sigma, da, ds = alpha_sigma_prime(kind, lam, dlam)
    f = 0.0 if kind == "ve" else float(da / alpha)
    g2 = float(2.0 * sigma * (ds - f * sigma))
    return ScheduleEval(float(t), float(lam), float(dlam), float(alpha),
                        float(sigma), f, g2)


def sample_training_time(dist: TimeDistribution, n: int, seed, interval=None):
    """Draw n training times from the proposal, rescaled into the interval."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    if dist.kind == "uniform":
        raw = u
    elif dist.kind == "power_law":
        # density (1+k)*(1-t)^k on (0,1) with k = 1/(1+rho)
        k = 1.0 / (1.0 + dist.rho)
        raw = 1.0 - u ** (1.0 / (k + 1.0))
    else:
        raw = u ** 4
    t0, t1 = interval if interval is not None else (DEFAULT_T0, DEFAULT_T1)
    return t0 + (t1 - t0) * raw


def inference_time_grid(sched: LogSnrSchedule, steps: int):
    """Strictly decreasing grid of steps+1 time points from t1 down to t0.

    Uniform spacing in t; for an edm_inference schedule this interpolates
    sigma_max -> sigma_min in the 1/rho power domain.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    return np.linspace(sched.t1, sched.t0, steps + 1)


def normalized_log_snr(sched: LogSnrSchedule, lam):
    """Affine rescale of lambda to [-1, 1] over [lambda(t1), lambda(t0)]."""
    lo, hi = sched.lambda_min, sched.lambda_max
    x = 2.0 * (np.asarray(lam, dtype=float) - lo) / (hi - lo) - 1.0
    return np.clip(x, -1.0, 1.0)


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
