"""Training objectives: perturbation kernel, prediction conversions, losses.

The engine trains networks that may predict any of five interchangeable
quantities (score, noise, clean target, velocity, EDM-F). Losses are computed
by converting the prediction to the noise domain and weighting there, so the
declared weighting function is what controls the effective emphasis over
log-SNR levels regardless of parameterization. The flow-matching objective
regresses the probability-flow velocity field directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedules import (
    ConfigurationError,
    LogSnrSchedule,
    TimeDistribution,
    alpha_sigma,
    alpha_sigma_prime,
    eval_log_snr,
    sample_training_time,
)

__all__ = [
    "PARAMETERIZATIONS",
    "WEIGHTINGS",
    "TrainBatch",
    "perturb",
    "convert_prediction",
    "prediction_from_noise_jacobian",
    "equivalence_weight",
    "weighting_value",
    "noise_domain_loss_head",
    "flow_matching_loss_head",
    "training_loss",
    "mask_condition",
    "pseudo_huber",
]

PARAMETERIZATIONS = ("score", "noise", "target", "velocity", "edm_f")
WEIGHTINGS = ("unit", "likelihood", "edm", "sigmoid")


class SingularityError(ZeroDivisionError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainBatch:
    """Perturbed training tuples satisfying z_t = alpha*z0 + sigma*eps."""

    z0: np.ndarray            # [B, D]
    x: np.ndarray | None      # [B, C] or None
    t: np.ndarray             # [B]
    lam: np.ndarray           # [B]
    eps: np.ndarray           # [B, D]
    z_t: np.ndarray           # [B, D]
    alpha: np.ndarray         # [B]
    sigma: np.ndarray         # [B]


def perturb(z0, x, sched: LogSnrSchedule, kind: str,
            time_dist: TimeDistribution | None = None, seed=None,
            t=None, eps=None) -> TrainBatch:
    """Draw (t, eps) and form z_t = alpha_t z0 + sigma_t eps.

    t/eps may be supplied explicitly for deterministic tests.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    rng = np.random.default_rng(seed)
    if t is None:
        dist = time_dist or TimeDistribution("uniform")
        t = sample_training_time(dist, z0.shape[0], rng, (sched.t0, sched.t1))
    else:
        t = np.broadcast_to(np.asarray(t, dtype=float), (z0.shape[0],)).copy()
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    else:
        eps = np.broadcast_to(np.asarray(eps, dtype=float), z0.shape).copy()
    lam, _ = eval_log_snr(sched, t)
    alpha, sigma = alpha_sigma(kind, lam)
    z_t = alpha[:, None] * z0 + sigma[:, None] * eps
    return TrainBatch(z0=z0, x=x, t=t, lam=lam, eps=eps, z_t=z_t,
                      alpha=alpha, sigma=sigma)


# ------------------------------------------------------------- conversions


def _edm_coeffs(alpha, lam, sigma_target):
    e = np.exp(-lam)
    root = np.sqrt(e + sigma_target ** 2)
    c1 = root / sigma_target
    c2 = (np.exp(0.5 * lam) * (e + sigma_target ** 2 - sigma_target ** 2 * alpha ** 2)
          / (root * sigma_target * alpha))
    return c1, c2


def _to_noise(src, value, z_t, alpha, sigma, lam, sigma_target):
    if src == "noise":
        return value
    if src == "score":
        return -sigma * value
    if src == "target":
        return (z_t - alpha * value) / sigma
    if src == "velocity":
        return (alpha * value + sigma * z_t) / (alpha ** 2 + sigma ** 2)
    if src == "edm_f":
        _require_alpha(alpha, "edm_f")
        c1, c2 = _edm_coeffs(alpha, lam, sigma_target)
        return (c2 * z_t - value) / c1
    raise ConfigurationError(f"unknown parameterization {src!r}")


def _from_noise(dst, eps, z_t, alpha, sigma, lam, sigma_target):
    if dst == "noise":
        return eps
    if dst == "score":
        return -eps / sigma
    if dst == "target":
        _require_alpha(alpha, "target")
        return (z_t - sigma * eps) / alpha
    if dst == "velocity":
        _require_alpha(alpha, "velocity")
        return ((alpha ** 2 + sigma ** 2) * eps - sigma * z_t) / alpha
    if dst == "edm_f":
        _require_alpha(alpha, "edm_f")
        c1, c2 = _edm_coeffs(alpha, lam, sigma_target)
        return c2 * z_t - c1 * eps
    raise ConfigurationError(f"unknown parameterization {dst!r}")


def _require_alpha(alpha, name):
    if np.any(np.asarray(alpha) <= 0.0):
        raise SingularityError(f"{name} recovery requires alpha > 0")


def convert_prediction(src, dst, value, z_t, alpha, sigma, lam, sigma_target=1.0):
    """Convert a prediction between any two of the five parameterizations.

    All quantities broadcast; (alpha, sigma, lam) refer to the state z_t.
    Round trips are exact inverses (1e-10 in f64).
    """
    value = np.asarray(value, dtype=float)
    if src == dst:
        return value
    eps = _to_noise(src, value, z_t, alpha, sigma, lam, sigma_target)
    return _from_noise(dst, eps, z_t, alpha, sigma, lam, sigma_target)


def prediction_from_noise_jacobian(param, alpha, sigma, lam, sigma_target=1.0):
    """d(eps_hat)/d(prediction): the conversion to the noise domain is affine."""
    if param == "noise":
        return np.ones_like(np.asarray(sigma, dtype=float))
    if param == "score":
        return -sigma
    if param == "target":
        return -alpha / sigma
    if param == "velocity":
        return alpha / (alpha ** 2 + sigma ** 2)
    if param == "edm_f":
        c1, _ = _edm_coeffs(alpha, lam, sigma_target)
        return -1.0 / c1
    raise ConfigurationError(f"unknown parameterization {param!r}")


def equivalence_weight(param, alpha, sigma, lam, sigma_target=1.0):
    """Per-sample weight making the parameterized loss equal the noise loss."""
    if param == "score":
        return sigma ** 2
    if param == "noise":
        return np.ones_like(np.asarray(sigma, dtype=float))
    if param == "target":
        return np.exp(lam)
    if param == "velocity":
        return 1.0 / (alpha ** 2 * (np.exp(-lam) + 1.0) ** 2)
    if param == "edm_f":
        return 1.0 / (np.exp(-lam) / sigma_target ** 2 + 1.0)
    raise ConfigurationError(f"unknown parameterization {param!r}")


# ------------------------------------------------------------- weightings


def weighting_value(weighting, lam, dlam_dt=None, kind=None, sigma_target=1.0):
    """Evaluate the declared noise-domain weighting at log-SNR lambda.

    likelihood weighting is g(t)^2 / sigma_t^2; for vp/ve/flow_matching kinds
    this equals -dlambda/dt (sub_vp gets the explicit ratio).
    """
    lam = np.asarray(lam, dtype=float)
    if weighting == "unit":
        return np.ones_like(lam)
    if weighting == "edm":
        return 1.0 + np.exp(lam) / sigma_target ** 2
    if weighting == "sigmoid":
        return 1.0 / (1.0 + np.exp(lam - 2.0))
    if weighting == "likelihood":
        if dlam_dt is None:
            raise ConfigurationError("likelihood weighting needs dlambda/dt")
        if kind == "sub_vp":
            alpha, sigma, da, ds = alpha_sigma_prime(kind, lam, dlam_dt)
            f = da / alpha
            return 2.0 * sigma * (ds - f * sigma) / sigma ** 2
        return -np.asarray(dlam_dt, dtype=float)
    raise ConfigurationError(f"unknown weighting {weighting!r}")


# ------------------------------------------------------------- loss heads


def noise_domain_loss_head(batch: TrainBatch, param, weighting, sched, kind,
                           sigma_target=1.0):
    """Loss head for DSM: omega(lambda) * ||eps_hat - eps||^2, batch mean."""
    _, dlam = eval_log_snr(sched, batch.t)
    w = weighting_value(weighting, batch.lam, dlam, kind, sigma_target)
    a, s, lam = batch.alpha[:, None], batch.sigma[:, None], batch.lam[:, None]
    jac = prediction_from_noise_jacobian(param, a, s, lam, sigma_target)
    B = batch.z0.shape[0]

    def head(pred):
        eps_hat = _to_noise(param, pred, batch.z_t, a, s, lam, sigma_target)
        resid = eps_hat - batch.eps
        per_sample = np.sum(resid * resid, axis=1)
        loss = float(np.mean(w * per_sample))
        if not np.isfinite(loss):
            bad = batch.t[~np.isfinite(w * per_sample)]
            raise NumericError(f"non-finite loss at t={bad[:5]!r}")
        dpred = (2.0 / B) * w[:, None] * resid * jac
        return loss, dpred

    return head


def flow_matching_loss_head(batch: TrainBatch, weighting, sched, kind,
                            sigma_target=1.0):
    """Loss head regressing the probability-flow velocity alpha' z0 + sigma' eps."""
    _, dlam = eval_log_snr(sched, batch.t)
    _, _, da, ds = alpha_sigma_prime(kind, batch.lam, dlam)
    u_target = da[:, None] * batch.z0 + ds[:, None] * batch.eps
    w = weighting_value(weighting, batch.lam, dlam, kind, sigma_target)
    B = batch.z0.shape[0]

    def head(pred):
        resid = pred - u_target
        per_sample = np.sum(resid * resid, axis=1)
        loss = float(np.mean(w * per_sample))
        if not np.isfinite(loss):
            bad = batch.t[~np.isfinite(w * per_sample)]
            raise NumericError(f"non-finite loss at t={bad[:5]!r}")
        return loss, (2.0 / B) * w[:, None] * resid

    return head


def training_loss(model, batch: TrainBatch, parameterization=None,
                  weighting=None, objective=None, dropout_rng=None):
    """Loss and parameter gradients for a ScoreNet on one batch.

    Thin dispatcher kept here so the objective algebra lives in one module;
    `model` is a scoresbi.score_model.ScoreNet.
    """
    param = parameterization or model.parameterization
    w = weighting or model.weighting
    obj = objective or model.objective
    if obj == "dsm":
        head = noise_domain_loss_head(batch, param, w, model.schedule, model.kind,
                                      model.sigma_target)
    elif obj == "flow_matching":
        head = flow_matching_loss_head(batch, w, model.schedule, model.kind,
                                       model.sigma_target)
    else:
        raise ConfigurationError(f"unknown objective {obj!r}")
    return model.loss_and_grads(batch, head, dropout_rng=dropout_rng)


# ------------------------------------------------------------- masking


def mask_condition(x, p_uncond, seed, null_token=None):
    """Replace rows of x by the null token with probability p_uncond.

    Returns (masked_x, mask) where mask[b] is True for masked rows.
    """
    if not (0.0 <= p_uncond < 1.0 + 1e-12):
        raise ConfigurationError("p_uncond must lie in [0, 1)")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = np.random.default_rng(seed)
    mask = rng.random(x.shape[0]) < p_uncond
    out = x.copy()
    token = np.zeros(x.shape[1]) if null_token is None else np.asarray(null_token)
    out[mask] = token
    return out, mask


def pseudo_huber(a, b, c):
    """sqrt(||a-b||^2 + c^2) - c, batched over the first axis."""
    d2 = np.sum((a - b) ** 2, axis=-1)
    return np.sqrt(d2 + c * c) - c
