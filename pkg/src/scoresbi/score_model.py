"""Evaluable score/velocity fields.

ScoreField is the protocol all samplers consume: a noise schedule, a variance
kind, and score/velocity evaluations (plus directional derivatives for density
work). Implementations here: ScoreNet (a trained residual MLP predicting any
of the five interchangeable quantities, or the probability-flow velocity for
flow matching) and analytic Gaussian fields used as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, NetworkSpec, ParameterBundle, build_network
from .objectives import convert_prediction
from .schedules import (
    ConfigurationError,
    LogSnrSchedule,
    alpha_sigma,
    alpha_sigma_prime,
    eval_log_snr,
    normalized_log_snr,
)

__all__ = ["ScoreField", "ScoreNet", "AnalyticGaussianField", "CallableField"]


class ScoreField:
    """Base for reverse-process fields; subclasses implement _score/_score_jvp."""

    schedule: LogSnrSchedule
    kind: str

    def __init__(self, schedule, kind):
        self.schedule = schedule
        self.kind = kind
        self.eval_count = 0  # network/score evaluations, for instrumentation

    # -- schedule helpers -------------------------------------------------

    def coeffs(self, t):
        lam, dlam = eval_log_snr(self.schedule, t)
        alpha, sigma, da, ds = alpha_sigma_prime(self.kind, lam, dlam)
        f = 0.0 * alpha if self.kind == "ve" else da / alpha
        g2 = 2.0 * sigma * (ds - f * sigma)
        return f, g2

    def alpha_sigma_at(self, t):
        lam, _ = eval_log_snr(self.schedule, t)
        return alpha_sigma(self.kind, lam)

    # -- base distribution at t1 ------------------------------------------

    def base_std(self):
        lam1, _ = eval_log_snr(self.schedule, self.schedule.t1)
        if self.kind == "ve":
            return float(np.exp(-0.5 * lam1))
        alpha, sigma = alpha_sigma(self.kind, lam1)
        return float(np.sqrt(alpha ** 2 + sigma ** 2))

    def sample_base(self, n, dim, rng):
        return self.base_std() * rng.standard_normal((n, dim))

    def base_logpdf(self, z):
        s = self.base_std()
        z = np.atleast_2d(z)
        d = z.shape[1]
        return (-0.5 * np.sum((z / s) ** 2, axis=1)
                - d * (0.5 * np.log(2.0 * np.pi) + np.log(s)))

    # -- field evaluations --------------------------------------------------

    def score(self, z, x, t):
        self.eval_count += 1
        return self._score(np.atleast_2d(z), x, float(t))

    def velocity(self, z, x, t):
        f, g2 = self.coeffs(t)
        return f * np.atleast_2d(z) - 0.5 * g2 * self.score(z, x, t)

    def score_jvp(self, z, x, t, u):
        """(score, d(score)/dz @ u); default falls back to central differences."""
        self.eval_count += 1
        return self._score_jvp(np.atleast_2d(z), x, float(t), np.atleast_2d(u))

    def velocity_jvp(self, z, x, t, u):
        f, g2 = self.coeffs(t)
        s, ju = self.score_jvp(z, x, t, u)
        v = f * np.atleast_2d(z) - 0.5 * g2 * s
        return v, f * np.atleast_2d(u) - 0.5 * g2 * ju

    def _score(self, z, x, t):
        raise NotImplementedError

    def _score_jvp(self, z, x, t, u, h=1e-5):
        sp = self._score(z + h * u, x, t)
        sm = self._score(z - h * u, x, t)
        return self._score(z, x, t), (sp - sm) / (2.0 * h)


class CallableField(ScoreField):
    """Wrap a plain function score_fn(z, x, t) as a field (tests, composition)."""

    def __init__(self, score_fn, schedule, kind, jvp_fn=None, base_std=None):
        super().__init__(schedule, kind)
        self._fn = score_fn
        self._jvp_fn = jvp_fn
        self._base_std = base_std

    def _score(self, z, x, t):
        return self._fn(z, x, t)

    def _score_jvp(self, z, x, t, u, h=1e-5):
        if self._jvp_fn is not None:
            return self._fn(z, x, t), self._jvp_fn(z, x, t, u)
        return super()._score_jvp(z, x, t, u, h)

    def base_std(self):
        if self._base_std is not None:
            return self._base_std
        return super().base_std()


class AnalyticGaussianField(ScoreField):
    """Time-marginal score of a Gaussian target N(mean, diag(var)).

    p_t(z) = N(alpha_t * mean, alpha_t^2 * var + sigma_t^2), so the score is
    -(z - alpha*mean) / (alpha^2 var + sigma^2) per dimension. Serves as the
    closed-form oracle for solver and density tests.
    """

    def __init__(self, mean, var, schedule, kind):
        super().__init__(schedule, kind)
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var = np.atleast_1d(np.asarray(var, dtype=float))

    def _marginal(self, t):
        alpha, sigma = self.alpha_sigma_at(t)
        return alpha * self.mean, alpha ** 2 * self.var + sigma ** 2

    def _score(self, z, x, t):
        m, v = self._marginal(t)
        return -(z - m) / v

    def _score_jvp(self, z, x, t, u, h=None):
        m, v = self._marginal(t)
        return -(z - m) / v, -u / v

    def sample_base(self, n, dim, rng):
        m, v = self._marginal(self.schedule.t1)
        return m + np.sqrt(v) * rng.standard_normal((n, len(self.mean)))

    def base_logpdf(self, z):
        m, v = self._marginal(self.schedule.t1)
        z = np.atleast_2d(z)
        return -0.5 * np.sum((z - m) ** 2 / v + np.log(2.0 * np.pi * v), axis=1)

    def logpdf(self, z):
        z = np.atleast_2d(z)
        return -0.5 * np.sum((z - self.mean) ** 2 / self.var
                             + np.log(2.0 * np.pi * self.var), axis=1)


class ScoreNet(ScoreField):
    """Conditional residual MLP posing as a score/velocity field.

    The network sees [z_t, condition, normalized log-SNR] and predicts the
    declared parameterization; evaluation converts to whatever a sampler asks
    for. Conditioning is normalized against the training schedule even when a
    different inference schedule drives sampling.
    """

    def __init__(self, target_dim, cond_dim, schedule, kind,
                 parameterization="edm_f", weighting="edm", objective="dsm",
                 sigma_target=1.0, p_uncond=0.0, depth=5, width=256,
                 dropout_rate=0.0, dtype="f64", seed=0, sample_schedule=None):
        super().__init__(sample_schedule or schedule, kind)
        if objective == "flow_matching":
            parameterization = "velocity_field"
        elif parameterization not in ("score", "noise", "target", "velocity",
                                      "edm_f"):
            raise ConfigurationError(
                f"unknown parameterization {parameterization!r}")
        self.train_schedule = schedule
        self.target_dim = target_dim
        self.cond_dim = cond_dim
        self.parameterization = parameterization
        self.weighting = weighting
        self.objective = objective
        self.sigma_target = sigma_target
        self.p_uncond = p_uncond
        self.spec = NetworkSpec(
            input_dim=target_dim, condition_dim=cond_dim + 1,
            output_dim=target_dim, depth=depth, width=width,
            dropout_rate=dropout_rate, dtype=dtype)
        self.net = MLP(self.spec)
        self.params = build_network(self.spec, seed)
        self.ema = None          # optional EmaState maintained by the trainer
        self.use_ema = False

    # -- conditioning -------------------------------------------------------

    @property
    def supports_null_condition(self):
        return self.p_uncond > 0.0 or self.cond_dim == 0

    def _features(self, z, x, lam):
        z = np.atleast_2d(z)
        lam_norm = np.broadcast_to(
            np.atleast_1d(normalized_log_snr(self.train_schedule, lam)),
            (z.shape[0],))
        if self.cond_dim == 0:
            cond = lam_norm[:, None]
        else:
            if x is None:
                xb = np.zeros((z.shape[0], self.cond_dim))
            else:
                xb = np.atleast_2d(np.asarray(x, dtype=float))
                if xb.shape[0] == 1 and z.shape[0] > 1:
                    xb = np.broadcast_to(xb, (z.shape[0], self.cond_dim))
            cond = np.concatenate([xb, lam_norm[:, None]], axis=1)
        return z, cond

    def eval_params(self):
        if self.use_ema and self.ema is not None and self.ema.averaged_params:
            return self.ema.averaged_params
        return self.params

    def predict(self, z, x, lam, params=None, dropout_rng=None):
        zz, cond = self._features(z, x, lam)
        return self.net.forward(params or self.eval_params(), zz, cond,
                                dropout_rng=dropout_rng)

    # -- training hook -------------------------------------------------------

    def loss_and_grads(self, batch, loss_head, dropout_rng=None):
        from .nn.network import forward_backward

        zz, cond = self._features(batch.z_t, batch.x, batch.lam)
        return forward_backward(self.spec, self.params, zz, cond, loss_head,
                                dropout_rng=dropout_rng)

    # -- field protocol -------------------------------------------------------

    def _convert_to_score(self, pred, z, t, lam, alpha, sigma):
        if self.parameterization == "velocity_field":
            f, g2 = self.coeffs(t)
            return 2.0 * (f * z - pred) / g2
        return convert_prediction(self.parameterization, "score", pred, z,
                                  alpha, sigma, lam, self.sigma_target)

    def _score(self, z, x, t):
        lam, _ = eval_log_snr(self.schedule, t)
        alpha, sigma = alpha_sigma(self.kind, lam)
        pred = self.predict(z, x, lam)
        return self._convert_to_score(pred, z, t, lam, alpha, sigma)

    def velocity(self, z, x, t):
        if self.parameterization == "velocity_field":
            self.eval_count += 1
            lam, _ = eval_log_snr(self.schedule, t)
            return self.predict(z, x, lam)
        return super().velocity(z, x, t)

    def _score_jvp(self, z, x, t, u, h=None):
        lam, _ = eval_log_snr(self.schedule, t)
        alpha, sigma = alpha_sigma(self.kind, lam)
        zz, cond = self._features(z, x, lam)
        pred, jpred = self.net.jvp(self.eval_params(), zz, cond, tangent=u)
        if self.parameterization == "velocity_field":
            f, g2 = self.coeffs(t)
            return 2.0 * (f * z - pred) / g2, 2.0 * (f * u - jpred) / g2
        score = convert_prediction(self.parameterization, "score", pred, z,
                                   alpha, sigma, lam, self.sigma_target)
        # conversions are affine in (prediction, z); propagate both parts
        p = self.parameterization
        if p == "score":
            js = jpred
        elif p == "noise":
            js = -jpred / sigma
        elif p == "target":
            js = -(u - alpha * jpred) / sigma ** 2
        elif p == "velocity":
            deps = (alpha * jpred + sigma * u) / (alpha ** 2 + sigma ** 2)
            js = -deps / sigma
        else:  # edm_f
            from .objectives import _edm_coeffs

            c1, c2 = _edm_coeffs(alpha, lam, self.sigma_target)
            deps = (c2 * u - jpred) / c1
            js = -deps / sigma
        return score, js

    def velocity_jvp(self, z, x, t, u):
        if self.parameterization == "velocity_field":
            self.eval_count += 1
            lam, _ = eval_log_snr(self.schedule, t)
            zz, cond = self._features(z, x, lam)
            return self.net.jvp(self.eval_params(), zz, cond, tangent=u)
        return super().velocity_jvp(z, x, t, u)

    def with_sample_schedule(self, schedule):
        """Same network, different inference-time schedule (EDM decoupling)."""
        import copy

        clone = copy.copy(self)
        clone.schedule = schedule
        return clone
