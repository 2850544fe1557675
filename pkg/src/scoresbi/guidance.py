"""Inference-time score arithmetic.

Classifier-free guidance dials, soft-constraint guidance, compositional score
aggregation for unordered observations (no/complete pooling, with optional
mini-batching and error damping), and two-level hierarchical ancestral
sampling. All composition happens in the standardized model space; prior
scores are supplied analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .samplers import SamplerConfig, integrate_sde, langevin_anneal, sample_posterior
from .schedules import ConfigurationError
from .score_model import ScoreField

__all__ = [
    "GuidanceDials",
    "Constraint",
    "annulus",
    "box",
    "halfspace",
    "ConstraintSet",
    "cfg_combine",
    "constrain_score",
    "csm_score",
    "damped_minibatch_score",
    "CompositionSpec",
    "ComposedField",
    "HierarchicalSpec",
    "hierarchical_sample",
]


# ------------------------------------------------------------------ guidance


@dataclass(frozen=True)
class GuidanceDials:
    """Scales and shifts for prior/likelihood contributions.

    Unit scales and zero shifts reproduce the conditional score exactly.
    """

    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float | np.ndarray = 0.0
    beta2: float | np.ndarray = 0.0


def cfg_combine(model, z, x, t, dials: GuidanceDials):
    """alpha1 (s(z,null) + beta1) + alpha2 (s(z,x) - s(z,null) + beta2)."""
    if not getattr(model, "supports_null_condition", True):
        raise ConfigurationError(
            "model lacks null-condition support (train with condition masking)")
    s_uncond = model.score(z, None, t)
    s_cond = model.score(z, x, t)
    return (dials.alpha1 * (s_uncond + dials.beta1)
            + dials.alpha2 * (s_cond - s_uncond + dials.beta2))


# ------------------------------------------------------------------ constraints


@dataclass(frozen=True)
class Constraint:
    """Differentiable inequality c(z) <= 0 with analytic gradient."""

    name: str
    value: callable
    grad: callable


def halfspace(a, b):
    """a . z - b <= 0."""
    a = np.atleast_1d(np.asarray(a, dtype=float))

    def value(z):
        return np.atleast_2d(z) @ a - b

    def grad(z):
        return np.broadcast_to(a, np.atleast_2d(z).shape).copy()

    return [Constraint(f"halfspace", value, grad)]


def box(lo, hi):
    """lo <= z <= hi elementwise, as 2 D halfspace constraints."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    out = []
    for i in range(len(lo)):
        e = np.zeros(len(lo))
        e[i] = 1.0
        out += halfspace(e, hi[i])
        out += halfspace(-e, -lo[i])
    return out


def annulus(r_min, r_max):
    """r_min^2 <= ||z||^2 <= r_max^2."""

    def inner_value(z):
        return r_min ** 2 - np.sum(np.atleast_2d(z) ** 2, axis=1)

    def inner_grad(z):
        return -2.0 * np.atleast_2d(z)

    def outer_value(z):
        return np.sum(np.atleast_2d(z) ** 2, axis=1) - r_max ** 2

    def outer_grad(z):
        return 2.0 * np.atleast_2d(z)

    return [Constraint("annulus_inner", inner_value, inner_grad),
            Constraint("annulus_outer", outer_value, outer_grad)]


BUILTIN_CONSTRAINTS = {"annulus": annulus, "box": box, "halfspace": halfspace}


@dataclass
class ConstraintSet:
    """Constraints plus a strength schedule h(t) > 0 growing as t -> 0."""

    constraints: list
    strength: callable = None  # t -> h(t); default 1 / sigma_t via for_field

    @classmethod
    def for_field(cls, constraints, fld):
        return cls(constraints, strength=lambda t: 1.0 / float(
            fld.alpha_sigma_at(t)[1]))


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def constrain_score(base_score, z, t, cset: ConstraintSet):
    """Add the gradient of sum_k log sigmoid(-h(t) c_k(z)) to the score."""
    h = cset.strength(t) if cset.strength is not None else 1.0
    correction = np.zeros_like(np.atleast_2d(base_score), dtype=float)
    z = np.atleast_2d(z)
    for c in cset.constraints:
        val = c.value(z)
        g = c.grad(z)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for constraint {c.name}")
        correction -= (h * _sigmoid(h * val))[:, None] * g
    return base_score + correction


class ConstrainedField(ScoreField):
    """Score field with soft constraint guidance added."""

    def __init__(self, fld, cset: ConstraintSet):
        super().__init__(fld.schedule, fld.kind)
        self.inner = fld
        self.cset = cset

    def _score(self, z, x, t):
        return constrain_score(self.inner.score(z, x, t), z, t, self.cset)

    def sample_base(self, n, dim, rng):
        return self.inner.sample_base(n, dim, rng)

    def base_logpdf(self, z):
        return self.inner.base_logpdf(z)


# ------------------------------------------------------------------ composition


def csm_score(posterior_score, prior_score, observations, z_t, t):
    """(1-N)(1-t) prior_score(z) + sum_n posterior_score(z, y_n, t)."""
    n_obs = len(observations)
    if n_obs == 0:
        raise ConfigurationError("composition needs at least one observation")
    z_t = np.atleast_2d(z_t)
    total = (1.0 - n_obs) * (1.0 - t) * np.atleast_2d(prior_score(z_t))
    for y in observations:
        total = total + posterior_score(z_t, y, t)
    return total


@dataclass
class CompositionSpec:
    """Mini-batched, optionally damped score composition over N factors."""

    n_factors: int
    prior_score: callable
    damping: callable | float | None = None  # None: 1 (csm), float: constant
    minibatch: int | None = None             # None: all factors

    def __post_init__(self):
        m = self.minibatch or self.n_factors
        if not (1 <= m <= self.n_factors):
            raise ConfigurationError("need 1 <= minibatch <= n_factors")

    def damping_at(self, t):
        if self.damping is None:
            return 1.0
        if callable(self.damping):
            return float(self.damping(t))
        return float(self.damping)


def damped_minibatch_score(posterior_score, observations, z_t, t,
                           spec: CompositionSpec, rng):
    """d(t) [ (1-R)(1-t) prior_score + (R/M) sum over a fresh mini-batch ]."""
    r = spec.n_factors
    m = spec.minibatch or r
    z_t = np.atleast_2d(z_t)
    if m == r:
        picked = range(r)
    else:
        picked = rng.choice(r, size=m, replace=False)
    total = (1.0 - r) * (1.0 - t) * np.atleast_2d(spec.prior_score(z_t))
    acc = None
    for idx in picked:
        s = posterior_score(z_t, observations[idx], t)
        acc = s if acc is None else acc + s
    total = total + (r / m) * acc
    return spec.damping_at(t) * total


class ComposedField(ScoreField):
    """Compositional posterior score as a samplable field.

    The base draw shrinks with the effective number of factors: variance
    base_var_single / (N * d(t1)), which recovers the N(0, I/N) base of plain
    composition and N(0, I) under 1/N damping.
    """

    def __init__(self, model, observations, spec: CompositionSpec,
                 schedule=None, kind=None, seed=0):
        super().__init__(schedule or model.schedule, kind or model.kind)
        self.model = model
        self.observations = observations
        self.comp = spec
        self.rng = np.random.default_rng(seed)

    def _score(self, z, x, t):
        return damped_minibatch_score(
            lambda zz, y, tt: self.model.score(zz, y, tt),
            self.observations, z, t, self.comp, self.rng)

    def base_std(self):
        single = ScoreField.base_std(self)
        scale = self.comp.n_factors * self.comp.damping_at(self.schedule.t1)
        return float(single / np.sqrt(scale))


# ------------------------------------------------------------------ hierarchy


@dataclass
class HierarchicalSpec:
    """Two-level model: global posterior over eta, local posteriors given eta."""

    global_model: object          # score(eta, y_summary, t)
    local_model: object           # score(theta, [y_summary, eta], t)
    prior_score_global: callable  # analytic score of p(eta)
    eta_dim: int
    theta_dim: int
    damping: callable | float | None = None
    minibatch: int = 3


def hierarchical_sample(hspec: HierarchicalSpec, observations, cfg: SamplerConfig,
                        n_draws, seed, local_subjects=None):
    """Ancestral sampling: global CSM stage, then per-subject local stage.

    observations: per-subject conditioning vectors (summaries), length R.
    Returns (eta_draws [S, eta_dim], theta_draws [R', S, theta_dim]) where R'
    covers local_subjects (all subjects by default).
    """
    r_total = len(observations)
    ss = np.random.SeedSequence(seed).spawn(2 + r_total)
    comp = CompositionSpec(n_factors=r_total,
                           prior_score=hspec.prior_score_global,
                           damping=hspec.damping,
                           minibatch=min(hspec.minibatch, r_total))
    fld = ComposedField(hspec.global_model, observations, comp,
                        seed=ss[0].entropy)
    eta_draws, _ = sample_posterior(fld, None, n_draws, cfg,
                                    seed=ss[1].entropy, dim=hspec.eta_dim)
    subjects = range(r_total) if local_subjects is None else local_subjects
    theta_draws = []
    for j, r in enumerate(subjects):
        y = np.atleast_1d(np.asarray(observations[r], dtype=float))
        cond = np.concatenate(
            [np.broadcast_to(y, (n_draws, y.shape[-1])), eta_draws], axis=1)
        z0, _ = sample_posterior(hspec.local_model, cond, n_draws, cfg,
                                 seed=ss[2 + j].entropy, dim=hspec.theta_dim)
        theta_draws.append(z0)
    return eta_draws, np.asarray(theta_draws)
