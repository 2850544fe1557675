"""Reverse-time integration of score fields.

Families: fixed and adaptive probability-flow ODE solvers (Euler, Dormand-
Prince RK45, TSIT5), reverse SDE solvers (Euler-Maruyama fixed/adaptive and an
Euler-Heun two-step adaptive scheme), annealed Langevin dynamics, predictor-
corrector, and consistency multistep. Log densities come from integrating the
probability flow together with its divergence.

Adaptive step-size controllers use h_new = h * 0.9 * (tol / err)^(1/5) (or the
order-matched exponent for the order-1 SDE pair), clipped to [0.2, 5] x h and
to step counts within [min_steps, max_steps].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .schedules import ConfigurationError

__all__ = [
    "SamplerConfig",
    "DensityEstimate",
    "DivergenceError",
    "integrate_ode",
    "integrate_sde",
    "langevin_anneal",
    "predictor_corrector",
    "consistency_multistep",
    "log_density",
    "sample_posterior",
]

ODE_FAMILIES = ("ode_euler", "ode_rk45", "ode_tsit5")
SDE_FAMILIES = ("sde_euler_maruyama", "sde_em_adaptive", "sde_two_step_adaptive")
ALL_FAMILIES = ODE_FAMILIES + SDE_FAMILIES + (
    "langevin", "predictor_corrector", "consistency_multistep")


class DivergenceError(FloatingPointError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class SamplerConfig:
    family: str = "sde_two_step_adaptive"
    steps: int = 500
    min_steps: int = 50
    max_steps: int = 1000
    ode_tol: float = 1e-6
    eps_abs: float = 0.02576   # 1% of the 99% central interval of a standard normal
    eps_rel: float = 0.1
    corrector_updates: int = 5
    langevin_step_multiplier: int = 4
    langevin_rate: float = 0.1
    record_trajectory: bool = False

    def __post_init__(self):
        if self.family not in ALL_FAMILIES:
            raise ConfigurationError(f"unknown sampler family {self.family!r}")
        if self.min_steps > self.max_steps:
            raise ConfigurationError("min_steps must be <= max_steps")
        if min(self.ode_tol, self.eps_abs, self.eps_rel) <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


@dataclass
class SampleInfo:
    """Bookkeeping for one integration run."""

    num_steps: int = 0
    num_rejected: int = 0
    nfev: int = 0
    divergence_fraction: float = 0.0
    trajectory: list = field(default_factory=list)

    def record(self, cfg, chain, step, t, z, accepted, h):
        if cfg.record_trajectory:
            self.trajectory.append((chain, step, t, z.copy(), accepted, h))


@dataclass
class DensityEstimate:
    log_density: np.ndarray
    divergence_integral: np.ndarray
    trace_mode: str


def _finalize(z, info):
    bad = ~np.all(np.isfinite(z), axis=1)
    info.divergence_fraction = float(np.mean(bad))
    return z, info


def _check_state(z, t):
    if not np.all(np.isfinite(z)):
        frac = 1.0 - float(np.mean(np.all(np.isfinite(z), axis=1)))
        if frac > 0.5:
            raise DivergenceError(f"{frac:.0%} of states non-finite at t={t:.4g}", t)


# ------------------------------------------------------------------ ODE

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200,
                  22 / 525, -1 / 40])

# Tsitouras 5(4) tableau (2011 coefficients)
_TS_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
_TS_A = [
    [],
    [0.161],
    [-0.008480655492356989, 0.335480655492357],
    [2.8971530571054935, -6.359448489975075, 4.3622954328695815],
    [5.325864828439257, -11.748883564062828, 7.4955393428898365,
     -0.09249506636175525],
    [5.86145544294642, -12.92096931784711, 8.159367898576159,
     -0.071584973281401, -0.028269050394068383],
    [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
     -3.290069515436081, 2.324710524099774],
]
_TS_B = np.array([0.09646076681806523, 0.01, 0.4798896504144996,
                  1.379008574103742, -3.290069515436081, 2.324710524099774, 0.0])
_TS_E = np.array([-0.00178001105222577714, -0.0008164344596567469,
                  0.007880878010261995, -0.1447110071732629,
                  0.5823571654525552, -0.45808210592918697,
                  0.015151515151515152])


def _rk_tableau(family):
    if family == "ode_rk45":
        return _DP_C, _DP_A, _DP_B, _DP_E
    return _TS_C, _TS_A, _TS_B, _TS_E


def integrate_ode(fn_or_field, z1, x, cfg: SamplerConfig, field_mode=True):
    """Integrate dz = v dt from t1 down to t0.

    fn_or_field is a ScoreField (velocity taken from the probability flow) or,
    with field_mode=False, a raw callable v(z, t) on [0, 1] used in tests.
    """
    if cfg.family not in ODE_FAMILIES:
        raise ConfigurationError(f"{cfg.family} is not an ODE family")
    if field_mode:
        fld = fn_or_field
        t1, t0 = fld.schedule.t1, fld.schedule.t0
        v = lambda z, t: fld.velocity(z, x, t)
    else:
        t1, t0 = 1.0, 0.0
        v = lambda z, t: fn_or_field(z, t)
    z = np.array(np.atleast_2d(z1), dtype=float)
    info = SampleInfo()
    if cfg.family == "ode_euler":
        grid = np.linspace(t1, t0, cfg.steps + 1)
        for i in range(cfg.steps):
            t, tn = grid[i], grid[i + 1]
            z = z + (tn - t) * v(z, t)
            info.nfev += 1
            info.num_steps += 1
            info.record(cfg, 0, i, tn, z, True, t - tn)
            _check_state(z, tn)
        return _finalize(z, info)
    return _adaptive_rk(v, z, t1, t0, cfg, info)


def _adaptive_rk(v, z, t1, t0, cfg, info):
    C, A, B, E = _rk_tableau(cfg.family)
    span = t1 - t0
    h_min, h_max = span / cfg.max_steps, span / cfg.min_steps
    h = span / cfg.steps
    h = min(max(h, h_min), h_max)
    t = t1
    budget = 8 * cfg.max_steps
    while t > t0 + 1e-14:
        h = min(h, t - t0)
        dt = -h  # integrating backwards in time
        k = []
        for i in range(7):
            zi = z
            for aij, kj in zip(A[i], k):
                zi = zi + dt * aij * kj
            k.append(v(zi, t + dt * C[i]))
            info.nfev += 1
        z5 = z + dt * sum(b * kj for b, kj in zip(B, k) if b != 0.0)
        err_vec = dt * sum(e * kj for e, kj in zip(E, k) if e != 0.0)
        err = float(np.max(np.sqrt(np.sum(err_vec ** 2, axis=1))))
        if not math.isfinite(err):
            raise DivergenceError(f"non-finite RK error estimate at t={t:.4g}", t)
        accept = err <= cfg.ode_tol or h <= h_min * (1 + 1e-12)
        factor = 0.9 * (cfg.ode_tol / (err + 1e-12)) ** 0.2
        h_new = h * min(5.0, max(0.2, factor))
        if accept:
            t = t - h
            z = z5
            info.num_steps += 1
            info.record(cfg, 0, info.num_steps, t, z, True, h)
            _check_state(z, t)
        else:
            info.num_rejected += 1
            info.record(cfg, 0, info.num_steps, t, z, False, h)
        h = min(max(h_new, h_min), h_max)
        if info.num_steps + info.num_rejected > budget:
            raise DivergenceError(
                f"step budget exhausted ({budget}) at t={t:.4g}", t)
    return _finalize(z, info)


# ------------------------------------------------------------------ SDE


def _reverse_drift(fld, z, x, t):
    f, g2 = fld.coeffs(t)
    return f * z - g2 * fld.score(z, x, t), g2


def integrate_sde(fld, z1, x, cfg: SamplerConfig, seed):
    """Reverse SDE from t1 to t0: Euler-Maruyama or adaptive variants."""
    if cfg.family not in SDE_FAMILIES:
        raise ConfigurationError(f"{cfg.family} is not an SDE family")
    rng = np.random.default_rng(seed)
    z = np.array(np.atleast_2d(z1), dtype=float)
    info = SampleInfo()
    t1, t0 = fld.schedule.t1, fld.schedule.t0
    if cfg.family == "sde_euler_maruyama":
        grid = np.linspace(t1, t0, cfg.steps + 1)
        for i in range(cfg.steps):
            t, tn = grid[i], grid[i + 1]
            z = _em_step(fld, z, x, t, t - tn, rng, info)
            info.record(cfg, 0, i, tn, z, True, t - tn)
            _check_state(z, tn)
        return _finalize(z, info)
    if cfg.family == "sde_em_adaptive":
        return _em_adaptive(fld, z, x, cfg, rng, info)
    return _two_step_adaptive(fld, z, x, cfg, rng, info)


def _em_step(fld, z, x, t, dt, rng, info):
    drift, g2 = _reverse_drift(fld, z, x, t)
    info.nfev += 1
    info.num_steps += 1
    noise = rng.standard_normal(z.shape)
    return z - drift * dt + math.sqrt(dt * max(float(g2), 0.0)) * noise


def _em_adaptive(fld, z, x, cfg, rng, info):
    """Step size proportional to max(1, |z|^2) / max(1, |v|^2).

    The proportionality constant is normalized on a pilot grid so the
    expected number of steps matches cfg.steps.
    """
    t1, t0 = fld.schedule.t1, fld.schedule.t0
    span = t1 - t0

    def ratio(z_, t_):
        v = fld.velocity(z_, x, t_)
        info.nfev += 1
        zn = np.median(np.maximum(1.0, np.sum(z_ ** 2, axis=1)))
        vn = np.median(np.maximum(1.0, np.sum(v ** 2, axis=1)))
        return zn / vn

    pilot_t = np.linspace(t1, t0, 33)
    inv = [1.0 / ratio(z, t_) for t_ in pilot_t]
    kappa = np.trapezoid(inv, -pilot_t) / cfg.steps
    h_min, h_max = span / cfg.max_steps, span / cfg.min_steps
    t = t1
    while t > t0 + 1e-14:
        h = min(max(kappa * ratio(z, t), h_min), h_max)
        h = min(h, t - t0)
        z = _em_step(fld, z, x, t, h, rng, info)
        t -= h
        info.record(cfg, 0, info.num_steps, t, z, True, h)
        _check_state(z, t)
        if info.num_steps > 8 * cfg.max_steps:
            raise DivergenceError("adaptive EM step budget exhausted", t)
    return _finalize(z, info)


def _two_step_adaptive(fld, z, x, cfg, rng, info):
    """Euler-Heun predictor-corrector with mixed-tolerance accept/reject.

    Local error is the discrepancy between the Euler and averaged-drift (Heun)
    updates sharing one Brownian increment; accepted when the normalized error
    is at most 1 under (eps_abs, eps_rel).
    """
    t1, t0 = fld.schedule.t1, fld.schedule.t0
    span = t1 - t0
    h_min, h_max = span / cfg.max_steps, span / cfg.min_steps
    h = span / cfg.steps
    h = min(max(h, h_min), h_max)
    t = t1
    budget = 8 * cfg.max_steps
    while t > t0 + 1e-14:
        h = min(h, t - t0)
        drift1, g2a = _reverse_drift(fld, z, x, t)
        info.nfev += 1
        eps = rng.standard_normal(z.shape)
        ga = math.sqrt(max(float(g2a), 0.0))
        z_euler = z - drift1 * h + math.sqrt(h) * ga * eps
        drift2, g2b = _reverse_drift(fld, z_euler, x, t - h)
        info.nfev += 1
        gb = math.sqrt(max(float(g2b), 0.0))
        # averaged drift and diffusion (Euler-Heun) sharing one increment
        z_heun = (z - 0.5 * (drift1 + drift2) * h
                  + math.sqrt(h) * 0.5 * (ga + gb) * eps)
        scale = np.maximum(cfg.eps_abs,
                           cfg.eps_rel * np.maximum(np.abs(z), np.abs(z_heun)))
        err = float(np.sqrt(np.mean(((z_heun - z_euler) / scale) ** 2)))
        if not math.isfinite(err):
            raise DivergenceError(f"non-finite SDE error estimate at t={t:.4g}", t)
        accept = err <= 1.0 or h <= h_min * (1 + 1e-12)
        if accept:
            t -= h
            z = z_heun
            info.num_steps += 1
            info.record(cfg, 0, info.num_steps, t, z, True, h)
            _check_state(z, t)
        else:
            info.num_rejected += 1
        # order-1 embedded pair: exponent 1/2
        h_new = h * min(5.0, max(0.2, 0.9 / math.sqrt(err + 1e-12)))
        h = min(max(h_new, h_min), h_max)
        if h < 1e-7:
            raise DivergenceError("two-step adaptive starved (h < 1e-7)", t)
        if info.num_steps + info.num_rejected > budget:
            raise DivergenceError("two-step adaptive step budget exhausted", t)
    return _finalize(z, info)


# ------------------------------------------------------------------ Langevin


def langevin_anneal(fld, z1, x, cfg: SamplerConfig, seed):
    """Annealed Langevin: z <- z + (eta/2) s + sqrt(eta) eps, eta = r sigma_t^2."""
    rng = np.random.default_rng(seed)
    z = np.array(np.atleast_2d(z1), dtype=float)
    info = SampleInfo()
    total = cfg.langevin_step_multiplier * cfg.steps
    grid = np.linspace(fld.schedule.t1, fld.schedule.t0, total)
    for i, t in enumerate(grid):
        _, sigma = fld.alpha_sigma_at(t)
        eta = cfg.langevin_rate * float(sigma) ** 2
        if eta > 0:
            z = (z + 0.5 * eta * fld.score(z, x, t)
                 + math.sqrt(eta) * rng.standard_normal(z.shape))
            info.nfev += 1
        info.num_steps += 1
        info.record(cfg, 0, i, t, z, True, 0.0)
        _check_state(z, t)
    return _finalize(z, info)


def predictor_corrector(fld, z1, x, cfg: SamplerConfig, seed):
    """Euler-Maruyama predictor with annealed-Langevin corrector updates."""
    if cfg.corrector_updates < 1:
        raise ConfigurationError("corrector_updates must be >= 1")
    rng = np.random.default_rng(seed)
    z = np.array(np.atleast_2d(z1), dtype=float)
    info = SampleInfo()
    grid = np.linspace(fld.schedule.t1, fld.schedule.t0, cfg.steps + 1)
    for i in range(cfg.steps):
        t, tn = grid[i], grid[i + 1]
        z = _em_step(fld, z, x, t, t - tn, rng, info)
        _, sigma = fld.alpha_sigma_at(tn)
        eta = cfg.langevin_rate * float(sigma) ** 2
        for _ in range(cfg.corrector_updates):
            if eta > 0:
                z = (z + 0.5 * eta * fld.score(z, x, tn)
                     + math.sqrt(eta) * rng.standard_normal(z.shape))
                info.nfev += 1
        info.record(cfg, 0, i, tn, z, True, t - tn)
        _check_state(z, tn)
    return _finalize(z, info)


# ------------------------------------------------------------------ consistency


def consistency_multistep(model, z1, x, tau_grid=None, seed=0):
    """Few-step consistency sampling over a decreasing tau grid (1 -> 0)."""
    tau_grid = np.asarray(tau_grid if tau_grid is not None
                          else np.linspace(1.0, 0.0, 10), dtype=float)
    if tau_grid[0] != 1.0 or np.any(np.diff(tau_grid) >= 0):
        raise ConfigurationError("tau grid must decrease from 1")
    rng = np.random.default_rng(seed)
    z0_hat = model.consistency(z1, x, tau_grid[0])
    for tau in tau_grid[1:]:
        alpha, sigma = model.alpha_sigma_at(tau)
        z = alpha * z0_hat + sigma * rng.standard_normal(z0_hat.shape)
        z0_hat = model.consistency(z, x, tau)
    return z0_hat


# ------------------------------------------------------------------ density


def log_density(fld, z0, x, cfg: SamplerConfig = None, trace_mode="exact_jacobian",
                n_probes=8, seed=0):
    """Probability-flow log density via the instantaneous change of variables.

    Integrates [z, div] from t0 up to t1 with the adaptive RK45 pair;
    log p(z0) = log p1(z1) + integral of div v dt. Exact mode computes the
    Jacobian trace from D directional derivatives (D <= 64); hutchinson mode
    uses Rademacher probes.
    """
    cfg = cfg or SamplerConfig(family="ode_rk45")
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    n, d = z0.shape
    if trace_mode == "exact_jacobian" and d > 64:
        raise ConfigurationError("exact trace limited to D <= 64")
    if trace_mode == "hutchinson":
        rng = np.random.default_rng(seed)
        probes = rng.integers(0, 2, size=(n_probes, n, d)) * 2.0 - 1.0
    eye = np.eye(d)

    def div(z, t):
        if trace_mode == "exact_jacobian":
            total = np.zeros(n)
            for i in range(d):
                u = np.broadcast_to(eye[i], (n, d))
                _, ju = fld.velocity_jvp(z, x, t, u)
                total += ju[:, i]
            return total
        total = np.zeros(n)
        for p in probes:
            _, ju = fld.velocity_jvp(z, x, t, p)
            total += np.sum(p * ju, axis=1)
        return total / len(probes)

    # augmented RK45 over increasing time
    C, A, B, E = _rk_tableau("ode_rk45")
    t0, t1 = fld.schedule.t0, fld.schedule.t1
    span = t1 - t0
    h_min, h_max = span / cfg.max_steps, span / cfg.min_steps
    h = span / cfg.steps
    h = min(max(h, h_min), h_max)
    z = z0.copy()
    ell = np.zeros(n)
    t = t0
    guard = 0
    while t < t1 - 1e-14:
        h = min(h, t1 - t)
        kz, kl = [], []
        for i in range(7):
            zi = z
            li = ell
            for aij, kzj, klj in zip(A[i], kz, kl):
                zi = zi + h * aij * kzj
                li = li + h * aij * klj
            ti = t + h * C[i]
            kz.append(fld.velocity(zi, x, ti))
            kl.append(div(zi, ti))
        z5 = z + h * sum(b * k for b, k in zip(B, kz) if b != 0.0)
        l5 = ell + h * sum(b * k for b, k in zip(B, kl) if b != 0.0)
        errz = h * sum(e * k for e, k in zip(E, kz) if e != 0.0)
        errl = h * sum(e * k for e, k in zip(E, kl) if e != 0.0)
        err = float(max(np.max(np.sqrt(np.sum(errz ** 2, axis=1))),
                        np.max(np.abs(errl))))
        if not math.isfinite(err):
            raise DivergenceError(f"non-finite density error estimate at t={t:.4g}", t)
        if err <= cfg.ode_tol or h <= h_min * (1 + 1e-12):
            t = t + h
            z, ell = z5, l5
        factor = 0.9 * (cfg.ode_tol / (err + 1e-12)) ** 0.2
        h = min(max(h * min(5.0, max(0.2, factor)), h_min), h_max)
        guard += 1
        if guard > 8 * cfg.max_steps:
            raise DivergenceError("density integration budget exhausted", t)
    logp = fld.base_logpdf(z) + ell
    return DensityEstimate(log_density=logp, divergence_integral=ell,
                           trace_mode=trace_mode), z


# ------------------------------------------------------------------ front door


def sample_posterior(fld, x, n_draws, cfg: SamplerConfig, seed, dim=None):
    """Draw from the field's base distribution and run the configured family."""
    rng = np.random.default_rng(seed)
    dim = dim if dim is not None else getattr(fld, "target_dim", None)
    if dim is None:
        dim = len(fld.mean)  # analytic fields
    z1 = fld.sample_base(n_draws, dim, rng)
    family = cfg.family
    sub_seed = rng.integers(2 ** 63)
    if family in ODE_FAMILIES:
        return integrate_ode(fld, z1, x, cfg)
    if family in SDE_FAMILIES:
        return integrate_sde(fld, z1, x, cfg, sub_seed)
    if family == "langevin":
        return langevin_anneal(fld, z1, x, cfg, sub_seed)
    if family == "predictor_corrector":
        return predictor_corrector(fld, z1, x, cfg, sub_seed)
    if family == "consistency_multistep":
        z0 = consistency_multistep(fld, z1, x, seed=sub_seed)
        info = SampleInfo()
        return _finalize(z0, info)
    raise ConfigurationError(f"unknown family {family!r}")
