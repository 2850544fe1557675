"""Schedule algebra: closed forms, finite-difference consistency, monotonicity."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from scoresbi.schedules import (
    VARIANCE_KINDS,
    ConfigurationError,
    DomainError,
    LogSnrSchedule,
    TimeDistribution,
    alpha_sigma,
    drift_diffusion,
    eval_log_snr,
    inference_time_grid,
    normalized_log_snr,
    sample_training_time,
)

ALL_SCHEDULES = [
    LogSnrSchedule("linear"),
    LogSnrSchedule("cosine"),
    LogSnrSchedule("edm_training"),
    LogSnrSchedule("edm_inference", sigma_min=1e-4),
    LogSnrSchedule("flow_matching"),
]


def pairs_in_scope():
    out = []
    for sched in ALL_SCHEDULES:
        if sched.kind == "flow_matching":
            out.append((sched, "flow_matching"))
        else:
            out.extend((sched, k) for k in ("vp", "ve", "sub_vp"))
    return out


def test_cosine_log_snr_zero_at_half():
    lam, _ = eval_log_snr(LogSnrSchedule("cosine"), 0.5)
    assert abs(lam) < 1e-12


def test_linear_log_snr_at_half():
    # -log(exp(0.25) - 1), frozen from a 30-digit evaluation
    lam, _ = eval_log_snr(LogSnrSchedule("linear"), 0.5)
    assert lam == pytest.approx(1.25869154944603213, rel=1e-12)


def test_edm_inference_endpoints():
    sched = LogSnrSchedule("edm_inference", rho=7, sigma_min=0.002, sigma_max=80,
                           t0=0.0, t1=1.0)
    lam1, _ = eval_log_snr(sched, 1.0)
    lam0, _ = eval_log_snr(sched, 0.0)
    assert lam1 == pytest.approx(-8.764053269347763, rel=1e-12)
    assert lam0 == pytest.approx(12.429216196844383, rel=1e-12)


def test_time_outside_truncation_raises():
    sched = LogSnrSchedule("cosine")
    with pytest.raises(DomainError):
        eval_log_snr(sched, -0.01)
    with pytest.raises(DomainError):
        eval_log_snr(sched, 1.0)


@pytest.mark.parametrize("sched", ALL_SCHEDULES, ids=lambda s: s.kind)
def test_log_snr_strictly_decreasing(sched):
    t = np.linspace(sched.t0, sched.t1, 1000)
    lam, dlam = eval_log_snr(sched, t)
    assert np.all(np.diff(lam) < 0)
    assert np.all(np.isfinite(lam))
    assert np.all(dlam < 0)


@pytest.mark.parametrize("sched", ALL_SCHEDULES, ids=lambda s: s.kind)
def test_dlam_matches_finite_difference(sched):
    t = np.linspace(sched.t0 + 1e-3, sched.t1 - 1e-3, 57)
    _, dlam = eval_log_snr(sched, t)
    h = 1e-6
    fd = (eval_log_snr(sched, t + h)[0] - eval_log_snr(sched, t - h)[0]) / (2 * h)
    assert np.max(np.abs(dlam - fd) / (np.abs(fd) + 1e-12)) < 1e-4


def test_alpha_sigma_vp_at_zero():
    a, s = alpha_sigma("vp", 0.0)
    assert a == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert s == pytest.approx(np.sqrt(0.5), abs=1e-15)


def test_alpha_sigma_ve_at_zero():
    a, s = alpha_sigma("ve", 0.0)
    assert a == 1.0 and s == 1.0


def test_alpha_sigma_vp_high_snr_asymptote():
    a, s = alpha_sigma("vp", 40.0)
    assert s < 1e-8
    assert abs(a - 1.0) < 1e-8


@given(lam=st.floats(-60, 60))
@settings(max_examples=200, deadline=None)
def test_log_snr_identity_all_kinds(lam):
    for kind in VARIANCE_KINDS:
        a, s = alpha_sigma(kind, lam)
        assert abs(2 * np.log(a / s) - lam) < 1e-10


@given(lam=st.floats(-60, 60))
@settings(max_examples=200, deadline=None)
def test_variance_kind_invariants(lam):
    a, s = alpha_sigma("vp", lam)
    assert abs(a * a + s * s - 1.0) < 1e-14
    a, s = alpha_sigma("ve", lam)
    assert a == 1.0
    a, s = alpha_sigma("sub_vp", lam)
    assert abs(a * a + s - 1.0) < 1e-14  # alpha = sqrt(1 - sigma)
    assert a * a + s * s <= 1.0 + 1e-14
    a, s = alpha_sigma("flow_matching", lam)
    assert abs(a + s - 1.0) < 1e-14


def test_vp_linear_matches_paper_sde():
    # the vp-linear forward process is dz = -t z dt + sqrt(2 t) dW
    sched = LogSnrSchedule("linear")
    for t in np.linspace(0.05, 0.95, 10):
        f, g2 = drift_diffusion("vp", sched, t)
        assert f == pytest.approx(-t, rel=1e-10)
        assert g2 == pytest.approx(2 * t, rel=1e-10)
    f, g2 = drift_diffusion("vp", sched, 0.3)
    assert f == pytest.approx(-0.3, rel=1e-10)
    assert g2 == pytest.approx(0.6, rel=1e-10)


def test_ve_zero_drift():
    for sched in ALL_SCHEDULES:
        if sched.kind == "flow_matching":
            continue
        f, _ = drift_diffusion("ve", sched, np.linspace(sched.t0, sched.t1, 7))
        assert np.all(f == 0.0)


@pytest.mark.parametrize("sched,kind", pairs_in_scope(),
                         ids=lambda p: p if isinstance(p, str) else p.kind)
def test_drift_diffusion_finite_difference_consistency(sched, kind):
    # f = alpha'/alpha, g^2 = 2 sigma (sigma' - f sigma) against central
    # differences of (alpha, sigma) over interior grid points
    t = np.linspace(sched.t0, sched.t1, 101)[1:-1]
    f, g2 = drift_diffusion(kind, sched, t)
    h = 1e-6
    ap, sp_ = alpha_sigma(kind, eval_log_snr(sched, t + h)[0])
    am, sm = alpha_sigma(kind, eval_log_snr(sched, t - h)[0])
    a, s = alpha_sigma(kind, eval_log_snr(sched, t)[0])
    da = (ap - am) / (2 * h)
    ds = (sp_ - sm) / (2 * h)
    f_fd = da / a
    g2_fd = 2 * s * (ds - f_fd * s)
    assert np.max(np.abs(f - f_fd) / (np.abs(f_fd) + 1e-8)) < 1e-4
    assert np.max(np.abs(g2 - g2_fd) / (np.abs(g2_fd) + 1e-8)) < 1e-4
    assert np.all(g2 >= 0)


def test_uniform_time_sampling_mean():
    t = sample_training_time(TimeDistribution("uniform"), 100_000, seed=0,
                             interval=(0.0, 1.0))
    assert abs(t.mean() - 0.5) < 0.005


def test_power_law_mean_and_ks():
    dist = TimeDistribution("power_law", rho=-0.6)
    t = sample_training_time(dist, 100_000, seed=1, interval=(0.0, 1.0))
    # density (1-t)^2.5 => t ~ 1 - Beta(3.5, 1), mean 1 - 3.5/4.5
    assert abs(t.mean() - 0.2222222222222222) < 0.005
    assert stats.kstest(t, dist.cdf).statistic < 0.02


def test_quartic_root_median():
    dist = TimeDistribution("quartic_root")
    t = sample_training_time(dist, 100_000, seed=2, interval=(0.0, 1.0))
    assert abs(np.mean(t <= 0.0625) - 0.5) < 0.01
    assert stats.kstest(t, dist.cdf).statistic < 0.02


def test_power_law_invalid_rho():
    with pytest.raises(ConfigurationError):
        TimeDistribution("power_law", rho=-1.0)


def test_inference_grid_single_step():
    sched = LogSnrSchedule("cosine")
    grid = inference_time_grid(sched, 1)
    assert grid.tolist() == [sched.t1, sched.t0]


def test_inference_grid_uniform_spacing():
    sched = LogSnrSchedule("cosine")
    grid = inference_time_grid(sched, 500)
    spacing = -np.diff(grid)
    assert np.all(np.abs(spacing - (sched.t1 - sched.t0) / 500) < 1e-12)
    assert np.all(np.diff(grid) < 0)


def test_edm_inference_grid_interpolates_sigma_power_domain():
    sched = LogSnrSchedule("edm_inference", rho=7, sigma_min=0.002, sigma_max=80,
                           t0=0.0, t1=1.0)
    grid = inference_time_grid(sched, 10)
    lam, _ = eval_log_snr(sched, grid)
    _, sigma = alpha_sigma("ve", lam)
    r = 1.0 / sched.rho
    expected = (sched.sigma_max ** r
                + (1 - grid) * (sched.sigma_min ** r - sched.sigma_max ** r)) ** sched.rho
    assert np.allclose(sigma, expected, rtol=1e-10)


def test_normalized_log_snr_range():
    sched = LogSnrSchedule("edm_training")
    t = np.linspace(sched.t0, sched.t1, 101)
    lam, _ = eval_log_snr(sched, t)
    x = normalized_log_snr(sched, lam)
    assert x.min() == -1.0 and x.max() == 1.0
    assert np.all(np.diff(x) <= 0)
