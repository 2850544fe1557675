"""Network stack: init statistics, gradient checks, optimizers, EMA, deep sets."""

import numpy as np
import pytest

from scoresbi.nn import (
    DeepSet,
    DeepSetSpec,
    EmaState,
    MLP,
    NetworkSpec,
    OptimizerState,
    build_network,
    ema_update,
    forward_backward,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from scoresbi.nn.network import ConfigurationError, NumericError


def squared_loss(target):
    def head(pred):
        diff = pred - target
        return float(np.sum(diff * diff)), 2.0 * diff
    return head


# ---------------------------------------------------------------- build


def test_he_normal_variance():
    spec = NetworkSpec(input_dim=256, output_dim=4, depth=5, width=256)
    params = build_network(spec, seed=0)
    for name, arr in params.items():
        if not name.endswith("/W"):
            assert np.all(arr == 0.0)
            continue
        fan_in = arr.shape[0]
        assert np.var(arr) == pytest.approx(2.0 / fan_in, rel=0.2)


def test_build_deterministic():
    spec = NetworkSpec(input_dim=3, output_dim=2, depth=3, width=16)
    a = build_network(spec, seed=42)
    b = build_network(spec, seed=42)
    for k in a.keys():
        assert np.array_equal(a[k], b[k])


def test_zero_depth_rejected():
    with pytest.raises(ConfigurationError):
        NetworkSpec(input_dim=3, output_dim=2, depth=0)


# ---------------------------------------------------------------- gradients


def test_linear_one_layer_hand_gradient():
    # one "layer" of depth 1 with linear head: residualless tiny net reduces to
    # out = mish(x W0) Wout; instead check the output head on a fixed hidden path
    spec = NetworkSpec(input_dim=1, output_dim=1, depth=1, width=1, residual=False)
    params = build_network(spec, seed=1)
    x = np.array([[0.7]])
    y_target = np.array([[0.3]])
    loss, grads = forward_backward(spec, params, x, None, squared_loss(y_target))
    # finite-difference on the output weight
    h = 1e-6
    net = MLP(spec)

    def loss_at(w):
        p = params.copy()
        p["out/W"] = np.array([[w]])
        pred = net.forward(p, x)
        return float(np.sum((pred - y_target) ** 2))

    w0 = params["out/W"][0, 0]
    fd = (loss_at(w0 + h) - loss_at(w0 - h)) / (2 * h)
    assert grads["out/W"][0, 0] == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("residual", [True, False])
@pytest.mark.parametrize("condition_dim", [0, 3])
def test_gradcheck_against_central_differences(residual, condition_dim):
    rng = np.random.default_rng(7)
    spec = NetworkSpec(input_dim=4, condition_dim=condition_dim, output_dim=2,
                       depth=3, width=8, residual=residual)
    params = build_network(spec, seed=3)
    x = rng.standard_normal((5, 4))
    cond = rng.standard_normal((5, condition_dim)) if condition_dim else None
    target = rng.standard_normal((5, 2))
    loss, grads = forward_backward(spec, params, x, cond, squared_loss(target))
    net = MLP(spec)

    h = 1e-5
    probe_rng = np.random.default_rng(11)
    names = list(params.keys())
    for _ in range(20):
        name = names[probe_rng.integers(len(names))]
        flat_idx = probe_rng.integers(params[name].size)
        idx = np.unravel_index(flat_idx, params[name].shape)
        p = params.copy()
        p[name][idx] += h
        up = float(np.sum((net.forward(p, x, cond) - target) ** 2))
        p[name][idx] -= 2 * h
        dn = float(np.sum((net.forward(p, x, cond) - target) ** 2))
        fd = (up - dn) / (2 * h)
        rel = abs(grads[name][idx] - fd) / (abs(fd) + 1e-8)
        assert rel < 1e-4, f"{name}[{idx}]: analytic {grads[name][idx]} vs fd {fd}"


def test_zero_input_zero_gradient_for_first_weights():
    spec = NetworkSpec(input_dim=3, output_dim=2, depth=2, width=8, residual=False)
    params = build_network(spec, seed=5)
    x = np.zeros((4, 3))
    target = np.ones((4, 2))
    _, grads = forward_backward(spec, params, x, None, squared_loss(target))
    # first-layer weights multiply zeros, so their gradient vanishes
    assert np.allclose(grads["layer0/W"], 0.0)


def test_input_gradient_matches_fd():
    spec = NetworkSpec(input_dim=3, output_dim=2, depth=3, width=8)
    params = build_network(spec, seed=9)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3))
    target = rng.standard_normal((2, 2))
    _, _, dx, _ = forward_backward(spec, params, x, None, squared_loss(target),
                                   want_input_grad=True)
    net = MLP(spec)
    h = 1e-5
    for b in range(2):
        for j in range(3):
            xp = x.copy(); xp[b, j] += h
            xm = x.copy(); xm[b, j] -= h
            fd = (np.sum((net.forward(params, xp) - target) ** 2)
                  - np.sum((net.forward(params, xm) - target) ** 2)) / (2 * h)
            assert dx[b, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_jvp_matches_finite_difference():
    spec = NetworkSpec(input_dim=3, output_dim=3, depth=3, width=8)
    params = build_network(spec, seed=13)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    u = rng.standard_normal((4, 3))
    net = MLP(spec)
    y, uy = net.jvp(params, x, tangent=u)
    h = 1e-6
    fd = (net.forward(params, x + h * u) - net.forward(params, x - h * u)) / (2 * h)
    assert np.allclose(uy, fd, rtol=1e-5, atol=1e-7)
    assert np.allclose(y, net.forward(params, x))


def test_dropout_deterministic_given_seed_and_nonfinite_detection():
    spec = NetworkSpec(input_dim=3, output_dim=2, depth=3, width=16,
                       dropout_rate=0.5)
    params = build_network(spec, seed=21)
    x = np.random.default_rng(2).standard_normal((6, 3))
    net = MLP(spec)
    y1 = net.forward(params, x, dropout_rng=np.random.default_rng(77))
    y2 = net.forward(params, x, dropout_rng=np.random.default_rng(77))
    assert np.array_equal(y1, y2)
    y3 = net.forward(params, x)  # inference: identity, no dropout
    assert not np.array_equal(y1, y3)

    params["layer1/W"][0, 0] = np.inf
    with pytest.raises(NumericError) as err:
        forward_backward(spec, params, x, None, squared_loss(np.zeros((6, 2))))
    assert err.value.layer_index == 1


# ---------------------------------------------------------------- optimizer


def _tiny_params():
    spec = NetworkSpec(input_dim=2, output_dim=1, depth=1, width=4)
    return spec, build_network(spec, seed=0)


def test_adam_zero_gradient_no_change():
    spec, params = _tiny_params()
    before = params.copy()
    opt = OptimizerState(kind="adam", base_lr=1e-3, total_steps=10)
    optimizer_step(opt, params, params.zeros_like())
    for k in params.keys():
        assert np.array_equal(params[k], before[k])


def test_adamw_zero_gradient_decays_weights():
    spec, params = _tiny_params()
    before = params.copy()
    opt = OptimizerState(kind="adamw", base_lr=1e-3, total_steps=10,
                         weight_decay=0.01)
    lr0 = opt.current_lr()
    optimizer_step(opt, params, params.zeros_like())
    for k in params.keys():
        assert np.allclose(params[k], before[k] * (1.0 - lr0 * 0.01))


def test_cosine_lr_endpoint_zero():
    opt = OptimizerState(kind="adam", base_lr=5e-4, total_steps=100)
    opt.step_index = 100
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-18)
    opt.step_index = 0
    assert opt.current_lr() == pytest.approx(5e-4)


def test_nonfinite_grads_rejected():
    spec, params = _tiny_params()
    grads = params.zeros_like()
    grads["out/b"][0] = np.nan
    with pytest.raises(NumericError):
        optimizer_step(OptimizerState(), params, grads)


# ---------------------------------------------------------------- EMA


def test_ema_first_update_copies_params():
    _, params = _tiny_params()
    ema = ema_update(EmaState(gamma=6.94), params)
    for k in params.keys():
        assert np.array_equal(ema.averaged_params[k], params[k])


def test_ema_beta_value():
    ema = EmaState(gamma=6.94)
    # (0.99)^7.94, frozen from a 30-digit evaluation
    assert ema.beta(100) == pytest.approx(0.9233012958771608, rel=1e-12)


def test_ema_beta_nondecreasing_and_converges_on_constant_stream():
    ema = EmaState(gamma=6.94)
    betas = [ema.beta(i) for i in range(1, 200)]
    assert betas[0] == 0.0
    assert np.all(np.diff(betas) >= 0)
    _, params = _tiny_params()
    for _ in range(50):
        ema = ema_update(ema, params)
    for k in params.keys():
        assert np.allclose(ema.averaged_params[k], params[k], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- deep sets


def _deepset():
    enc = NetworkSpec(input_dim=2, output_dim=8, depth=2, width=8)
    dec = NetworkSpec(input_dim=8, output_dim=3, depth=2, width=8)
    spec = DeepSetSpec(encoder=enc, decoder=dec)
    ds = DeepSet(spec)
    return ds, ds.init(seed=0)


def test_deepset_permutation_invariance():
    ds, params = _deepset()
    rng = np.random.default_rng(3)
    batch = rng.standard_normal((4, 30, 2))
    out = ds.forward(params, batch)
    perm = rng.permutation(30)
    out_p = ds.forward(params, batch[:, perm, :])
    rel = np.linalg.norm(out - out_p) / np.linalg.norm(out)
    assert rel < 1e-6


def test_deepset_repeated_elements():
    ds, params = _deepset()
    element = np.random.default_rng(4).standard_normal((1, 1, 2))
    outs = [ds.forward(params, np.repeat(element, k, axis=1)) for k in (1, 3, 7)]
    for o in outs[1:]:
        assert np.allclose(o, outs[0], atol=1e-10)


def test_deepset_mean_identity():
    # encoder = identity, decoder = identity via linear nets with identity weights
    enc = NetworkSpec(input_dim=2, output_dim=2, depth=1, width=2, residual=False)
    dec = NetworkSpec(input_dim=2, output_dim=2, depth=1, width=2, residual=False)
    ds = DeepSet(DeepSetSpec(encoder=enc, decoder=dec))
    params = ds.init(seed=0)
    # bypass the MLP: directly check pooling by linearizing the nets is hard, so
    # instead check invariance of the pooled pre-summary: identical outputs when
    # the set mean matches elementwise
    rng = np.random.default_rng(5)
    a = rng.standard_normal((1, 4, 2))
    b = np.repeat(a.mean(axis=1, keepdims=True), 4, axis=1)
    oa = ds.forward(params, a)
    ob = ds.forward(params, b)
    # mish is nonlinear, so means differ; this asserts only shape and finiteness
    assert oa.shape == ob.shape == (1, 2)
    assert np.all(np.isfinite(oa))


def test_deepset_empty_set_rejected():
    ds, params = _deepset()
    with pytest.raises(Exception):
        ds.forward(params, np.zeros((2, 0, 2)))


def test_deepset_gradcheck():
    ds, params = _deepset()
    rng = np.random.default_rng(6)
    batch = rng.standard_normal((3, 5, 2))
    target = rng.standard_normal((3, 3))
    out, cache = ds.forward(params, batch, return_cache=True)
    grads = ds.backward(params, cache, 2.0 * (out - target))
    h = 1e-5
    probe = np.random.default_rng(8)
    names = list(params.keys())
    for _ in range(12):
        name = names[probe.integers(len(names))]
        idx = np.unravel_index(probe.integers(params[name].size),
                               params[name].shape)
        p = params.copy()
        p[name][idx] += h
        up = float(np.sum((ds.forward(p, batch) - target) ** 2))
        p[name][idx] -= 2 * h
        dn = float(np.sum((ds.forward(p, batch) - target) ** 2))
        fd = (up - dn) / (2 * h)
        assert abs(grads[name][idx] - fd) / (abs(fd) + 1e-8) < 1e-4


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = NetworkSpec(input_dim=3, output_dim=2, depth=3, width=16)
    params = build_network(spec, seed=31)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, meta={"note": "unit"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "unit"}
    assert list(loaded.keys()) == list(params.keys())
    for k in params.keys():
        assert loaded[k].dtype == params[k].dtype
        assert np.array_equal(loaded[k], params[k])
        assert loaded[k].tobytes() == params[k].tobytes()
