import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csimtl import nn


def _rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def _kink_safe_input(stack, params, rng, shape, step):
    """Standard-normal input whose leaky-relu inputs sit clear of the kink.

    A central difference that straddles the kink is not a derivative
    estimate, so draws are repeated until every pre-activation lies beyond
    the largest shift a stencil perturbation of a single preceding conv or
    dense layer can cause (twice the reach ``2 step max(1, |x|)``).
    """
    while True:
        x = rng.standard_normal(shape)
        z = x
        for layer in stack:
            if isinstance(layer, nn.LeakyReLU):
                break
            z = layer.forward(params, z, True)[0]
        else:
            return x
        if np.abs(z).min() > 4 * step * max(1.0, np.abs(x).max()):
            return x


def _conv_reference(x, w, b):
    # direct channels-last 3x3 cross-correlation with zero padding
    n, h, wd, c = x.shape
    o = w.shape[0]
    xp = np.zeros((n, h + 2, wd + 2, c))
    xp[:, 1:-1, 1:-1] = x
    y = np.zeros((n, h, wd, o))
    for r in range(h):
        for s in range(wd):
            patch = xp[:, r : r + 3, s : s + 3, :]  # (n, 3, 3, c)
            y[:, r, s, :] = np.einsum("nijc,ocij->no", patch, w) + b
    return y


def test_leaky_relu_slope():
    y = nn.forward([nn.LeakyReLU("a", 0.3)], {}, np.array([[-1.0, 2.0]]))
    np.testing.assert_allclose(y, [[-0.3, 2.0]])


def test_dense_identity():
    layer = nn.Dense("d", 2, 2)
    params = {"d.weight": np.eye(2), "d.bias": np.zeros(2)}
    np.testing.assert_array_equal(nn.forward([layer], params, np.array([[3.0, 4.0]])), [[3, 4]])


def test_conv_delta_kernel_is_identity():
    layer = nn.Conv2d("c", 1, 1)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    x = _rand((3, 8, 8, 1), dtype=np.float32)
    y = nn.forward([layer], {"c.weight": w, "c.bias": np.zeros(1, np.float32)}, x)
    np.testing.assert_array_equal(y, x)


@pytest.mark.parametrize("cin,cout", [(2, 8), (8, 16), (16, 2), (3, 3)])
def test_conv_matches_direct_loop(cin, cout):
    layer = nn.Conv2d("c", cin, cout)
    params = layer.init_params(np.random.default_rng(1), np.float64)
    params["c.bias"] = _rand(cout, 2)
    x = _rand((2, 5, 6, cin), 3)
    np.testing.assert_allclose(
        nn.forward([layer], params, x),
        _conv_reference(x, params["c.weight"], params["c.bias"]),
        rtol=1e-12, atol=1e-12,
    )


def test_shape_error_names_layer():
    stack = [nn.Dense("first", 4, 3), nn.Dense("second", 5, 2)]
    params = nn.init_params(stack, 0)
    with pytest.raises(nn.ShapeError, match="second"):
        nn.forward(stack, params, np.zeros((1, 4), np.float32))


def test_missing_parameter():
    stack = [nn.Dense("d", 2, 2)]
    with pytest.raises(nn.MissingParameterError, match="d.bias"):
        nn.forward(stack, {"d.weight": np.eye(2)}, np.zeros((1, 2)))


def test_reshape_must_preserve_count():
    with pytest.raises(nn.ShapeError):
        nn.infer_shape([nn.Reshape("r", (3, 3))], (8,))


# ---------------------------------------------------------------- loss


def test_mse_trivial_cases():
    assert nn.loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nn.loss_mse([1.0, 0.0], [0.0, 0.0]) == 0.5
    with pytest.raises(nn.ShapeError):
        nn.loss_mse([1.0], [1.0, 2.0])


def test_mse_against_scalar_loop():
    rng = np.random.default_rng(5)
    pred, target = rng.standard_normal(100), rng.standard_normal(100)
    ref = 0.0
    for p, t in zip(pred.tolist(), target.tolist()):
        ref += (p - t) * (p - t)
    ref /= 100
    assert nn.loss_mse(pred, target) == pytest.approx(ref, rel=1e-6)


# ---------------------------------------------------------------- gradients


def test_dense_gradient_closed_form():
    rng = np.random.default_rng(11)
    layer = nn.Dense("d", 3, 3)
    params = {"d.weight": rng.standard_normal((3, 3)), "d.bias": rng.standard_normal(3)}
    x, t = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    y = x @ params["d.weight"].T + params["d.bias"]
    loss, grads = nn.backward([layer], params, x, t)
    np.testing.assert_allclose(grads["d.bias"], (2 * (y - t) / y.size)[0], rtol=1e-6)
    np.testing.assert_allclose(grads["d.weight"], (2 * (y - t) / y.size).T @ x, rtol=1e-6)
    assert loss == pytest.approx(np.mean((y - t) ** 2))


def test_bias_gradient_scales_with_residual():
    rng = np.random.default_rng(2)
    layer = nn.Dense("d", 4, 2)
    params = layer.init_params(rng, np.float64)
    x = rng.standard_normal((3, 4))
    y = nn.forward([layer], params, x)
    resid = rng.standard_normal(y.shape)
    _, g1 = nn.backward([layer], params, x, y - resid)
    _, g3 = nn.backward([layer], params, x, y - 3 * resid)
    np.testing.assert_allclose(g3["d.bias"], 3 * g1["d.bias"], rtol=1e-12)


def test_zero_loss_gives_zero_gradients():
    stack = [nn.Dense("d", 4, 4), nn.LeakyReLU("a"), nn.Dense("e", 4, 2)]
    params = nn.init_params(stack, 0, np.float64)
    x = _rand((2, 4))
    loss, grads = nn.backward(stack, params, x, nn.forward(stack, params, x, training=True))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def _layer_stacks():
    return {
        "dense": ([nn.Reshape("f", (32,)), nn.Dense("d", 32, 5)], (5,)),
        "conv2d": ([nn.Conv2d("c", 2, 3)], (4, 4, 3)),
        "batchnorm": ([nn.Conv2d("c", 2, 2), nn.BatchNorm("b", 2)], (4, 4, 2)),
        "leaky-relu": ([nn.Conv2d("c", 2, 2), nn.LeakyReLU("a")], (4, 4, 2)),
        "sigmoid": ([nn.Conv2d("c", 2, 2), nn.Sigmoid("s")], (4, 4, 2)),
        "residual": ([nn.Residual("r", (nn.Conv2d("r.c", 2, 2), nn.BatchNorm("r.b", 2)))], (4, 4, 2)),
    }


@pytest.mark.parametrize("kind", list(_layer_stacks()))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(kind, seed):
    stack, out = _layer_stacks()[kind]
    rng = np.random.default_rng(seed)
    params = nn.init_params(stack, seed, np.float64)
    x = _kink_safe_input(stack, params, rng, (3, 4, 4, 2), step=1e-3)
    target = rng.standard_normal((3,) + out)
    assert nn.check_gradients(stack, params, x, target, step=1e-3) < 1e-3


def test_check_gradients_small_cases():
    rng = np.random.default_rng(0)
    dense = [nn.Dense("d", 4, 3)]
    assert nn.check_gradients(dense, nn.init_params(dense, 0), rng.random((2, 4)),
                              rng.random((2, 3))) < 1e-3
    conv = [nn.Conv2d("c", 2, 2)]
    assert nn.check_gradients(conv, nn.init_params(conv, 0), rng.random((2, 6, 6, 2)),
                              rng.random((2, 6, 6, 2))) < 1e-3
    acts = [nn.LeakyReLU("a"), nn.Sigmoid("s")]
    assert nn.check_gradients(acts, {}, rng.random((2, 3)), rng.random((2, 3))) == 0.0


def test_frozen_parameters_get_no_gradient():
    stack = [nn.Dense("a", 3, 3), nn.BatchNorm("bn", 3), nn.Dense("b", 3, 2)]
    params = nn.init_params(stack, 0)
    x = _rand((4, 3), dtype=np.float32)
    frozen = {"a.weight", "a.bias", "bn.gamma", "bn.beta"}
    _, grads, updates = nn.value_and_grad(stack, params, x, np.zeros((4, 2), np.float32), frozen)
    assert set(grads) == {"b.weight", "b.bias"}
    assert not updates  # frozen batch norm runs in inference mode


def test_gradient_names_and_dims_match_params():
    stack = [nn.Conv2d("c", 2, 4), nn.BatchNorm("b", 4), nn.LeakyReLU("a"),
             nn.Reshape("f", (64,)), nn.Dense("d", 64, 3), nn.Sigmoid("s")]
    params = nn.init_params(stack, 1)
    _, grads = nn.backward(stack, params, _rand((2, 4, 4, 2), dtype=np.float32),
                           np.zeros((2, 3), np.float32))
    trainable = nn.param_shapes(stack)
    assert list(grads) == list(trainable)
    assert all(grads[k].shape == tuple(v) for k, v in trainable.items())
    assert all(grads[k].dtype == np.float32 for k in grads)


def test_determinism():
    stack = [nn.Conv2d("c", 2, 8), nn.BatchNorm("b", 8), nn.LeakyReLU("a"), nn.Conv2d("o", 8, 2)]
    params = nn.init_params(stack, 3)
    x = _rand((5, 6, 6, 2), dtype=np.float32)
    l1, g1, u1 = nn.value_and_grad(stack, params, x, x)
    l2, g2, u2 = nn.value_and_grad(stack, params, x, x)
    assert l1 == l2
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)
    assert all(np.array_equal(u1[k], u2[k]) for k in u1)


# ---------------------------------------------------------------- batch norm


@given(seed=st.integers(0, 2**31 - 1), batch=st.integers(2, 16))
@settings(max_examples=30, deadline=None)
def test_batchnorm_training_output_is_standardized(seed, batch):
    rng = np.random.default_rng(seed)
    bn = nn.BatchNorm("b", 3)
    params = nn.init_params([bn], 0, np.float64)
    x = rng.normal(rng.uniform(-5, 5, 3), rng.uniform(0.5, 4, 3), size=(batch, 4, 4, 3))
    xhat = bn.normalized(params, x).reshape(-1, 3)
    np.testing.assert_allclose(xhat.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(xhat.var(axis=0), 1, atol=1e-3)


def test_batchnorm_running_stats_and_inference():
    bn = nn.BatchNorm("b", 2, momentum=0.9)
    params = nn.init_params([bn], 0, np.float64)
    x = _rand((8, 3, 3, 2)) * 2 + 1
    _, _, upd = bn.forward(params, x, training=True)
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(upd["b.running_mean"], 0.1 * flat.mean(0))
    np.testing.assert_allclose(upd["b.running_var"], 0.9 + 0.1 * flat.var(0))
    params.update(upd)
    y = nn.forward([bn], params, x)
    np.testing.assert_allclose(
        y.reshape(-1, 2), (flat - params["b.running_mean"]) / np.sqrt(params["b.running_var"] + 1e-5)
    )


# ---------------------------------------------------------------- adam


def test_adam_first_step_reference():
    params = {"p": np.array(1.0)}
    state = nn.adam_init(params, lr=0.001)
    new, state = nn.adam_step(params, {"p": np.array(2.0)}, state)
    # reference recurrence evaluated by hand in scalar arithmetic
    m, v = 0.1 * 2.0, 0.001 * 4.0
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 1.0 - 0.001 * mhat / (vhat**0.5 + 1e-8)
    assert float(new["p"]) == pytest.approx(expected, rel=1e-12)
    assert float(new["p"]) == pytest.approx(0.999, abs=1e-9)
    assert state.t == 1


def test_adam_zero_gradient_is_noop():
    params = {"a": _rand((3, 3), dtype=np.float32), "b": _rand(4, dtype=np.float32)}
    state = nn.adam_init(params)
    new, state = nn.adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
    assert all(np.array_equal(new[k], params[k]) for k in params)


def test_adam_leaves_absent_parameters_untouched():
    params = {"a": _rand(3, dtype=np.float32), "frozen": _rand(3, 1, np.float32)}
    state = nn.adam_init(params, names=["a"])
    new, state = nn.adam_step(params, {"a": np.ones(3, np.float32)}, state)
    assert new["frozen"] is params["frozen"]
    assert not np.array_equal(new["a"], params["a"])
    new2, state2 = nn.adam_step(new, {"a": np.ones(3, np.float32)}, state)
    assert state2.t == state.t + 1 == 2


def test_adam_rejects_shape_mismatch():
    params = {"a": np.zeros(3)}
    with pytest.raises(nn.ShapeError):
        nn.adam_step(params, {"a": np.zeros(4)}, nn.adam_init(params))


def test_adam_matches_textbook_over_many_steps():
    rng = np.random.default_rng(9)
    p = rng.standard_normal(5)
    params, state = {"p": p.copy()}, nn.adam_init({"p": p}, lr=0.01)
    m = np.zeros(5)
    v = np.zeros(5)
    ref = p.copy()
    for t in range(1, 30):
        g = rng.standard_normal(5)
        params, state = nn.adam_step(params, {"p": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["p"], ref, rtol=1e-10)
