"""Forward values, gradients, and graph mechanics of the autodiff engine."""

import numpy as np
import pytest

from scourcast import autodiff as ad
from scourcast.autodiff import DomainError, Parameter, ShapeError, Tensor


def _param(values, name="p"):
    return Parameter(name, Tensor(np.asarray(values, dtype=float),
                                  requires_grad=True))


def test_tanh_of_zero_is_zero():
    out = ad.tanh(Tensor([0.0]))
    assert out.data == pytest.approx([0.0], abs=0)


def test_affine_identity_case():
    x = Tensor([[1.0, 2.0]])
    out = ad.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def brute_force_conv2d(x, w, ph, pw):
    """Direct convolution sum, the oracle for the conv op."""
    b, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    h_out = h + 2 * ph - kh + 1
    w_out = wd + 2 * pw - kw + 1
    out = np.zeros((b, c_out, h_out, w_out))
    for bi in range(b):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[bi, ci, i + di, j + dj] * w[co, ci, di, dj]
                    out[bi, co, i, j] = acc
    return out


def test_conv2d_all_ones_kernel_matches_direct_sum():
    x = np.arange(1.0, 6.0).reshape(1, 1, 5, 1)
    w = np.ones((1, 1, 5, 1))
    out = ad.conv2d(Tensor(x), Tensor(w), padding=(2, 0))
    assert out.shape == (1, 1, 5, 1)
    expected = brute_force_conv2d(x, w, 2, 0)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=0)
    # center value covers the whole input
    assert out.data[0, 0, 2, 0] == pytest.approx(x.sum())


def test_conv2d_random_matches_direct_sum(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    w = rng.normal(size=(5, 3, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_allclose(out.data, brute_force_conv2d(x, w, 1, 1),
                               rtol=1e-12, atol=1e-12)


def test_backward_of_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.total(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_mean_squared_error_analytic():
    x = Tensor([2.0], requires_grad=True)
    loss = ad.mean((x - 1.0) ** 2)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(x + 1.0)


def test_shared_subexpression_accumulates_like_expanded_form():
    # loss = s*s + s with s = a*b, versus writing s out twice
    a_val, b_val = 1.7, -0.6

    a1 = Tensor(a_val, requires_grad=True)
    b1 = Tensor(b_val, requires_grad=True)
    s = a1 * b1
    ad.backward(s * s + s)

    a2 = Tensor(a_val, requires_grad=True)
    b2 = Tensor(b_val, requires_grad=True)
    ad.backward((a2 * b2) * (a2 * b2) + (a2 * b2))

    np.testing.assert_allclose(a1.grad, a2.grad, rtol=1e-15)
    np.testing.assert_allclose(b1.grad, b2.grad, rtol=1e-15)


def test_forward_determinism_bit_identical(rng):
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))

    def run():
        return ad.tanh(ad.matmul(Tensor(x), Tensor(w))).data

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_batchnorm_inference_unit_stats_is_identity(rng):
    x = rng.normal(size=(3, 4))
    out = ad.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                       np.zeros(4), np.ones(4), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=0)


def test_batchnorm_updates_running_stats(rng):
    x = rng.normal(loc=2.0, size=(50, 4))
    mean = np.zeros(4)
    var = np.ones(4)
    ad.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                 mean, var, training=True, momentum=0.1)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0), rtol=1e-12)


def test_divide_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        ad.divide(Tensor([1.0]), Tensor([0.0]))


def test_power_domain_errors():
    with pytest.raises(DomainError):
        ad.power(Tensor([-1.0]), 0.5)
    with pytest.raises(DomainError):
        ad.power(Tensor([0.0]), -1.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    message = str(err.value)
    assert "add" in message and "(2, 3)" in message and "(4, 5)" in message


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_mask_multiply_blocks_masked_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    mask = np.array([1.0, 0.0, 1.0])
    ad.backward(ad.total(ad.mask_multiply(x, mask)))
    np.testing.assert_array_equal(x.grad, mask)


def test_concat_and_take_round_trip_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    joined = ad.concat([a, b], axis=0)
    ad.backward(ad.total(joined[1:3] * 2.0))
    np.testing.assert_array_equal(a.grad, [0.0, 2.0])
    np.testing.assert_array_equal(b.grad, [2.0])


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = x * 2.0
    assert out._backward is None and not out.requires_grad


# --- finite-difference property suite -------------------------------------

def _fd_check(build, values, eps=1e-5):
    p = _param(values)
    return ad.grad_check(lambda: build(p.tensor), [p], eps=eps)


UNARY_CASES = [
    ("exp", lambda t: ad.mean(ad.exp(t)), lambda r: r.uniform(-2, 2, 5)),
    ("tanh", lambda t: ad.mean(ad.tanh(t)), lambda r: r.uniform(-3, 3, 5)),
    ("sigmoid", lambda t: ad.mean(ad.sigmoid(t)), lambda r: r.uniform(-3, 3, 5)),
    ("relu", lambda t: ad.mean(ad.relu(t)),
     lambda r: np.where(np.abs(v := r.uniform(-2, 2, 5)) < 1e-2, 0.5, v)),
    ("power", lambda t: ad.mean(t ** 0.43), lambda r: r.uniform(0.2, 4, 5)),
    ("clamp", lambda t: ad.mean(ad.clamp(t, -0.5, 0.5)),
     lambda r: np.where(np.abs(np.abs(v := r.uniform(-1, 1, 5)) - 0.5) < 1e-2,
                        0.0, v)),
    ("reshape", lambda t: ad.mean(ad.reshape(t, (5, 1)) * 3.0),
     lambda r: r.uniform(-2, 2, 5)),
    ("take", lambda t: ad.mean(t[1:4] ** 2.0), lambda r: r.uniform(0.5, 2, 5)),
    ("mean", lambda t: ad.mean(t * t), lambda r: r.uniform(-2, 2, 5)),
    ("total", lambda t: ad.total(t * t) * 0.25, lambda r: r.uniform(-2, 2, 5)),
]


@pytest.mark.parametrize("name,build,sample", UNARY_CASES,
                         ids=[c[0] for c in UNARY_CASES])
def test_unary_op_gradients_match_finite_differences(name, build, sample):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(100):
        worst = max(worst, _fd_check(build, sample(rng)))
    assert worst < 1e-4, f"{name}: max relative error {worst}"


BINARY_CASES = [
    ("add", ad.add, (-2, 2)),
    ("subtract", ad.subtract, (-2, 2)),
    ("multiply", ad.multiply, (-2, 2)),
    ("divide", ad.divide, (0.5, 3.0)),
]


@pytest.mark.parametrize("name,op,rng_range", BINARY_CASES,
                         ids=[c[0] for c in BINARY_CASES])
def test_binary_op_gradients_match_finite_differences(name, op, rng_range):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(100):
        a = _param(rng.uniform(*rng_range, 4), "a")
        b = _param(rng.uniform(*rng_range, 4), "b")
        worst = max(worst, ad.grad_check(
            lambda: ad.mean(op(a.tensor, b.tensor)), [a, b]))
    assert worst < 1e-4, f"{name}: max relative error {worst}"


def test_matmul_affine_gradients(rng):
    worst = 0.0
    for _ in range(100):
        x = _param(rng.normal(size=(3, 4)), "x")
        w = _param(rng.normal(size=(4, 2)), "w")
        b = _param(rng.normal(size=2), "b")
        worst = max(worst, ad.grad_check(
            lambda: ad.mean(ad.affine(x.tensor, w.tensor, b.tensor) ** 2.0),
            [x, w, b]))
    assert worst < 1e-4


def test_conv2d_gradients(rng):
    worst = 0.0
    for _ in range(20):
        x = _param(rng.normal(size=(2, 2, 4, 3)), "x")
        w = _param(rng.normal(size=(3, 2, 3, 3)), "w")
        b = _param(rng.normal(size=3), "b")
        worst = max(worst, ad.grad_check(
            lambda: ad.mean(ad.conv2d(x.tensor, w.tensor, b.tensor,
                                      padding=1) ** 2.0), [x, w, b]))
    assert worst < 1e-4


def test_batchnorm_train_mode_gradients(rng):
    worst = 0.0
    for _ in range(20):
        x = _param(rng.normal(size=(6, 3)), "x")
        gamma = _param(rng.uniform(0.5, 1.5, 3), "gamma")
        beta = _param(rng.normal(size=3), "beta")

        def loss():
            out = ad.batchnorm(x.tensor, gamma.tensor, beta.tensor,
                               np.zeros(3), np.ones(3), training=True)
            return ad.mean(out ** 2.0)

        worst = max(worst, ad.grad_check(loss, [x, gamma, beta]))
    assert worst < 1e-4


def test_concat_gradients(rng):
    a = _param(rng.normal(size=(2, 3)), "a")
    b = _param(rng.normal(size=(2, 2)), "b")
    err = ad.grad_check(
        lambda: ad.mean(ad.concat([a.tensor, b.tensor], axis=1) ** 2.0), [a, b])
    assert err < 1e-4


# --- grad_check oracle behaviour -------------------------------------------

def test_grad_check_quadratic_is_nearly_exact():
    p = _param([1.0])
    err = ad.grad_check(lambda: ad.total(p.tensor ** 2.0), [p], eps=1e-5)
    assert err < 1e-8


def test_grad_check_sigmoid_chain_depth_three(rng):
    p = _param(rng.normal(size=3))
    err = ad.grad_check(
        lambda: ad.mean(ad.sigmoid(ad.sigmoid(ad.sigmoid(p.tensor)))), [p])
    assert err < 1e-4


def test_grad_check_batchnorm_affine_composite(rng):
    x = _param(rng.normal(size=(5, 3)), "x")
    w = _param(rng.normal(size=(3, 2)), "w")
    b = _param(rng.normal(size=2), "b")
    gamma = _param(rng.uniform(0.5, 1.5, 3), "gamma")
    beta = _param(rng.normal(size=3), "beta")

    def loss():
        normed = ad.batchnorm(x.tensor, gamma.tensor, beta.tensor,
                              np.zeros(3), np.ones(3), training=True)
        return ad.mean(ad.affine(normed, w.tensor, b.tensor) ** 2.0)

    assert ad.grad_check(loss, [x, w, b, gamma, beta]) < 1e-4


def test_grad_check_rejects_nonpositive_epsilon():
    p = _param([1.0])
    with pytest.raises(DomainError):
        ad.grad_check(lambda: ad.total(p.tensor), [p], eps=0.0)


def test_grad_check_rejects_nonfinite_function():
    p = _param([1000.0])
    with pytest.raises(DomainError):
        with np.errstate(over="ignore"):
            ad.grad_check(lambda: ad.total(ad.exp(p.tensor)), [p])
