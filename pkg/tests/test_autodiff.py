import numpy as np
import pytest

from jointcodes import autodiff as ad
from jointcodes import losses
from jointcodes.autodiff import DomainError, ShapeError, Tensor, finite_difference_check


def _weighted(op):
    """Scalarize an op's output with fixed random weights so every output entry matters."""

    def f(x):
        out = op(x)
        w = np.random.default_rng(99).standard_normal(out.shape)
        return ad.sum(ad.mul(out, Tensor(w)))

    return f


def test_concat_axis0():
    out = ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0)
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_relu_values():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_identity_kernel_conv():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 7, 5)))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(k), stride=1, padding=1)
    assert np.array_equal(out.data, x.data)


def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(1).random((3, 4)), requires_grad=True)
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul_scalar(x, 2.0))


def test_backward_twice_doubles():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    loss = ad.sum(ad.square(ad.relu(ad.matmul(x, w))))
    ad.backward(loss)
    g1x, g1w = x.grad.copy(), w.grad.copy()
    ad.backward(loss)
    assert np.array_equal(x.grad, 2 * g1x)
    assert np.array_equal(w.grad, 2 * g1w)


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0, -1.0], requires_grad=True)
    ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_grad_buffer_without_requires_grad():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(a, b)))
    assert a.grad is None
    assert b.grad.tolist() == [1.0, 2.0]


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-1.0]))


def test_logsumexp_is_stable_for_large_logits():
    x = Tensor([[1000.0, 1000.0, -5.0]])
    out = ad.logsumexp(x, axis=1)
    assert np.isclose(out.data[0], 1000.0 + np.log(2.0 + np.exp(-1005.0)))
    masked = ad.logsumexp(x, axis=1, mask=np.array([[False, True, True]]))
    assert np.isclose(masked.data[0], 1000.0)


def test_fd_check_examples():
    assert finite_difference_check(lambda x: ad.sum(ad.square(x)), Tensor([1.0, 2.0, 3.0]), 1e-5) < 1e-6
    x = Tensor(np.random.default_rng(3).standard_normal(7))
    assert finite_difference_check(lambda t: ad.sum(t), x, 1e-5) < 1e-10


def test_fd_check_anticontrastive():
    rng = np.random.default_rng(4)
    zs = Tensor(rng.standard_normal((4, 6)))
    za = rng.standard_normal((4, 6))
    assert finite_difference_check(lambda t: losses.anticontrastive_loss(t, zs), za, 1e-5) < 1e-4


def test_fd_check_contrastive_batch():
    rng = np.random.default_rng(5)
    zb = Tensor(rng.standard_normal((4, 8)))
    za = rng.standard_normal((4, 8))
    assert finite_difference_check(lambda t: losses.contrastive_loss(t, zb, 0.1), za, 1e-5) < 1e-4
    zaT = Tensor(za)
    assert finite_difference_check(lambda t: losses.contrastive_loss(zaT, t, 0.1), zb.data, 1e-5) < 1e-4


def _rand(rng, shape):
    return rng.standard_normal(shape)


# (name, op of one tensor argument, input-shape factory)
OPS = [
    ("add", lambda x: ad.add(x, Tensor(np.linspace(-1, 1, x.data.size).reshape(x.shape))), (3, 4)),
    ("sub", lambda x: ad.sub(Tensor(np.linspace(-1, 1, x.data.size).reshape(x.shape)), x), (3, 4)),
    ("mul", lambda x: ad.mul(x, x), (3, 4)),
    ("mul_scalar", lambda x: ad.mul_scalar(x, -2.5), (3, 4)),
    ("add_scalar", lambda x: ad.add_scalar(x, 1.5), (5,)),
    ("matmul_left", lambda x: ad.matmul(x, Tensor(np.arange(12.0).reshape(4, 3) / 10)), (2, 4)),
    ("matmul_right", lambda x: ad.matmul(Tensor(np.arange(8.0).reshape(2, 4) / 10), x), (4, 3)),
    ("relu", ad.relu, (3, 5)),
    ("exp", ad.exp, (3, 4)),
    ("log", lambda x: ad.log(ad.add_scalar(ad.square(x), 0.5)), (3, 4)),
    ("sqrt", lambda x: ad.sqrt(ad.add_scalar(ad.square(x), 0.5)), (3, 4)),
    ("square", ad.square, (3, 4)),
    ("sigmoid", ad.sigmoid, (3, 4)),
    ("clamp", lambda x: ad.clamp(x, -0.7, 0.7), (4, 4)),
    ("reshape", lambda x: ad.reshape(x, (6, 2)), (3, 4)),
    ("transpose", ad.transpose, (3, 4)),
    ("concat", lambda x: ad.concat([x, ad.square(x)], axis=1), (3, 4)),
    ("sum_all", lambda x: ad.mul_scalar(ad.sum(ad.square(x)), 1.0), (3, 4)),
    ("sum_axis", lambda x: ad.sum(ad.square(x), axis=1), (3, 4)),
    ("mean", lambda x: ad.mean(ad.square(x), axis=0), (3, 4)),
    ("l2_normalize_rows", ad.l2_normalize_rows, (4, 6)),
    ("logsumexp", lambda x: ad.logsumexp(x, axis=1), (4, 5)),
    ("logsumexp_masked", lambda x: ad.logsumexp(x, axis=1, mask=~np.eye(4, dtype=bool)), (4, 4)),
    ("rowdot", lambda x: ad.rowdot(x, ad.add_scalar(x, 1.5)), (4, 5)),
    ("take_rows", lambda x: ad.take_rows(x, [0, 2, 2, 1]), (3, 4)),
    ("add_bias_x", lambda x: ad.add_bias(x, Tensor([0.1, -0.2, 0.3])), (2, 3, 2, 2)),
    ("add_bias_b", lambda b: ad.add_bias(Tensor(np.ones((2, 4, 3))), b), (4,)),
    ("conv2d_x", lambda x: ad.conv2d(x, Tensor(np.linspace(-1, 1, 54).reshape(3, 2, 3, 3)), 2, 1), (2, 2, 5, 4)),
    ("conv2d_w", lambda w: ad.conv2d(Tensor(np.linspace(-1, 1, 64).reshape(2, 2, 4, 4)), w, 1, 1), (3, 2, 3, 3)),
    (
        "conv_transpose2d_x",
        lambda x: ad.conv_transpose2d(x, Tensor(np.linspace(-1, 1, 54).reshape(3, 2, 3, 3)), 2, 1, 1),
        (2, 3, 3, 2),
    ),
    (
        "conv_transpose2d_w",
        lambda w: ad.conv_transpose2d(Tensor(np.linspace(-1, 1, 36).reshape(2, 2, 3, 3)), w, 2, 1, 1),
        (2, 3, 3, 3),
    ),
    (
        "batch_norm_train",
        lambda x: ad.batch_norm(x, Tensor([1.5, 0.5]), Tensor([0.1, -0.3]))[0],
        (3, 2, 2, 2),
    ),
    (
        "batch_norm_eval",
        lambda x: ad.batch_norm(x, Tensor([1.5, 0.5]), Tensor([0.1, -0.3]), [0.2, -0.1], [1.3, 0.7])[0],
        (3, 2, 2, 2),
    ),
    ("batch_norm_gamma", lambda g: ad.batch_norm(Tensor(np.linspace(-2, 3, 24).reshape(3, 2, 2, 2)), g, Tensor([0.0, 0.0]))[0], (2,)),
]


@pytest.mark.parametrize("name,op,shape", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_match_finite_differences(name, op, shape):
    for seed in range(10):
        x = _rand(np.random.default_rng(seed), shape)
        if name == "clamp":
            x = np.where(np.abs(np.abs(x) - 0.7) < 1e-3, x + 0.01, x)
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, x + 0.01, x)
        assert finite_difference_check(_weighted(op), x, 1e-5) < 1e-4, (name, seed)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(6)
    for stride, pad, size in [(1, 0, 5), (1, 1, 6), (2, 1, 8), (2, 0, 7)]:
        x = rng.standard_normal((2, 3, size, size))
        k = rng.standard_normal((4, 3, 3, 3))
        y_shape = ad.conv2d(Tensor(x), Tensor(k), stride, pad).shape
        y = rng.standard_normal(y_shape)
        out_pad = (size + 2 * pad - 3) % stride
        lhs = np.sum(ad.conv2d(Tensor(x), Tensor(k), stride, pad).data * y)
        rhs = np.sum(x * ad.conv_transpose2d(Tensor(y), Tensor(k), stride, pad, out_pad).data)
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (5 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 3, ho, wo))
    for n in range(2):
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3] * w[o])
    assert np.allclose(ad.conv2d(Tensor(x), Tensor(w), stride, pad).data, ref, atol=1e-12)


def test_tensor_data_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.data.size == int(np.prod(t.shape))
    assert t.data.dtype == np.float64 and t.data.flags.c_contiguous
    assert Tensor(3.0).shape == ()
