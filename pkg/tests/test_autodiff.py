import numpy as np
import pytest

import endonav.autodiff as ad
from endonav.autodiff import Tensor


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f w.r.t. array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def check_op(build, *arrays, tol=1e-6):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    loss = ad.tsum(ad.mul(out, out))
    loss.backward()
    for t, a in zip(tensors, arrays):
        fd = fd_grad(lambda: float((_eval(build, arrays) ** 2).sum()), a)
        assert np.allclose(t.grad, fd, atol=tol), f"grad mismatch: {t.grad} vs {fd}"


def _eval(build, arrays):
    with ad.no_grad():
        return build(*[Tensor(a) for a in arrays]).data


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_add_mul_broadcast():
    check_op(lambda a, b: ad.add(ad.mul(a, b), a), rand(3, 4), rand(4, seed=1))


def test_matmul():
    check_op(ad.matmul, rand(3, 4), rand(4, 2, seed=1))


def test_affine():
    check_op(ad.affine, rand(5, 3), rand(3, 2, seed=1), rand(2, seed=2))


def test_activations():
    for op in (ad.relu, ad.sigmoid, ad.tanh, ad.exp):
        check_op(lambda x, op=op: op(x), rand(4, 3, seed=3) + 0.1)


def test_log():
    check_op(ad.log, np.abs(rand(3, 3, seed=4)) + 0.5)


def test_minimum_and_clip():
    check_op(ad.minimum, rand(4, seed=5), rand(4, seed=6))
    check_op(lambda x: ad.clip(x, -0.5, 0.5), rand(6, seed=7))


def test_conv2d():
    x = rand(2, 6, 6, 2, seed=8) * 0.5
    w = rand(3, 3, 2, 4, seed=9) * 0.5
    b = rand(4, seed=10) * 0.1
    check_op(lambda x_, w_, b_: ad.conv2d(x_, w_, b_, 2), x, w, b, tol=1e-5)


def test_conv2d_matches_naive():
    x = rand(1, 5, 5, 2, seed=11)
    w = rand(2, 2, 2, 3, seed=12)
    b = rand(3, seed=13)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 1).data
    oh = ow = 4
    naive = np.zeros((1, oh, ow, 3))
    for i in range(oh):
        for j in range(ow):
            patch = x[0, i:i + 2, j:j + 2, :]
            for f in range(3):
                naive[0, i, j, f] = (patch * w[:, :, :, f]).sum() + b[f]
    assert np.allclose(out, naive, atol=1e-12)


def test_narrow_concat_gather():
    check_op(lambda x: ad.narrow(x, 1, 3), rand(4, 5, seed=14))
    check_op(ad.concat_cols, rand(3, 2, seed=15), rand(3, 4, seed=16))
    idx = np.array([0, 2, 1])
    check_op(lambda x: ad.gather_cols(x, idx), rand(3, 3, seed=17))


def test_log_softmax_grad_and_value():
    x = rand(4, 3, seed=18)
    out = ad.log_softmax(Tensor(x)).data
    expected = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    assert np.allclose(out, expected, atol=1e-12)
    check_op(lambda t: ad.log_softmax(t), x)


def test_reductions():
    check_op(lambda x: ad.reshape(ad.tsum(x, axis=1), (3, 1)), rand(3, 4, seed=19))
    x = Tensor(rand(3, 4, seed=20), requires_grad=True)
    ad.tmean(x).backward()
    assert np.allclose(x.grad, np.full((3, 4), 1 / 12))


def test_grad_accumulates_on_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)    # x^2 + x -> grad 2x + 1 = 5
    y.backward(np.array([1.0]))
    assert np.allclose(x.grad, [5.0])


def test_no_grad_builds_no_graph():
    x = Tensor(rand(2, 2, seed=21), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_backward_requires_scalar():
    x = Tensor(rand(2, 2, seed=22), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, x).backward()
