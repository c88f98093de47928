import numpy as np
import pytest

from cafe_lab import kernels
from cafe_lab.kernels import (_conv2d_fwd_loops, _conv2d_fwd_np,
                              _conv2d_igrad_loops, _conv2d_igrad_np,
                              _conv2d_wgrad_loops, _conv2d_wgrad_np,
                              _tv_grad_loops, _tv_grad_np, _tv_value_loops,
                              _tv_value_np)

rng = np.random.default_rng(0)


@pytest.mark.parametrize("h,w,c,kh,stride", [(6, 6, 3, 2, 1), (8, 5, 2, 3, 2),
                                             (4, 4, 1, 4, 1)])
def test_conv_paths_agree(h, w, c, kh, stride):
    x = rng.normal(size=(h, w))
    wgt = rng.normal(size=(c, kh, kh))
    f_loop = _conv2d_fwd_loops(x, wgt, stride)
    f_np = _conv2d_fwd_np(x, wgt, stride)
    np.testing.assert_allclose(f_loop, f_np, atol=1e-12)
    dy = rng.normal(size=f_loop.shape)
    np.testing.assert_allclose(_conv2d_igrad_loops(dy, wgt, stride, h, w),
                               _conv2d_igrad_np(dy, wgt, stride, h, w),
                               atol=1e-12)
    np.testing.assert_allclose(_conv2d_wgrad_loops(x, dy, stride, kh, kh),
                               _conv2d_wgrad_np(x, dy, stride, kh, kh),
                               atol=1e-12)


def test_conv_ones_kernel_hand_value():
    # 2x2 kernel of ones over a 2x2 image of ones sums to 4
    x = np.ones((2, 2))
    w = np.ones((1, 2, 2))
    out = kernels.conv2d_fwd(x, w, 1)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(4.0)


def test_conv_stride_shapes():
    x = rng.normal(size=(7, 9))
    w = rng.normal(size=(2, 3, 3))
    out = kernels.conv2d_fwd(x, w, 2)
    assert out.shape == (2, 3, 4)


def test_conv_adjoint_identity():
    # <dy, conv(x, w)> == <igrad(dy, w), x> for all dy, x
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(3, 2, 2))
    dy = rng.normal(size=(3, 5, 4))
    lhs = float((dy * kernels.conv2d_fwd(x, w, 1)).sum())
    rhs = float((kernels.conv2d_igrad(dy, w, 1, 6, 5) * x).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_tv_paths_agree():
    imgs = rng.normal(size=(3, 6, 7))
    assert _tv_value_loops(imgs) == pytest.approx(_tv_value_np(imgs), rel=1e-12)
    np.testing.assert_allclose(_tv_grad_loops(imgs), _tv_grad_np(imgs),
                               atol=1e-12)


def test_tv_hand_value():
    img = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    assert kernels.tv_value(img) == pytest.approx(2.0)


def test_tv_constant_zero():
    assert kernels.tv_value(np.full((2, 5, 5), 0.37)) == pytest.approx(0.0)


def test_tv_grad_is_subgradient():
    imgs = rng.random((2, 5, 5))
    g = kernels.tv_grad(imgs)
    eps = 1e-7
    direction = rng.normal(size=imgs.shape)
    lhs = (kernels.tv_value(imgs + eps * direction)
           - kernels.tv_value(imgs - eps * direction)) / (2 * eps)
    assert lhs == pytest.approx(float((g * direction).sum()), rel=1e-5)


def test_batched_wrappers_match_loop():
    x = rng.normal(size=(3, 6, 6))
    w = rng.normal(size=(2, 2, 2))
    out = kernels.conv2d_fwd_batch(x, w, 1)
    for n in range(3):
        np.testing.assert_allclose(out[n], kernels.conv2d_fwd(x[n], w, 1))


def test_backend_flag_exposed():
    assert kernels.ACTIVE_BACKEND in ("numba", "numpy")
