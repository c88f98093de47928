"""Hot numeric kernels: 2-D convolution ops and total variation.

Every kernel exists twice: a loop implementation that numba can JIT and a
vectorized pure-numpy implementation.  The active backend is chosen once at
import from the ``CAFE_LAB_BACKEND`` environment variable (``numba`` by
default, ``numpy`` to force the fallback).  ``benchmarks/bench_kernels.py``
times both paths.

All convolutions are valid-mode, single input channel: image ``(H, W)``,
weight ``(C, kh, kw)``, output ``(C, Ho, Wo)`` with ``Ho = (H-kh)//s + 1``.
Batched wrappers stack a leading axis.
"""

import os

import numpy as np

_BACKEND_ENV = "CAFE_LAB_BACKEND"


# ---------------------------------------------------------------------------
# loop implementations (numba-friendly)

def _conv2d_fwd_loops(x, w, stride):
    c, kh, kw = w.shape
    ho = (x.shape[0] - kh) // stride + 1
    wo = (x.shape[1] - kw) // stride + 1
    out = np.zeros((c, ho, wo))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for p in range(kh):
                    for q in range(kw):
                        acc += x[i * stride + p, j * stride + q] * w[ci, p, q]
                out[ci, i, j] = acc
    return out


def _conv2d_igrad_loops(dy, w, stride, h, wd):
    c, ho, wo = dy.shape
    kh, kw = w.shape[1], w.shape[2]
    dx = np.zeros((h, wd))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                g = dy[ci, i, j]
                for p in range(kh):
                    for q in range(kw):
                        dx[i * stride + p, j * stride + q] += g * w[ci, p, q]
    return dx


def _conv2d_wgrad_loops(x, dy, stride, kh, kw):
    c, ho, wo = dy.shape
    dw = np.zeros((c, kh, kw))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                g = dy[ci, i, j]
                for p in range(kh):
                    for q in range(kw):
                        dw[ci, p, q] += g * x[i * stride + p, j * stride + q]
    return dw


def _tv_value_loops(images):
    total = 0.0
    b, h, w = images.shape
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    total += abs(images[n, i + 1, j] - images[n, i, j])
                if j + 1 < w:
                    total += abs(images[n, i, j + 1] - images[n, i, j])
    return total


def _tv_grad_loops(images):
    b, h, w = images.shape
    grad = np.zeros((b, h, w))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    d = images[n, i + 1, j] - images[n, i, j]
                    s = np.sign(d)
                    grad[n, i + 1, j] += s
                    grad[n, i, j] -= s
                if j + 1 < w:
                    d = images[n, i, j + 1] - images[n, i, j]
                    s = np.sign(d)
                    grad[n, i, j + 1] += s
                    grad[n, i, j] -= s
    return grad


# ---------------------------------------------------------------------------
# vectorized numpy implementations

def _conv2d_fwd_np(x, w, stride):
    kh, kw = w.shape[1], w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw))[::stride, ::stride]
    return np.einsum("ijpq,cpq->cij", win, w)


def _conv2d_igrad_np(dy, w, stride, h, wd):
    c, ho, wo = dy.shape
    kh, kw = w.shape[1], w.shape[2]
    dx = np.zeros((h, wd))
    for p in range(kh):
        for q in range(kw):
            dx[p:p + ho * stride:stride, q:q + wo * stride:stride] += np.tensordot(
                w[:, p, q], dy, axes=(0, 0))
    return dx


def _conv2d_wgrad_np(x, dy, stride, kh, kw):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw))[::stride, ::stride]
    return np.einsum("cij,ijpq->cpq", dy, win)


def _tv_value_np(images):
    dv = np.abs(images[:, 1:, :] - images[:, :-1, :]).sum()
    dh = np.abs(images[:, :, 1:] - images[:, :, :-1]).sum()
    return float(dv + dh)


def _tv_grad_np(images):
    grad = np.zeros_like(images)
    sv = np.sign(images[:, 1:, :] - images[:, :-1, :])
    grad[:, 1:, :] += sv
    grad[:, :-1, :] -= sv
    sh = np.sign(images[:, :, 1:] - images[:, :, :-1])
    grad[:, :, 1:] += sh
    grad[:, :, :-1] -= sh
    return grad


# ---------------------------------------------------------------------------
# backend selection

def _pick_backend():
    choice = os.environ.get(_BACKEND_ENV, "numba").strip().lower()
    if choice == "numpy":
        return "numpy", None
    from numba import njit  # deferred so the numpy path never imports numba
    return "numba", njit


ACTIVE_BACKEND, _njit = _pick_backend()

if ACTIVE_BACKEND == "numba":
    conv2d_fwd = _njit(cache=True)(_conv2d_fwd_loops)
    conv2d_igrad = _njit(cache=True)(_conv2d_igrad_loops)
    conv2d_wgrad = _njit(cache=True)(_conv2d_wgrad_loops)
    tv_value = _njit(cache=True)(_tv_value_loops)
    tv_grad = _njit(cache=True)(_tv_grad_loops)
else:
    conv2d_fwd = _conv2d_fwd_np
    conv2d_igrad = _conv2d_igrad_np
    conv2d_wgrad = _conv2d_wgrad_np
    tv_value = _tv_value_np
    tv_grad = _tv_grad_np


# batched wrappers; K is small so the python loop is not the bottleneck

def conv2d_fwd_batch(x, w, stride):
    return np.stack([conv2d_fwd(x[n], w, stride) for n in range(x.shape[0])])


def conv2d_igrad_batch(dy, w, stride, h, wd):
    return np.stack([conv2d_igrad(dy[n], w, stride, h, wd) for n in range(dy.shape[0])])


def conv2d_wgrad_batch(x, dy, stride, kh, kw):
    dw = np.zeros((dy.shape[1], kh, kw))
    for n in range(x.shape[0]):
        dw += conv2d_wgrad(x[n], dy[n], stride, kh, kw)
    return dw
