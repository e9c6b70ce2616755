"""Numba-compiled convolution kernels (accelerated path).

Same contracts as numpy_kernels; plain nested loops compiled with @njit.
Loop order is fixed, so results are deterministic run to run (summation
order differs from the BLAS path only at the last-ulp level).
"""

import numpy as np
from numba import njit

from .numpy_kernels import conv_output_hw

BACKEND_NAME = "numba"


@njit(cache=True, nogil=True)
def _pad_nb(x, padding):
    batch, cin, h, w = x.shape
    xp = np.zeros((batch, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


@njit(cache=True, nogil=True)
def _conv2d_forward_nb(x, kernel, stride, padding, ho, wo):
    batch, cin, _, _ = x.shape
    cout, _, kh, kw = kernel.shape
    xp = _pad_nb(x, padding) if padding > 0 else x
    out = np.zeros((batch, cout, ho, wo), dtype=np.float64)
    for b in range(batch):
        for o in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, i, oy * stride + u, ox * stride + v] * kernel[o, i, u, v]
                    out[b, o, oy, ox] = acc
    return out


@njit(cache=True, nogil=True)
def _conv2d_backward_input_nb(grad_out, kernel, stride, padding, h, w):
    batch, cout, ho, wo = grad_out.shape
    _, cin, kh, kw = kernel.shape
    gp = np.zeros((batch, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for b in range(batch):
        for o in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    g = grad_out[b, o, oy, ox]
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                gp[b, i, oy * stride + u, ox * stride + v] += g * kernel[o, i, u, v]
    if padding == 0:
        return gp
    return gp[:, :, padding : padding + h, padding : padding + w].copy()


@njit(cache=True, nogil=True)
def _conv2d_backward_kernel_nb(grad_out, x, stride, padding, kh, kw):
    batch, cout, ho, wo = grad_out.shape
    _, cin, _, _ = x.shape
    xp = _pad_nb(x, padding) if padding > 0 else x
    gk = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    for b in range(batch):
        for o in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    g = grad_out[b, o, oy, ox]
                    for i in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                gk[o, i, u, v] += g * xp[b, i, oy * stride + u, ox * stride + v]
    return gk


def conv2d_forward(x, kernel, stride, padding):
    ho, wo = conv_output_hw(x.shape, kernel.shape, stride, padding)
    return _conv2d_forward_nb(
        np.ascontiguousarray(x), np.ascontiguousarray(kernel), stride, padding, ho, wo
    )


def conv2d_backward_input(grad_out, kernel, x_shape, stride, padding):
    return _conv2d_backward_input_nb(
        np.ascontiguousarray(grad_out),
        np.ascontiguousarray(kernel),
        stride,
        padding,
        x_shape[2],
        x_shape[3],
    )


def conv2d_backward_kernel(grad_out, x, kernel_shape, stride, padding):
    return _conv2d_backward_kernel_nb(
        np.ascontiguousarray(grad_out),
        np.ascontiguousarray(x),
        stride,
        padding,
        kernel_shape[2],
        kernel_shape[3],
    )
