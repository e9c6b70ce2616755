"""Pure-numpy convolution kernels (fallback path).

Forward and both backward passes are written as kh*kw shifted mat-muls over
strided views of the padded input, which keeps everything in BLAS without
materializing im2col buffers.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, kernel, stride, padding):
    """Cross-correlate x[B,Cin,H,W] with kernel[Cout,Cin,kh,kw]."""
    batch, cin, _, _ = x.shape
    cout, _, kh, kw = kernel.shape
    ho, wo = conv_output_hw(x.shape, kernel.shape, stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((batch, cout, ho, wo), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            # [Cout,Cin] @ [B,Cin,Ho*Wo] -> [B,Cout,Ho*Wo]
            flat = np.ascontiguousarray(patch).reshape(batch, cin, ho * wo)
            out += (kernel[:, :, u, v] @ flat).reshape(batch, cout, ho, wo)
    return out


def conv2d_backward_input(grad_out, kernel, x_shape, stride, padding):
    """Gradient w.r.t. the input, same geometry as the forward pass."""
    batch, cin, h, w = x_shape
    cout, _, kh, kw = kernel.shape
    _, _, ho, wo = grad_out.shape
    gp = np.zeros((batch, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    gflat = np.ascontiguousarray(grad_out).reshape(batch, cout, ho * wo)
    for u in range(kh):
        for v in range(kw):
            # [Cin,Cout] @ [B,Cout,Ho*Wo] -> [B,Cin,Ho*Wo]
            contrib = (kernel[:, :, u, v].T @ gflat).reshape(batch, cin, ho, wo)
            gp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += contrib
    if padding == 0:
        return gp
    return gp[:, :, padding : padding + h, padding : padding + w]


def conv2d_backward_kernel(grad_out, x, kernel_shape, stride, padding):
    """Gradient w.r.t. the kernel."""
    batch, cin, _, _ = x.shape
    cout, _, kh, kw = kernel_shape
    _, _, ho, wo = grad_out.shape
    xp = _pad(x, padding)
    gk = np.zeros(kernel_shape, dtype=np.float64)
    gflat = np.ascontiguousarray(grad_out).reshape(batch, cout, ho * wo)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            flat = np.ascontiguousarray(patch).reshape(batch, cin, ho * wo)
            # sum over batch of [Cout,HW] @ [HW,Cin]
            gk[:, :, u, v] = np.einsum("bof,bif->oi", gflat, flat, optimize=True)
    return gk


def conv_output_hw(x_shape, kernel_shape, stride, padding):
    """(H', W') = floor((H + 2p - k) / stride) + 1; raises unless both are positive."""
    _, _, h, w = x_shape
    _, _, kh, kw = kernel_shape
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0:
        raise ValueError(
            f"conv2d output size is not a positive integer for input {x_shape[2:]}, "
            f"kernel {kernel_shape[2:]}, stride {stride}, padding {padding}"
        )
    return num_h // stride + 1, num_w // stride + 1
