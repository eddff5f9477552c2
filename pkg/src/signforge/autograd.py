"""Exact backward passes for every layer kind the two architectures use.

There is no taping engine: each function is the hand-derived gradient of the
matching forward kernel, and models chain them explicitly in reverse layer
order. Every gradient tensor has the shape of the value it differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ShapeError
from .tensor import ArgmaxMap, Tensor, im2col, kernels_as_matrix, pad_same


@dataclass
class LayerGrad:
    """Gradients w.r.t. a layer's input and its named parameters."""

    d_input: Tensor | None
    d_params: dict[str, Tensor] = field(default_factory=dict)


def dense_backward(x: Tensor, w: Tensor, d_out: Tensor) -> LayerGrad:
    """Gradients of y = x @ w + b given upstream d_out.

    Returns d_params under the keys "w" and "b"; "b" is the column sum of
    d_out because the bias broadcasts over the batch.
    """
    if x.ndim != 2 or w.ndim != 2 or d_out.ndim != 2:
        raise ShapeError("dense_backward needs rank-2 x, w, d_out")
    m, k = x.shape
    if w.shape[0] != k or d_out.shape != (m, w.shape[1]):
        raise ShapeError(f"inconsistent shapes: x {x.shape}, w {w.shape}, "
                         f"d_out {d_out.shape}")
    return LayerGrad(
        d_input=d_out @ w.T,
        d_params={"w": x.T @ d_out, "b": d_out.sum(axis=0)},
    )


def conv2d_backward(x: Tensor, kernels: Tensor, d_out: Tensor,
                    padding: str = "valid", *, cols: Tensor | None = None,
                    need_input_grad: bool = True,
                    d_cols_buf: Tensor | None = None,
                    dx_buf: Tensor | None = None) -> LayerGrad:
    """Gradients of the stride-1 cross-correlation w.r.t. input, kernels, bias.

    ``cols`` may pass in the patch matrix cached from the forward call to
    skip rebuilding it. ``need_input_grad=False`` skips d_input (useful for
    the first layer of a model, where nothing consumes it).
    """
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernels expect {kcin}")
    oh, ow = (h, w) if padding == "same" else (h - kh + 1, w - kw + 1)
    if d_out.shape != (n, oh, ow, cout):
        raise ShapeError(f"d_out shape {d_out.shape} does not match forward "
                         f"output {(n, oh, ow, cout)}")
    if cols is None:
        xp = x if padding == "valid" else pad_same(x, kh, kw)
        cols = im2col(xp, kh, kw)

    d_out_mat = np.ascontiguousarray(d_out).reshape(n * oh * ow, cout)
    d_w = (cols.T @ d_out_mat).reshape(kh, kw, cin, cout)
    d_b = d_out_mat.sum(axis=0)

    d_input = None
    if need_input_grad:
        if d_cols_buf is None:
            d_cols_buf = np.empty(cols.shape, d_out.dtype)
        np.matmul(d_out_mat, kernels_as_matrix(kernels).T, out=d_cols_buf)
        ph, pw = (h, w) if padding == "valid" else (h + kh - 1, w + kw - 1)
        if dx_buf is None:
            dx_buf = np.empty((n, ph, pw, cin), d_out.dtype)
        _kernels.col2im_into(d_cols_buf, cin, kh, kw, dx_buf.reshape(n, ph, pw * cin))
        if padding == "valid":
            d_input = dx_buf
        else:
            top, left = (kh - 1) // 2, (kw - 1) // 2
            d_input = dx_buf[:, top:top + h, left:left + w, :]
    return LayerGrad(d_input=d_input, d_params={"w": d_w, "b": d_b})


def maxpool2d_backward(argmax: ArgmaxMap, d_out: Tensor,
                       dx_buf: Tensor | None = None) -> Tensor:
    """Routes each upstream gradient to its recorded winner; zeros elsewhere.

    Windows are disjoint, so winner indices never collide and a plain scatter
    is exact.
    """
    if d_out.shape != argmax.flat_index.shape:
        raise ShapeError(f"d_out shape {d_out.shape} does not match argmax map "
                         f"shape {argmax.flat_index.shape}")
    if dx_buf is None:
        dx_buf = np.empty(argmax.input_shape, d_out.dtype)
    elif dx_buf.shape != argmax.input_shape:
        raise ShapeError(f"dx buffer shape {dx_buf.shape} does not match input "
                         f"shape {argmax.input_shape}")
    _kernels.maxpool_scatter_into(argmax.flat_index.ravel(),
                                  np.ascontiguousarray(d_out).ravel(),
                                  dx_buf.reshape(-1))
    return dx_buf


def activation_backward(kind: str, ref: Tensor, d_out: Tensor) -> Tensor:
    """Backward of an elementwise activation.

    ``ref`` is the forward input for relu (its output works too, the masks
    agree) and must be the forward output for sigmoid and softmax. The
    softmax case is the full Jacobian-vector product over the last axis; the
    training loop never calls it because the loss fuses softmax with
    cross-entropy.
    """
    if ref.shape != d_out.shape:
        raise ShapeError(f"ref shape {ref.shape} does not match d_out {d_out.shape}")
    if kind == "relu":
        # Subgradient at exactly 0 is defined as 0.
        return np.where(ref > 0, d_out, 0)
    if kind == "sigmoid":
        return d_out * ref * (1 - ref)
    if kind == "softmax":
        inner = np.sum(d_out * ref, axis=-1, keepdims=True)
        return ref * (d_out - inner)
    raise ValueError(f"unknown activation {kind!r}")
