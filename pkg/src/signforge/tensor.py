"""Dense tensor construction and the forward kernels the models are built from.

Tensors are plain numpy arrays under a fixed convention: float storage
(float32 in production, float64 in the gradient-check mode), C-contiguous
row-major data, rank 1 to 4, and batch/height/width/channel axis order for
images. Kernels never mutate their inputs and preserve the input dtype.

The conv and pool kernels optionally write into caller-provided buffers so
a training loop can recycle its allocations; with no buffers they are pure
functions, safe to call from concurrent request handlers.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

Tensor = np.ndarray

ACTIVATION_KINDS = ("relu", "sigmoid", "softmax")


class Scratch:
    """A keyed pool of reusable buffers for single-threaded hot paths."""

    def __init__(self):
        self._bufs: dict = {}

    def take(self, key, shape, dtype) -> np.ndarray:
        buf = self._bufs.get(key)
        if buf is None or buf.shape != tuple(shape) or buf.dtype != dtype:
            buf = np.empty(shape, dtype)
            self._bufs[key] = buf
        return buf


def tensor_new(shape, fill=0.0) -> Tensor:
    """Build a float32 tensor of ``shape`` from a scalar fill or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got shape {shape}")
    size = int(np.prod(shape))
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=np.float32)
    buf = np.asarray(fill, dtype=np.float32).ravel()
    if buf.size != size:
        raise ShapeError(f"buffer length {buf.size} does not match shape {shape} "
                         f"(needs {size} values)")
    return buf.reshape(shape).copy()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Row-major [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return h - kh + 1, w - kw + 1
    if padding == "same":
        return h, w
    raise ValueError(f"unknown padding {padding!r}")


def pad_same(x: Tensor, kh: int, kw: int) -> Tensor:
    """Zero-pad NHWC input so a stride-1 conv keeps the spatial extents."""
    top, left = (kh - 1) // 2, (kw - 1) // 2
    bottom, right = kh - 1 - top, kw - 1 - left
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def im2col(x: Tensor, kh: int, kw: int, out: Tensor | None = None) -> Tensor:
    """Patch matrix [n*oh*ow, kh*kw*c] of all valid kh x kw windows of NHWC ``x``.

    Patch elements are ordered (kernel row, kernel col, channel), which is
    exactly a row-major flattening of [kh,kw,cin] kernels.
    """
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    if out is None:
        out = np.empty((n * oh * ow, kh * kw * c), x.dtype)
    _kernels.im2col_into(x.reshape(n, h, w * c), c, kh, kw, out)
    return out


def kernels_as_matrix(kernels: Tensor) -> Tensor:
    """[kh,kw,cin,cout] -> [kh*kw*cin, cout]; row-major, so this is a view."""
    kh, kw, cin, cout = kernels.shape
    return kernels.reshape(kh * kw * cin, cout)


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor,
                   stride: int = 1, padding: str = "valid", *,
                   cols_buf: Tensor | None = None, out_buf: Tensor | None = None,
                   return_cols: bool = False):
    """Stride-1 cross-correlation of NHWC input with [kh,kw,cin,cout] kernels.

    ``padding`` is "valid" (output shrinks by kernel-1) or "same" (zero
    borders keep the spatial size). With ``return_cols`` the internal patch
    matrix is returned too, for reuse in the backward pass.
    """
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d needs NHWC input and [kh,kw,cin,cout] kernels, "
                         f"got {x.shape} and {kernels.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernels expect {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    if padding == "valid" and (kh > h or kw > w):
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = conv_output_hw(h, w, kh, kw, padding)
    xp = x if padding == "valid" else pad_same(x, kh, kw)
    cols = im2col(xp, kh, kw, out=cols_buf)
    if out_buf is None:
        out_buf = np.empty((n, oh, ow, cout), x.dtype)
    flat = out_buf.reshape(n * oh * ow, cout)
    np.matmul(cols, kernels_as_matrix(kernels), out=flat)
    flat += bias
    return (out_buf, cols) if return_cols else out_buf


class ArgmaxMap:
    """Winner positions of a maxpool forward, consumed by the backward pass."""

    __slots__ = ("input_shape", "flat_index")

    def __init__(self, input_shape: tuple, flat_index: np.ndarray):
        self.input_shape = tuple(input_shape)
        self.flat_index = flat_index


def maxpool2d_forward(x: Tensor, *, want_argmax: bool = True,
                      out_buf: Tensor | None = None,
                      idx_buf: np.ndarray | None = None):
    """2x2/stride-2 max pooling of NHWC input; trailing odd row/col is dropped.

    The argmax map records the flat index (into ``x``) of every window
    winner; ties go to the first element in row-major window order. Pass
    ``want_argmax=False`` on inference-only paths to skip that bookkeeping.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool needs NHWC input, got shape {x.shape}")
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"spatial extents must be >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    if out_buf is None:
        out_buf = np.empty((n, oh, ow, c), x.dtype)
    if not want_argmax:
        _kernels.maxpool_out_only(x, out_buf)
        return out_buf, None
    if idx_buf is None:
        idx_buf = np.empty((n, oh, ow, c), np.int64)
    _kernels.maxpool_into(x, out_buf, idx_buf)
    return out_buf, ArgmaxMap((n, h, w, c), idx_buf)


def _require_finite(x: Tensor, kind: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{kind} received non-finite input")


def relu(x: Tensor, check: bool = True) -> Tensor:
    if check:
        _require_finite(x, "relu")
    return np.maximum(x, 0)


def sigmoid(x: Tensor, check: bool = True) -> Tensor:
    if check:
        _require_finite(x, "sigmoid")
    # exp may overflow for very negative x; 1/(1+inf) saturates to exactly 0.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softmax(x: Tensor, check: bool = True) -> Tensor:
    """Exp-normalize over the last axis with the max-subtraction trick."""
    if check:
        _require_finite(x, "softmax")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= np.sum(shifted, axis=-1, keepdims=True)
    return shifted


def activation_forward(kind: str, x: Tensor, check: bool = True) -> Tensor:
    if kind == "relu":
        return relu(x, check)
    if kind == "sigmoid":
        return sigmoid(x, check)
    if kind == "softmax":
        return softmax(x, check)
    raise ValueError(f"unknown activation {kind!r}")
