"""Hot memory-movement loops behind the conv and pool kernels.

These are jitted with numba when it is available (pure data movement: patch
gathering, scatter-adds, window argmax); the numpy fallbacks compute the
same bytes. All functions write into caller-provided buffers so the training
loop can recycle allocations. Parallel loops never share output elements,
so results are deterministic and identical across thread counts.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


@njit(parallel=True, cache=True)
def im2col_into(xf, c, kh, kw, cols):
    """Gathers valid kh x kw patches of xf=[n,h,w*c] into cols, (kh,kw,c) order."""
    n, h, wc = xf.shape
    w = wc // c
    oh, ow = h - kh + 1, w - kw + 1
    run = kw * c
    for ni in prange(n):
        for i in range(oh):
            base = (ni * oh + i) * ow
            for j in range(ow):
                row = base + j
                for p in range(kh):
                    cols[row, p * run:(p + 1) * run] = xf[ni, i + p, j * c:j * c + run]


@njit(parallel=True, cache=True)
def col2im_into(d_cols, c, kh, kw, dxf):
    """Scatter-adds patch gradients back onto dxf=[n,h,w*c] (zeroed first)."""
    n, h, wc = dxf.shape
    w = wc // c
    oh, ow = h - kh + 1, w - kw + 1
    run = kw * c
    for ni in prange(n):
        dxf[ni] = 0.0
        for i in range(oh):
            base = (ni * oh + i) * ow
            for j in range(ow):
                row = base + j
                for p in range(kh):
                    dxf[ni, i + p, j * c:j * c + run] += d_cols[row, p * run:(p + 1) * run]


@njit(parallel=True, cache=True)
def maxpool_into(x, out, idx):
    """2x2/2 max pooling with flat winner indices; first window element wins ties."""
    n, h, w, c = x.shape
    oh, ow = out.shape[1], out.shape[2]
    for ni in prange(n):
        for i in range(oh):
            for j in range(ow):
                for cc in range(c):
                    bi, bj = 2 * i, 2 * j
                    best = x[ni, bi, bj, cc]
                    v = x[ni, 2 * i, 2 * j + 1, cc]
                    if v > best:
                        best, bi, bj = v, 2 * i, 2 * j + 1
                    v = x[ni, 2 * i + 1, 2 * j, cc]
                    if v > best:
                        best, bi, bj = v, 2 * i + 1, 2 * j
                    v = x[ni, 2 * i + 1, 2 * j + 1, cc]
                    if v > best:
                        best, bi, bj = v, 2 * i + 1, 2 * j + 1
                    out[ni, i, j, cc] = best
                    idx[ni, i, j, cc] = ((ni * h + bi) * w + bj) * c + cc


@njit(parallel=True, cache=True)
def maxpool_out_only(x, out):
    """Pooling without the argmax bookkeeping, for inference-only passes."""
    n, h, w, c = x.shape
    oh, ow = out.shape[1], out.shape[2]
    for ni in prange(n):
        for i in range(oh):
            for j in range(ow):
                for cc in range(c):
                    best = x[ni, 2 * i, 2 * j, cc]
                    v = x[ni, 2 * i, 2 * j + 1, cc]
                    if v > best:
                        best = v
                    v = x[ni, 2 * i + 1, 2 * j, cc]
                    if v > best:
                        best = v
                    v = x[ni, 2 * i + 1, 2 * j + 1, cc]
                    if v > best:
                        best = v
                    out[ni, i, j, cc] = best


@njit(parallel=True, cache=True)
def maxpool_scatter_into(idx_flat, d_out_flat, dx_flat):
    """Routes upstream gradients to their winners; winner indices are unique."""
    dx_flat[:] = 0.0
    for k in prange(idx_flat.shape[0]):
        dx_flat[idx_flat[k]] = d_out_flat[k]


if not HAVE_NUMBA:  # numpy fallbacks computing identical bytes

    from numpy.lib.stride_tricks import sliding_window_view

    def im2col_into(xf, c, kh, kw, cols):  # noqa: F811
        n, h, wc = xf.shape
        w = wc // c
        x = xf.reshape(n, h, w, c)
        oh, ow = h - kh + 1, w - kw + 1
        windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
        np.copyto(cols.reshape(n, oh, ow, kh, kw, c),
                  windows.transpose(0, 1, 2, 4, 5, 3))

    def col2im_into(d_cols, c, kh, kw, dxf):  # noqa: F811
        n, h, wc = dxf.shape
        w = wc // c
        oh, ow = h - kh + 1, w - kw + 1
        dxf[:] = 0.0
        dx = dxf.reshape(n, h, w, c)
        dc = d_cols.reshape(n, oh, ow, kh, kw, c)
        for p in range(kh):
            for q in range(kw):
                dx[:, p:p + oh, q:q + ow, :] += dc[:, :, :, p, q, :]

    def _pool_views(x, oh, ow):
        return (x[:, 0:2 * oh:2, 0:2 * ow:2, :], x[:, 0:2 * oh:2, 1:2 * ow:2, :],
                x[:, 1:2 * oh:2, 0:2 * ow:2, :], x[:, 1:2 * oh:2, 1:2 * ow:2, :])

    def maxpool_into(x, out, idx):  # noqa: F811
        n, h, w, c = x.shape
        oh, ow = out.shape[1], out.shape[2]
        stacked = np.stack(_pool_views(x, oh, ow))
        which = np.argmax(stacked, axis=0)
        np.copyto(out, np.max(stacked, axis=0))
        ni = np.arange(n, dtype=np.int64).reshape(n, 1, 1, 1)
        hi = 2 * np.arange(oh, dtype=np.int64).reshape(1, oh, 1, 1) + which // 2
        wi = 2 * np.arange(ow, dtype=np.int64).reshape(1, 1, ow, 1) + which % 2
        ci = np.arange(c, dtype=np.int64).reshape(1, 1, 1, c)
        np.copyto(idx, ((ni * h + hi) * w + wi) * c + ci)

    def maxpool_out_only(x, out):  # noqa: F811
        oh, ow = out.shape[1], out.shape[2]
        a, b, d, e = _pool_views(x, oh, ow)
        np.copyto(out, np.maximum(np.maximum(a, b), np.maximum(d, e)))

    def maxpool_scatter_into(idx_flat, d_out_flat, dx_flat):  # noqa: F811
        dx_flat[:] = 0.0
        dx_flat[idx_flat] = d_out_flat
