"""Independent oracles and checking utilities shared across the test suite.

The oracles here are deliberately naive (pure Python loops, closed forms)
so they share no code path with the kernels they check.
"""

from __future__ import annotations

import numpy as np

from signforge import models


def loop_matmul(a, b):
    """Naive triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def loop_conv2d(x, kernels, bias, padding="valid"):
    """Brute-force nested-loop cross-correlation, the conv reference."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernels.shape
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        xp = np.zeros((n, h + kh - 1, w + kw - 1, cin), dtype=np.float64)
        xp[:, top:top + h, left:left + w, :] = x
        oh, ow = h, w
    else:
        xp = np.asarray(x, dtype=np.float64)
        oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = float(bias[co])
                    for p in range(kh):
                        for q in range(kw):
                            for ci in range(cin):
                                acc += float(xp[ni, i + p, j + q, ci]) * \
                                       float(kernels[p, q, ci, co])
                    out[ni, i, j, co] = acc
    return out


def loop_maxpool(x):
    """Reference 2x2/2 pooling with first-occurrence tie breaking."""
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    out = np.zeros((n, oh, ow, c), dtype=x.dtype)
    winners = np.zeros((n, oh, ow, c), dtype=np.int64)
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                for cc in range(c):
                    best, bi, bj = None, 0, 0
                    for p in (0, 1):
                        for q in (0, 1):
                            v = x[ni, 2 * i + p, 2 * j + q, cc]
                            if best is None or v > best:
                                best, bi, bj = v, 2 * i + p, 2 * j + q
                    out[ni, i, j, cc] = best
                    winners[ni, i, j, cc] = ((ni * h + bi) * w + bj) * c + cc
    return out, winners


def max_rel_err(analytic, numeric):
    """Max absolute difference scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)


def fd_gradient(f, x, h):
    """Central-difference gradient of scalar f w.r.t. every element of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def toy_cnn_layers():
    """A miniature valid-padding conv stack with every CNN layer kind."""
    return [
        models.Conv2d("c1", 4), models.Activation("relu"), models.MaxPool(),
        models.Conv2d("c2", 6), models.Activation("relu"),
        models.Flatten(),
        models.Dense("d1", 10), models.Activation("relu"),
        models.Dense("d2", 5, init="glorot"), models.Activation("softmax"),
    ]


def toy_vgg_layers():
    """A miniature same-padding stack with the transfer model's layer kinds."""
    return [
        models.Conv2d("c1", 4, padding="same"), models.Activation("relu"),
        models.MaxPool(),
        models.Conv2d("c2", 6, padding="same"), models.Activation("relu"),
        models.MaxPool(),
        models.Flatten(),
        models.Dense("d1", 8, init="glorot"), models.Activation("sigmoid"),
        models.Dense("d2", 5, init="glorot"), models.Activation("softmax"),
    ]


def build_toy(layers, input_shape=(8, 8, 3), seed=3, dtype=np.float32):
    params = models._init_params(layers, input_shape, seed)
    model = models.Model("toy", layers, params, input_shape=input_shape)
    return model if dtype == np.float32 else model.astype(dtype)


def zeroed_cnn(num_classes=29):
    """The production CNN with all-zero weights: constant (uniform) logits."""
    model = models.build_asl_cnn(num_classes)
    for name in model.params:
        model.params[name] = np.zeros_like(model.params[name])
    return model
