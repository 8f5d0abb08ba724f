"""Shared oracles and the finite-difference gradient checker.

Everything here is deliberately independent of the library's fast paths:
naive loops and O(n^2) pair counting, used as ground truth by the tests.
"""

from __future__ import annotations

import numpy as np

from fuselab.tensor import Tensor


def conv2d_oracle(x, kernels, bias, stride=1, padding=0):
    """Quadruple-nested-loop cross correlation, (C,H,W) input."""
    c_out, c_in, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, i * stride + u, j * stride + v] * kernels[co, ci, u, v]
                out[co, i, j] = acc + bias[co]
    return out


def maxpool2d_oracle(x, window, stride):
    c, h, w = x.shape
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    out = np.zeros((c, h_out, w_out))
    for ci in range(c):
        for i in range(h_out):
            for j in range(w_out):
                out[ci, i, j] = x[ci, i * stride : i * stride + window, j * stride : j * stride + window].max()
    return out


def dense_oracle(x, weights, bias):
    m, n = weights.shape
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += weights[i, j] * x[j]
        out[i] = acc + bias[i]
    return out


def auc_oracle(scores, labels):
    """Brute-force Mann-Whitney pair counting; ties credited half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    num = 0
    for p in pos:
        for q in neg:
            if p > q:
                num += 2
            elif p == q:
                num += 1
    return num / (2 * len(pos) * len(neg))


def gradcheck(loss_fn, tensors, eps=1e-4, rel_tol=1e-4, abs_tol=1e-7):
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild its graph from the tensors' current data on each
    call and return a scalar Tensor. Returns the worst relative error seen.
    """
    loss = loss_fn()
    loss.backward()
    analytic = [np.array(t.grad, copy=True) for t in tensors]
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = grad.reshape(-1)[i]
            denom = max(abs(a), abs(numeric))
            if denom < 1e-6:
                assert abs(a - numeric) <= abs_tol, f"abs err {abs(a - numeric)} at index {i}"
            else:
                rel = abs(a - numeric) / denom
                worst = max(worst, rel)
                assert rel <= rel_tol, f"rel err {rel} at index {i}: analytic {a} vs numeric {numeric}"
    return worst


def leaf(rng, shape, lo=-1.0, hi=1.0):
    t = Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
    return t
