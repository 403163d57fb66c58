"""Independent reference implementations used to verify the library.

Everything here is deliberately naive (loops, direct formulas) and shares
no code with bitflex. These oracles define expected values; the library
must match them, never the other way around.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# linear algebra


def matmul_3loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv2d_6loop(x, w, stride=1, pad=0):
    """Direct cross-correlation, one output element at a time."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    K, _, R, S = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for b in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for r in range(R):
                            for s in range(S):
                                acc += xp[b, c, i * stride + r, j * stride + s] * w[k, c, r, s]
                    out[b, k, i, j] = acc
    return out


def batchnorm_2pass(x, gamma, beta, eps=1e-5):
    """Two-pass per-channel moments over batch (+spatial) axes."""
    x = np.asarray(x, dtype=np.float64)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    mean = x.mean(axis=axes)
    var = ((x - mean.reshape(shape)) ** 2).mean(axis=axes)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return np.asarray(gamma).reshape(shape) * xhat + np.asarray(beta).reshape(shape), mean, var


def softmax_xent_direct(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    losses = []
    for row, lbl in zip(logits, labels):
        p = np.exp(row) / np.exp(row).sum()
        losses.append(-math.log(p[lbl]))
    return float(np.mean(losses))


def sgd_nesterov_sequence(p0, grads, lr, momentum, weight_decay=0.0):
    """Scalar Nesterov recursion: v <- mu v + g; p <- p - lr (g + mu v)."""
    p, v = float(p0), 0.0
    for g in grads:
        g = g + weight_decay * p
        v = momentum * v + g
        p -= lr * (g + momentum * v)
    return p


# ---------------------------------------------------------------------------
# quantizers


def quant_original(x: float, k: int) -> float:
    a = 2**k - 1
    return math.floor(a * x + 0.5) / a  # round half away from zero for x >= 0


def quant_modified(x: float, k: int) -> float:
    ahat = 2**k
    return min(math.floor(ahat * x), ahat - 1) / ahat


def weight_chain(w: float, k: int, scheme: str) -> float:
    wc = min(max(w, -1.0), 1.0)
    x = (wc + 1.0) / 2.0
    q = quant_original(x, k) if scheme == "original" else quant_modified(x, k)
    return 2.0 * q - 1.0


def pact_chain(x: float, alpha: float, k: int, scheme: str) -> float:
    xt = min(max(x, 0.0), alpha)
    q = quant_original(xt / alpha, k) if scheme == "original" else quant_modified(xt / alpha, k)
    return alpha * q


def floor_shift_lhs(x: float, a: int, b: int) -> int:
    return math.floor((2**a) * x) >> (a - b)


def floor_shift_rhs(x: float, b: int) -> int:
    return math.floor((2**b) * x)


# ---------------------------------------------------------------------------
# bit packing


def pack_bits_naive(codes, k: int) -> bytes:
    """k-bit fields, LSB first within each byte."""
    out = bytearray()
    acc = 0
    nbits = 0
    for c in codes:
        acc |= int(c) << nbits
        nbits += k
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient(f, arrays: list[np.ndarray], coords: list[tuple[int, int]], h: float = 1e-3):
    """Central finite differences of scalar f(arrays) at the given
    (array index, flat coordinate) probes."""
    grads = []
    for ai, ci in coords:
        arr = arrays[ai]
        orig = arr.flat[ci]
        arr.flat[ci] = orig + h
        f_plus = f()
        arr.flat[ci] = orig - h
        f_minus = f()
        arr.flat[ci] = orig
        grads.append((f_plus - f_minus) / (2.0 * h))
    return np.array(grads)


def rel_err(approx, exact, floor: float = 1e-4) -> float:
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), floor)))
