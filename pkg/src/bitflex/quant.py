"""Quantization math: unit-interval quantizers, weight/activation fake
quantization with straight-through gradients, variance rescaling for the
final classifier layer, and exact integer bit-shift conversion between
bit-widths.

Two unit quantizers on [0,1] are supported:

* original:  q_k(x) = round(a*x)/a              with a = 2^k - 1
* modified:  q_k(x) = min(floor(ahat*x), ahat-1)/ahat   with ahat = 2^k

The modified scheme's codes convert exactly from a higher bit-width to a
lower one by a right shift: floor(2^a*x) >> (a-b) == floor(2^b*x), and
the clamp branch maps 2^a - 1 to 2^b - 1 consistently. The original
scheme has no such property, so adaptive storage under it keeps the
real-valued master weights instead of integer codes.
"""

from __future__ import annotations

import enum

import numpy as np

from .engine import Parameter, Tensor, _make_node
from .errors import ContractError

BIT_MIN = 2
BIT_MAX = 8
ALPHA_MIN = 1e-2


class QuantScheme(enum.Enum):
    ORIGINAL = "original"
    MODIFIED = "modified"

    @classmethod
    def parse(cls, value) -> "QuantScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(
                f"unknown quantization scheme {value!r}; expected 'original' or 'modified'"
            ) from None


def check_bits(k: int, name: str = "k") -> int:
    k = int(k)
    if not BIT_MIN <= k <= BIT_MAX:
        raise ContractError(f"{name}={k} outside supported bit-width range [{BIT_MIN}, {BIT_MAX}]")
    return k


def _check_unit_range(x: np.ndarray):
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractError("unit quantizer input outside [0, 1]")


def quantize_unit_original(x, k: int):
    """Round-to-nearest onto the (2^k - 1)-denominator grid over [0,1].

    Ties round half away from zero (inputs are non-negative, so this is
    floor(v + 0.5)).
    """
    k = check_bits(k)
    xv = np.asarray(x, dtype=np.float64)
    _check_unit_range(xv)
    a = float(2**k - 1)
    q = np.floor(a * xv + 0.5) / a
    return q if isinstance(x, np.ndarray) else float(q)


def quantize_unit_modified(x, k: int):
    """Floor onto the 2^k-denominator grid over [0,1); the top input
    saturates at (2^k - 1)/2^k."""
    k = check_bits(k)
    xv = np.asarray(x, dtype=np.float64)
    _check_unit_range(xv)
    ahat = float(2**k)
    q = np.minimum(np.floor(ahat * xv), ahat - 1.0) / ahat
    return q if isinstance(x, np.ndarray) else float(q)


def quantize_unit(x, k: int, scheme: QuantScheme):
    scheme = QuantScheme.parse(scheme)
    if scheme is QuantScheme.ORIGINAL:
        return quantize_unit_original(x, k)
    return quantize_unit_modified(x, k)


def clip_activation(x, alpha: float):
    """Clip to [0, alpha] via the half-absolute-difference identity
    0.5*(|x| - |x - alpha| + alpha)."""
    if alpha <= 0:
        raise ContractError(f"clipping level must be positive, got {alpha}")
    xv = np.asarray(x, dtype=np.float64)
    y = 0.5 * (np.abs(xv) - np.abs(xv - alpha) + alpha)
    return y if isinstance(x, np.ndarray) else float(y)


def clipped_quantize(x, alpha: float, k: int, scheme: QuantScheme):
    """Forward value of the clipped activation quantizer:
    alpha * q_k(clip(x, 0, alpha) / alpha). Pure numpy (no gradient)."""
    if alpha <= 0:
        raise ContractError(f"clipping level must be positive, got {alpha}")
    xv = np.asarray(x, dtype=np.float64)
    xt = np.clip(xv, 0.0, alpha)
    q = quantize_unit(np.clip(xt / alpha, 0.0, 1.0), k, scheme)
    y = alpha * q
    return y if isinstance(x, np.ndarray) else float(y)


# ---------------------------------------------------------------------------
# Tensor-graph ops (straight-through estimators)


def quantize_weight(w: Tensor, k: int, scheme: QuantScheme) -> Tensor:
    """Fake-quantize weights to k bits over [-1, 1].

    Forward: clamp to [-1,1], map to [0,1] by (w+1)/2, unit-quantize,
    map back by 2q-1. Backward: straight-through — identity where
    |w| <= 1, zero outside the clamp interval.
    """
    k = check_bits(k)
    scheme = QuantScheme.parse(scheme)
    wd = w.data.astype(np.float64)
    wc = np.clip(wd, -1.0, 1.0)
    q = quantize_unit((wc + 1.0) * 0.5, k, scheme)
    out = 2.0 * q - 1.0
    inside = np.abs(w.data) <= 1.0

    def backward(g):
        if w.requires_grad:
            w.accumulate_grad(np.where(inside, g, 0.0).astype(np.float32))

    return _make_node(out.astype(np.float32), (w,), backward)


def variance_rescale(w: Tensor, n_out: int) -> Tensor:
    """Scale w by 1/sqrt(n_out * VAR[w]) so that n_out * VAR = 1.

    VAR is the population variance over all elements. The scale is
    treated as a constant in the backward pass and is recomputed from
    the current values on every call. Intended for the quantized weights
    of the final linear layer, which has no batch norm to absorb scale.
    """
    n_out = int(n_out)
    if n_out <= 0:
        raise ContractError(f"n_out must be positive, got {n_out}")
    var = float(np.var(w.data.astype(np.float64)))
    if var <= 0.0:
        raise ContractError("variance rescale of a zero-variance tensor (degenerate layer)")
    scale = np.float32(1.0 / np.sqrt(n_out * var))

    def backward(g):
        if w.requires_grad:
            w.accumulate_grad(g * scale)

    return _make_node(w.data * scale, (w,), backward)


def quantize_activation(x: Tensor, alpha: Parameter, k: int,
                        scheme: QuantScheme, quantize: bool = True) -> Tensor:
    """Clipped activation with learnable clipping level, optionally
    quantized: y = alpha * q_k(clip(x, 0, alpha)/alpha).

    Straight-through backward: dy/dx = 1 for 0 < x < alpha else 0;
    dy/dalpha = 1 where x >= alpha else 0, summed over elements. With
    quantize=False the forward is the bare clip (used for full-precision
    training); the gradients are identical in both modes.

    The clipping level is projected in place to at least ALPHA_MIN
    before use, keeping it positive under weight decay.
    """
    k = check_bits(k)
    scheme = QuantScheme.parse(scheme)
    if alpha.data.size != 1:
        raise ContractError("clipping level must be a scalar parameter")
    np.maximum(alpha.data, ALPHA_MIN, out=alpha.data)
    a = float(alpha.data.ravel()[0])

    xt = np.clip(x.data.astype(np.float64), 0.0, a)
    if quantize:
        y = a * quantize_unit(np.clip(xt / a, 0.0, 1.0), k, scheme)
    else:
        y = xt
    interior = (x.data > 0.0) & (x.data < a)
    saturated = x.data >= a

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(interior, g, 0.0).astype(np.float32))
        if alpha.requires_grad:
            alpha.accumulate_grad(
                np.asarray(g[saturated].sum(), dtype=np.float32).reshape(alpha.data.shape)
            )

    return _make_node(y.astype(np.float32), (x, alpha), backward)


# ---------------------------------------------------------------------------
# integer codes (modified scheme only)


def weight_encode(wq: np.ndarray, k: int) -> np.ndarray:
    """Map modified-scheme quantized weights to their integer level codes
    in [0, 2^k): wq = (2c - 2^k)/2^k  =>  c = (wq + 1)/2 * 2^k."""
    k = check_bits(k)
    ahat = 2**k
    wv = np.asarray(wq, dtype=np.float64)
    c = np.rint((wv + 1.0) * 0.5 * ahat)
    if c.size and (c.min() < 0 or c.max() > ahat - 1):
        raise ContractError(f"weight values outside the {k}-bit modified grid")
    codes = c.astype(np.int64)
    if not np.array_equal((2.0 * codes - ahat) / ahat, wv):
        raise ContractError(f"weight values not on the {k}-bit modified grid")
    return codes.astype(np.uint8)


def weight_decode(codes: np.ndarray, k: int) -> np.ndarray:
    """Inverse of weight_encode: codes in [0, 2^k) to float32 weights."""
    k = check_bits(k)
    ahat = 2**k
    cv = np.asarray(codes)
    if not np.issubdtype(cv.dtype, np.integer):
        raise ContractError("weight codes must be integers")
    if cv.size and (cv.min() < 0 or cv.max() > ahat - 1):
        raise ContractError(f"weight codes outside [0, 2^{k})")
    return ((2.0 * cv.astype(np.float64) - ahat) / ahat).astype(np.float32)


def downshift_codes(codes: np.ndarray, a: int, b: int) -> np.ndarray:
    """Convert k=a modified-scheme codes to k=b by an arithmetic right
    shift of (a - b) bits. Exact: floor(2^a*x) >> (a-b) == floor(2^b*x),
    and the clamp branch maps 2^a - 1 to 2^b - 1."""
    a = check_bits(a, "a")
    b = check_bits(b, "b")
    if a <= b:
        raise ContractError(f"downshift requires a > b, got a={a}, b={b}")
    cv = np.asarray(codes)
    if not np.issubdtype(cv.dtype, np.integer):
        raise ContractError("weight codes must be integers")
    if cv.size and (cv.min() < 0 or cv.max() > 2**a - 1):
        raise ContractError(f"codes outside [0, 2^{a})")
    return np.right_shift(cv.astype(np.uint8), a - b)
