"""Minimal dense-tensor compute engine with reverse-mode autodiff.

Covers exactly the ops needed to train small MLPs/CNNs in float32:
affine/dense, 2-d cross-correlation, batch norm, global average pooling,
softmax cross-entropy, plus SGD with Nesterov momentum and a
warmup+cosine learning-rate schedule. Custom nodes (straight-through
estimators for the quantizers) are built on the same Tensor graph, see
`bitflex.quant`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Node in a dynamically built computation graph.

    Holds float32 data in row-major order. `backward()` runs reverse-mode
    accumulation from a scalar node; leaf gradients accumulate across
    repeated backward calls until `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss node")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a weight-decay group tag.

    decay_group is one of {"weights", "clipping_levels", "bn_affine", "none"};
    the optimizer applies L2 decay only to "weights" and "clipping_levels".
    """

    __slots__ = ("decay_group", "name")

    def __init__(self, data, decay_group: str = "none", name: str = ""):
        super().__init__(data, requires_grad=True)
        self.decay_group = decay_group
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, group={self.decay_group})"


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# ops


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: y[B,O] = x[B,I] @ w[I,O] (+ b[O])."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"dense: got x{x.data.shape} @ w{w.data.shape}")
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"dense: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make_node(y, parents, backward)


def _im2col(xp: np.ndarray, R: int, S: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, C = xp.shape[:2]
    cols = np.empty((B, C, R, S, Ho, Wo), dtype=np.float32)
    for r in range(R):
        for s in range(S):
            cols[:, :, r, s] = xp[:, :, r : r + stride * Ho : stride, s : s + stride * Wo : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: [B,C,H,W], w: [K,C,R,S] -> [B,K,H',W'] with
    H' = (H + 2*pad - R)//stride + 1.
    """
    B, C, H, W = x.data.shape
    K, Cw, R, S = w.data.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if R > H + 2 * pad or S > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {R}x{S} larger than padded input")
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, R, S, stride, Ho, Wo)
    # single GEMM: (K, C*R*S) @ (C*R*S, B*Ho*Wo)
    xm = cols.transpose(1, 2, 3, 0, 4, 5).reshape(C * R * S, B * Ho * Wo)
    wm = w.data.reshape(K, C * R * S)
    y = (wm @ xm).reshape(K, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(K, B * Ho * Wo)
        if w.requires_grad:
            w.accumulate_grad((gm @ xm.T).reshape(w.data.shape))
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(C, R, S, B, Ho, Wo).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float32)
            for r in range(R):
                for s in range(S):
                    gxp[:, :, r : r + stride * Ho : stride, s : s + stride * Wo : stride] += gcols[:, :, r, s]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            x.accumulate_grad(gx)

    return _make_node(np.ascontiguousarray(y), (x, w), backward)


class BNState:
    """Running moments of one batch-norm instance (one layer, one bit-width).

    Normalization uses population (biased) variance; running stats follow an
    exponential moving average in train mode, or plain stream averages while
    `calibrating` is set (used by BN recalibration).
    """

    __slots__ = ("running_mean", "running_var", "momentum", "eps",
                 "calibrating", "_acc_mean", "_acc_var", "_acc_count")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.calibrating = False
        self._acc_mean = None
        self._acc_var = None
        self._acc_count = 0

    def begin_calibration(self):
        self.calibrating = True
        self._acc_mean = np.zeros_like(self.running_mean)
        self._acc_var = np.zeros_like(self.running_var)
        self._acc_count = 0

    def end_calibration(self):
        if self._acc_count > 0:
            self.running_mean = self._acc_mean / self._acc_count
            self.running_var = self._acc_var / self._acc_count
        self.calibrating = False
        self._acc_mean = self._acc_var = None
        self._acc_count = 0

    def observe(self, mean: np.ndarray, var: np.ndarray):
        if self.calibrating:
            self._acc_mean += mean
            self._acc_var += var
            self._acc_count += 1
        else:
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Batch normalization over (B,) or (B,H,W) per channel.

    Train mode normalizes by batch moments and updates `state`; eval mode
    normalizes by the running moments.
    """
    nd = x.data.ndim
    if nd == 2:
        axes, bshape = (0,), (1, -1)
    elif nd == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batch_norm: affine shape mismatch for {C} channels")

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.observe(mean, var)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = gxhat.mean(axis=axes).reshape(bshape)
                mx = (gxhat * xhat).mean(axis=axes).reshape(bshape)
                gx = inv_std.reshape(bshape) * (gxhat - m - xhat * mx)
            else:
                gx = gxhat * inv_std.reshape(bshape)
            x.accumulate_grad(gx.astype(np.float32))

    return _make_node(y.astype(np.float32), (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C], mean over the spatial grid."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    y = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape))

    return _make_node(y, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    B = x.data.shape[0]
    y = x.data.reshape(B, -1)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _make_node(y, (x,), backward)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; gradient is (softmax - onehot)/B."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_xent: expected 2-d logits, got {z.shape}")
    B, C = z.shape
    labels = np.asarray(labels)
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ShapeError("softmax_xent: labels must be ints in [0, C)")
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(zs[np.arange(B), labels] - np.log(e.sum(axis=1)))
    loss = np.float32(nll.mean())

    def backward(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[np.arange(B), labels] -= 1.0
            logits.accumulate_grad(gl * (g / B))

    return _make_node(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# optimization


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Per-iteration learning rate: linear warmup then cosine annealing to 0.

    Warmup ramps from base_lr/warmup_steps at step 0 up to base_lr; the
    cosine phase runs once (no restart).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with Nesterov momentum (no damping) and grouped weight decay.

    Decay applies only to parameters whose decay_group is in `decay_groups`
    (defaults: weights and clipping levels; batch-norm affine and biases
    stay decay-free).
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0,
                 nesterov: bool = True, decay_groups=("weights", "clipping_levels")):
        self.params: list[Parameter] = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.decay_groups = frozenset(decay_groups)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.decay_group in self.decay_groups:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data -= np.float32(lr) * update
