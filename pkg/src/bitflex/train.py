"""Training regimes over adaptive models.

All regimes share one epoch loop: per mini-batch, losses are computed at
each scheduled bit-width (largest first), gradients accumulate into the
shared parameters, and a single optimizer step follows. Individual
training is the one-bit case; joint training loops over all registered
bit-widths; progressive training chains full individual runs across
bit-widths in ascending or descending order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import SGD, lr_schedule, no_grad, softmax_xent
from .errors import ConfigError, ContractError, TrainingDiverged
from .model import AdaptiveModel

ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass
class TrainPlan:
    """Optimizer/schedule hyperparameters shared by every regime.

    The effective peak learning rate is base_lr * batch_size / 256; warmup
    ramps linearly per iteration across warmup_epochs, then a single cosine
    decays to zero.
    """

    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.05
    weight_decay: float = 4e-5
    momentum: float = 0.9
    warmup_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size positive")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive, weight_decay non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


def _check_data(x: np.ndarray, y: np.ndarray, label: str):
    if len(x) == 0:
        raise ContractError(f"{label}: empty data")
    if len(x) != len(y):
        raise ContractError(f"{label}: {len(x)} inputs vs {len(y)} labels")


def evaluate(model: AdaptiveModel, k: int, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) at active bit-width k, deterministic."""
    _check_data(x, y, "evaluate")
    model.set_bitwidth(k)
    model.train_mode = False
    hits = 0
    with no_grad():
        for lo in range(0, len(x), batch_size):
            logits = model.forward(x[lo : lo + batch_size])
            hits += int((logits.data.argmax(axis=1) == y[lo : lo + batch_size]).sum())
    return 100.0 * hits / len(x)


def _epoch_metrics(model, bits, train_probe, eval_data, batch_size):
    accs: dict[str, dict[int, float]] = {"train": {}, "val": {}}
    for k in bits:
        if len(train_probe[0]):
            accs["train"][k] = evaluate(model, k, *train_probe, batch_size)
        if eval_data is not None:
            accs["val"][k] = evaluate(model, k, *eval_data, batch_size)
    return accs


def _train(model: AdaptiveModel, x: np.ndarray, y: np.ndarray, plan: TrainPlan,
           bits: list[int], *, quantize: bool = True, clamp_each_step: bool = False,
           eval_data=None, regime: str = "", probe_size: int = 2000) -> list[dict]:
    """Shared epoch loop; returns one metrics record per epoch."""
    _check_data(x, y, "train")
    for k in bits:
        if k not in model.config.bit_widths:
            raise ContractError(f"bit-width {k} not registered in the model")
    if plan.epochs == 0:
        return []

    model.quantize_enabled = quantize
    opt = SGD(model.parameters(), momentum=plan.momentum, weight_decay=plan.weight_decay)
    steps_per_epoch = max(1, len(x) // plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch
    warmup_steps = max(1, plan.warmup_epochs * steps_per_epoch)
    rng = np.random.default_rng(plan.seed)
    probe = (x[:probe_size], y[:probe_size])

    records = []
    step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(len(x))
        model.train_mode = True
        epoch_loss = 0.0
        lr = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * plan.batch_size : (s + 1) * plan.batch_size]
            xb, yb = x[idx], y[idx]
            lr = lr_schedule(step, total_steps, warmup_steps, plan.peak_lr)
            opt.zero_grad()
            batch_loss = 0.0
            for k in bits:
                model.set_bitwidth(k)
                loss = softmax_xent(model.forward(xb), yb)
                loss.backward()
                batch_loss += loss.item()
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"{regime or 'training'}: non-finite loss at epoch {epoch}, step {s}")
            opt.step(lr)
            if clamp_each_step:
                model.clamp_weights()
            epoch_loss += batch_loss
            step += 1
        accs = _epoch_metrics(model, bits, probe, eval_data, plan.batch_size * 2)
        records.append({
            "regime": regime, "epoch": epoch, "lr": round(lr, 8),
            "loss": round(epoch_loss / steps_per_epoch, 6),
            "train_acc": {str(k): round(v, 4) for k, v in accs["train"].items()},
            "val_acc": {str(k): round(v, 4) for k, v in accs["val"].items()},
        })
    model.train_mode = False
    return records


def pretrain_fp(model: AdaptiveModel, x: np.ndarray, y: np.ndarray, plan: TrainPlan,
                eval_data=None, probe_size: int = 2000) -> list[dict]:
    """Full-precision pretraining: quantizers disabled (activations only
    clipped), master weights clamped to [-1, 1] after every step. The
    result seeds every quantized regime.

    Runs at the model's active bit-width, so on a switchable-clip model
    only the active bit's clipping column learns here; the idle columns
    keep their initialization until their bit-width is trained."""
    records = _train(model, x, y, plan, bits=[model.config.active], quantize=False,
                     clamp_each_step=True, eval_data=eval_data, regime="pretrain-fp",
                     probe_size=probe_size)
    model.quantize_enabled = True
    return records


def train_individual(model: AdaptiveModel, k: int, x: np.ndarray, y: np.ndarray,
                     plan: TrainPlan, eval_data=None, regime: str = "individual",
                     probe_size: int = 2000) -> list[dict]:
    """Quantization-aware training at one fixed bit-width."""
    model.set_bitwidth(k)
    return _train(model, x, y, plan, bits=[k], eval_data=eval_data,
                  regime=f"{regime}@{k}", probe_size=probe_size)


def train_joint(model: AdaptiveModel, bits, x: np.ndarray, y: np.ndarray,
                plan: TrainPlan, eval_data=None, probe_size: int = 2000) -> list[dict]:
    """Joint training across bit-widths with shared weights.

    Per batch: visit bits largest-first, sum losses by accumulating
    gradients, then take one optimizer step. Whether clipping levels are
    shared or per-bit follows the model's clip_mode.
    """
    bits = sorted({int(k) for k in bits}, reverse=True)
    regime = "joint-scl" if model.config.clip_mode == "switchable" else "joint-vanilla"
    return _train(model, x, y, plan, bits=bits, eval_data=eval_data, regime=regime,
                  probe_size=probe_size)


def train_progressive(model: AdaptiveModel, bits, direction: str, x: np.ndarray,
                      y: np.ndarray, plan: TrainPlan, eval_data=None,
                      probe_size: int = 2000):
    """Sequential per-bit training: a full individual-style run at each
    bit-width in the given order, reusing the full epoch budget per phase
    and carrying clipping levels over. Returns (records, checkpoints)
    where checkpoints maps bit-width -> state dict at the end of its phase.
    """
    if direction not in (ASCENDING, DESCENDING):
        raise ConfigError(f"direction must be '{ASCENDING}' or '{DESCENDING}', got {direction!r}")
    bits = sorted({int(k) for k in bits}, reverse=(direction == DESCENDING))
    records: list[dict] = []
    checkpoints: dict[int, dict] = {}
    for k in bits:
        records += train_individual(model, k, x, y, plan, eval_data=eval_data,
                                    regime=f"progressive-{direction[:3]}",
                                    probe_size=probe_size)
        checkpoints[k] = model.state_dict()
    return records, checkpoints


def calibrate_bn(model: AdaptiveModel, k: int, x: np.ndarray,
                 batch_size: int = 128, max_batches: int = 50) -> AdaptiveModel:
    """Recompute the running statistics of bit-width k's batch-norm set by
    streaming forward passes (plain averages of batch moments, weights and
    clipping levels frozen), then write them back."""
    if len(x) == 0:
        raise ContractError("calibration data is empty")
    model.set_bitwidth(k)
    states = model.bn_states_active()
    for st in states:
        st.begin_calibration()
    model.train_mode = True
    try:
        with no_grad():
            n_batches = min(max_batches, math.ceil(len(x) / batch_size))
            for b in range(n_batches):
                model.forward(x[b * batch_size : (b + 1) * batch_size])
    finally:
        for st in states:
            st.end_calibration()
        model.train_mode = False
    return model
