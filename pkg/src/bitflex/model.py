"""Adaptive-precision model container.

One set of shared real-valued master weights serves every registered
bit-width. Switching the active bit-width changes only which quantizer
step, which batch-norm set, and which clipping-level column the forward
pass uses — never the weights themselves. Batch-norm sets and clipping
levels can each be either shared across bit-widths or switchable
(privatized per bit-width).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import BNState, Parameter, Tensor
from .errors import ConfigError, ContractError
from .quant import (
    QuantScheme,
    check_bits,
    quantize_activation,
    quantize_weight,
    variance_rescale,
    weight_encode,
)

SHARED = "shared"
SWITCHABLE = "switchable"


@dataclass(frozen=True)
class LayerSpec:
    """One weight layer plus its attached normalization/activation."""

    name: str
    kind: str               # "conv" | "dense"
    in_dim: int             # channels (conv) or features (dense)
    out_dim: int
    kernel: int = 0         # conv only
    stride: int = 1
    pad: int = 0
    bn: bool = False
    act: bool = False       # clipped-quantized activation after this layer
    bias: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ConfigError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError(f"layer {self.name}: non-positive dimensions")
        if self.kind == "conv" and self.kernel <= 0:
            raise ConfigError(f"layer {self.name}: conv needs a kernel size")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_dim, self.in_dim, self.kernel, self.kernel)
        return (self.in_dim, self.out_dim)

    @property
    def fan_in(self) -> int:
        if self.kind == "conv":
            return self.in_dim * self.kernel * self.kernel
        return self.in_dim

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))


@dataclass(frozen=True)
class Architecture:
    """Ordered layer stack with a fixed input shape (C, H, W)."""

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    pool_before_dense: bool = False  # global average pool at the conv->dense seam

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ConfigError("architecture needs at least two layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate layer names")
        last = self.layers[-1]
        if last.kind != "dense" or last.bn or last.act or not last.bias:
            raise ConfigError("final layer must be a bias-only dense classifier "
                              "(no batch norm, unclipped output)")
        for spec in self.layers[:-1]:
            if spec.bias:
                raise ConfigError(f"layer {spec.name}: hidden layers are batch-normalized "
                                  "and bias-free")

    def role(self, idx: int) -> str:
        if idx == 0:
            return "first"
        if idx == len(self.layers) - 1:
            return "last"
        return "interior"

    @property
    def clip_sites(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.layers if l.act)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "pool_before_dense": self.pool_before_dense,
            "layers": [
                {
                    "name": l.name, "kind": l.kind, "in_dim": l.in_dim,
                    "out_dim": l.out_dim, "kernel": l.kernel, "stride": l.stride,
                    "pad": l.pad, "bn": l.bn, "act": l.act, "bias": l.bias,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        try:
            layers = tuple(LayerSpec(**ld) for ld in d["layers"])
            return cls(name=d["name"], input_shape=tuple(d["input_shape"]),
                       layers=layers, pool_before_dense=d["pool_before_dense"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed architecture description: {e}") from e


def cnn16() -> Architecture:
    """Small CNN for 1x16x16 inputs: three 3x3 convs (16, 32 stride-2, 32),
    each BN + clipped activation, global average pool, 10-way classifier."""
    return Architecture(
        name="cnn16",
        input_shape=(1, 16, 16),
        pool_before_dense=True,
        layers=(
            LayerSpec("conv1", "conv", 1, 16, kernel=3, stride=1, pad=1, bn=True, act=True),
            LayerSpec("conv2", "conv", 16, 32, kernel=3, stride=2, pad=1, bn=True, act=True),
            LayerSpec("conv3", "conv", 32, 32, kernel=3, stride=1, pad=1, bn=True, act=True),
            LayerSpec("fc", "dense", 32, 10, bias=True),
        ),
    )


def mlp784() -> Architecture:
    """784-256-256-10 multilayer perceptron for 1x28x28 inputs, hidden layers
    BN + clipped activation."""
    return Architecture(
        name="mlp784",
        input_shape=(1, 28, 28),
        pool_before_dense=False,
        layers=(
            LayerSpec("fc1", "dense", 784, 256, bn=True, act=True),
            LayerSpec("fc2", "dense", 256, 256, bn=True, act=True),
            LayerSpec("fc3", "dense", 256, 10, bias=True),
        ),
    )


ARCHITECTURES = {"cnn16": cnn16, "mlp784": mlp784}


def get_architecture(name: str) -> Architecture:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; "
                          f"available: {sorted(ARCHITECTURES)}") from None


@dataclass
class QuantConfig:
    """Quantization policy of an adaptive model.

    bit_widths is kept sorted descending (the order joint training visits
    them). First/last layer weights are always quantized at
    first_last_weight_bits; the input is treated as input_bits-wide
    fixed-point codes.
    """

    scheme: QuantScheme
    bit_widths: tuple[int, ...]
    active: int
    bn_mode: str = SWITCHABLE
    clip_mode: str = SHARED
    first_last_weight_bits: int = 8
    input_bits: int = 8
    alpha_init: float = 8.0

    def __post_init__(self):
        self.scheme = QuantScheme.parse(self.scheme)
        bits = tuple(sorted({check_bits(k) for k in self.bit_widths}, reverse=True))
        if not bits:
            raise ConfigError("bit_widths must be non-empty")
        self.bit_widths = bits
        self.active = check_bits(self.active)
        if self.active not in bits:
            raise ConfigError(f"active bit-width {self.active} not in {bits}")
        for mode_name, mode in (("bn_mode", self.bn_mode), ("clip_mode", self.clip_mode)):
            if mode not in (SHARED, SWITCHABLE):
                raise ConfigError(f"{mode_name} must be '{SHARED}' or '{SWITCHABLE}', got {mode!r}")
        check_bits(self.first_last_weight_bits, "first_last_weight_bits")
        check_bits(self.input_bits, "input_bits")
        if self.alpha_init <= 0:
            raise ConfigError("alpha_init must be positive")

    @property
    def max_bits(self) -> int:
        return self.bit_widths[0]

    @property
    def min_bits(self) -> int:
        return self.bit_widths[-1]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "bit_widths": list(self.bit_widths),
            "active": self.active,
            "bn_mode": self.bn_mode,
            "clip_mode": self.clip_mode,
            "first_last_weight_bits": self.first_last_weight_bits,
            "input_bits": self.input_bits,
            "alpha_init": self.alpha_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        try:
            return cls(scheme=d["scheme"], bit_widths=tuple(d["bit_widths"]),
                       active=d["active"], bn_mode=d["bn_mode"], clip_mode=d["clip_mode"],
                       first_last_weight_bits=d["first_last_weight_bits"],
                       input_bits=d["input_bits"], alpha_init=d["alpha_init"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed quantization config: {e}") from e


class _BNBlock:
    __slots__ = ("gamma", "beta", "state")

    def __init__(self, channels: int, tag: str):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32),
                               decay_group="bn_affine", name=f"{tag}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=np.float32),
                              decay_group="bn_affine", name=f"{tag}.beta")
        self.state = BNState(channels)


class AdaptiveModel:
    """Shared-weight model executable at any registered bit-width.

    `set_bitwidth` is O(1): it only changes which quantizer step size,
    batch-norm set, and clipping-level column subsequent forwards use.
    """

    def __init__(self, arch: Architecture, config: QuantConfig, seed: int = 0):
        self.arch = arch
        self.config = config
        self.quantize_enabled = True
        self.train_mode = False

        rng = np.random.default_rng(seed)
        self.weights: list[Parameter] = []
        self.biases: dict[str, Parameter] = {}
        self.bn: dict[str, dict[object, _BNBlock]] = {}
        self.clip: dict[str, dict[object, Parameter]] = {}

        bn_keys = self._keys(config.bn_mode)
        clip_keys = self._keys(config.clip_mode)
        for spec in arch.layers:
            std = np.sqrt(2.0 / spec.fan_in)
            w = rng.normal(0.0, std, size=spec.weight_shape).astype(np.float32)
            self.weights.append(Parameter(w, decay_group="weights", name=f"{spec.name}.weight"))
            if spec.bias:
                self.biases[spec.name] = Parameter(np.zeros(spec.out_dim, dtype=np.float32),
                                                   decay_group="none", name=f"{spec.name}.bias")
            if spec.bn:
                self.bn[spec.name] = {key: _BNBlock(spec.out_dim, f"{spec.name}.bn[{key}]")
                                      for key in bn_keys}
            if spec.act:
                self.clip[spec.name] = {
                    key: Parameter(np.full(1, config.alpha_init, dtype=np.float32),
                                   decay_group="clipping_levels",
                                   name=f"{spec.name}.alpha[{key}]")
                    for key in clip_keys
                }

    def _keys(self, mode: str) -> tuple:
        return self.config.bit_widths if mode == SWITCHABLE else (SHARED,)

    def _bn_key(self) -> object:
        return self.config.active if self.config.bn_mode == SWITCHABLE else SHARED

    def _clip_key(self) -> object:
        return self.config.active if self.config.clip_mode == SWITCHABLE else SHARED

    # -- bit-width switching ------------------------------------------------

    def set_bitwidth(self, k: int):
        k = int(k)
        if k not in self.config.bit_widths:
            raise ContractError(f"bit-width {k} not registered; "
                                f"model supports {list(self.config.bit_widths)}")
        self.config.active = k

    def weight_bits(self, idx: int) -> int:
        if self.arch.role(idx) in ("first", "last"):
            return self.config.first_last_weight_bits
        return self.config.active

    # -- forward ------------------------------------------------------------

    def _prepare_input(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x)
        if x.dtype != np.uint8:
            raise ContractError(f"model input must be uint8 codes, got {x.dtype}")
        C, H, W = self.arch.input_shape
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[1:] != (C, H, W):
            raise ContractError(f"input shape {x.shape} does not match {(C, H, W)} images")
        scale = 1.0 / float(2 ** self.config.input_bits)
        return Tensor(x.astype(np.float32) * scale)

    def forward(self, x: np.ndarray, collect: dict | None = None) -> Tensor:
        t = self._prepare_input(x)
        k = self.config.active
        scheme = self.config.scheme
        n_layers = len(self.arch.layers)
        for idx, spec in enumerate(self.arch.layers):
            if spec.kind == "dense" and t.data.ndim == 4:
                t = engine.global_avg_pool(t) if self.arch.pool_before_dense else engine.flatten(t)
            w: Tensor = self.weights[idx]
            if self.quantize_enabled:
                w = quantize_weight(w, self.weight_bits(idx), scheme)
            if idx == n_layers - 1:
                w = variance_rescale(w, spec.out_dim)
            if spec.kind == "conv":
                t = engine.conv2d(t, w, stride=spec.stride, pad=spec.pad)
            else:
                t = engine.dense(t, w, self.biases.get(spec.name))
            if spec.bn:
                block = self.bn[spec.name][self._bn_key()]
                t = engine.batch_norm(t, block.gamma, block.beta, block.state, self.train_mode)
            if spec.act:
                alpha = self.clip[spec.name][self._clip_key()]
                t = quantize_activation(t, alpha, k, scheme, quantize=self.quantize_enabled)
            if collect is not None:
                collect[spec.name] = t.data.copy()
        return t

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = list(self.weights)
        for spec in self.arch.layers:
            if spec.name in self.biases:
                params.append(self.biases[spec.name])
        for spec in self.arch.layers:
            for key in self._keys(self.config.bn_mode):
                if spec.name in self.bn:
                    block = self.bn[spec.name][key]
                    params.extend((block.gamma, block.beta))
        for spec in self.arch.layers:
            for key in self._keys(self.config.clip_mode):
                if spec.name in self.clip:
                    params.append(self.clip[spec.name][key])
        return params

    def bn_states_active(self) -> list[BNState]:
        key = self._bn_key()
        return [self.bn[name][key].state for name in self.bn]

    def clamp_weights(self):
        for w in self.weights:
            np.clip(w.data, -1.0, 1.0, out=w.data)

    # -- state dict -----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for spec, w in zip(self.arch.layers, self.weights):
            out[f"{spec.name}.weight"] = w.data.copy()
        for name, b in self.biases.items():
            out[f"{name}.bias"] = b.data.copy()
        for name, table in self.bn.items():
            for key, block in table.items():
                prefix = f"{name}.bn.{key}"
                out[f"{prefix}.gamma"] = block.gamma.data.copy()
                out[f"{prefix}.beta"] = block.beta.data.copy()
                out[f"{prefix}.running_mean"] = block.state.running_mean.copy()
                out[f"{prefix}.running_var"] = block.state.running_var.copy()
        for name, table in self.clip.items():
            for key, alpha in table.items():
                out[f"{name}.alpha.{key}"] = alpha.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], broadcast_shared: bool = False):
        """Restore parameters/statistics.

        With broadcast_shared=True, entries keyed `shared` in `state` fill
        every per-bit column of a switchable table (used to seed switchable
        models from a shared-mode checkpoint).
        """

        def fetch(key_exact: str, key_shared: str) -> np.ndarray:
            if key_exact in state:
                return state[key_exact]
            if broadcast_shared and key_shared in state:
                return state[key_shared]
            raise ContractError(f"state dict missing entry {key_exact!r}")

        def assign(dst: np.ndarray, src: np.ndarray, label: str):
            src = np.asarray(src, dtype=np.float32).reshape(np.shape(src))
            if tuple(src.shape) != tuple(dst.shape):
                raise ContractError(f"state entry {label}: shape {src.shape} != {dst.shape}")
            dst[...] = src

        for spec, w in zip(self.arch.layers, self.weights):
            assign(w.data, fetch(f"{spec.name}.weight", ""), f"{spec.name}.weight")
        for name, b in self.biases.items():
            assign(b.data, fetch(f"{name}.bias", ""), f"{name}.bias")
        for name, table in self.bn.items():
            for key, block in table.items():
                for field_name, dst in (
                    ("gamma", block.gamma.data), ("beta", block.beta.data),
                    ("running_mean", block.state.running_mean),
                    ("running_var", block.state.running_var),
                ):
                    src = fetch(f"{name}.bn.{key}.{field_name}",
                                f"{name}.bn.{SHARED}.{field_name}")
                    assign(dst, src, f"{name}.bn.{key}.{field_name}")
        for name, table in self.clip.items():
            for key, alpha in table.items():
                src = fetch(f"{name}.alpha.{key}", f"{name}.alpha.{SHARED}")
                assign(alpha.data, src, f"{name}.alpha.{key}")

    # -- integer export --------------------------------------------------------

    def export_max_bit_codes(self) -> dict[str, tuple[np.ndarray, int]]:
        """Per-layer integer weight codes at the widest stored precision
        (first/last layers at the fixed 8-bit policy, interior layers at
        max(bit_widths)). Lower bit-widths follow exactly by right shift."""
        if self.config.scheme is not QuantScheme.MODIFIED:
            raise ContractError("integer code export requires the modified scheme; "
                                "the original scheme must store real master weights")
        out: dict[str, tuple[np.ndarray, int]] = {}
        for idx, spec in enumerate(self.arch.layers):
            bits = (self.config.first_last_weight_bits
                    if self.arch.role(idx) in ("first", "last") else self.config.max_bits)
            with engine.no_grad():
                wq = quantize_weight(self.weights[idx], bits, self.config.scheme)
            out[spec.name] = (weight_encode(wq.data, bits), bits)
        return out
