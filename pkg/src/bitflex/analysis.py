"""Diagnostics and accounting: Monte-Carlo clipping-error sweeps,
clipping-level and variance profiles of trained models, and BitOPs /
model-size budgets computed from per-layer MAC manifests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import engine
from .errors import ContractError, ModelFileError
from .model import AdaptiveModel, Architecture
from .quant import QuantScheme, check_bits, clipped_quantize, quantize_weight

# ---------------------------------------------------------------------------
# MAC manifests


@dataclass(frozen=True)
class ManifestLayer:
    name: str
    macs: int
    params: int
    role: str  # first | interior | last

    def __post_init__(self):
        if self.macs <= 0 or self.params <= 0:
            raise ContractError(f"manifest layer {self.name}: non-positive counts")
        if self.role not in ("first", "interior", "last"):
            raise ContractError(f"manifest layer {self.name}: bad role {self.role!r}")


@dataclass(frozen=True)
class MacManifest:
    """Per-layer multiply-accumulate and parameter counts of an
    architecture, for accounting only (never executed)."""

    name: str
    layers: tuple[ManifestLayer, ...]
    bn_params: int = 0    # gamma+beta counts across all BN layers (one set)
    bias_params: int = 0

    def __post_init__(self):
        roles = [l.role for l in self.layers]
        if roles.count("first") != 1 or roles.count("last") != 1:
            raise ContractError("manifest must have exactly one first and one last layer")
        if self.bn_params < 0 or self.bias_params < 0:
            raise ContractError("negative parameter counts")

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def weight_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def clip_sites(self) -> int:
        # every weight layer feeds a clipped activation except the last
        return len(self.layers) - 1

    @classmethod
    def from_dict(cls, d: dict) -> "MacManifest":
        try:
            layers = tuple(ManifestLayer(name=l["name"], macs=int(l["macs"]),
                                         params=int(l["params"]), role=l["role"])
                           for l in d["layers"])
            return cls(name=d["name"], layers=layers, bn_params=int(d["bn_params"]),
                       bias_params=int(d["bias_params"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFileError(f"malformed manifest: {e}") from e


BUNDLED_MANIFESTS = ("mobilenet_v1", "mobilenet_v2")


def load_manifest(name_or_path: str) -> MacManifest:
    """Load a bundled manifest by name or any manifest JSON by path."""
    if name_or_path in BUNDLED_MANIFESTS:
        text = (resources.files("bitflex") / "manifests" / f"{name_or_path}.json").read_text()
    else:
        p = Path(name_or_path)
        if not p.exists():
            raise ModelFileError(f"manifest {name_or_path!r} is neither bundled "
                                 f"({', '.join(BUNDLED_MANIFESTS)}) nor a file")
        text = p.read_text()
    try:
        return MacManifest.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ModelFileError(f"manifest {name_or_path!r}: invalid JSON: {e}") from e


def manifest_from_arch(arch: Architecture) -> MacManifest:
    """Derive MAC/parameter counts for one of the executable desk
    architectures by shape propagation."""
    C, H, W = arch.input_shape
    layers = []
    h, w, c = H, W, C
    for idx, spec in enumerate(arch.layers):
        if spec.kind == "conv":
            ho = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            wo = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            macs = ho * wo * spec.out_dim * spec.in_dim * spec.kernel * spec.kernel
            h, w, c = ho, wo, spec.out_dim
        else:
            macs = spec.in_dim * spec.out_dim
            c = spec.out_dim
        layers.append(ManifestLayer(spec.name, macs, spec.weight_count, arch.role(idx)))
    bn_params = 2 * sum(l.out_dim for l in arch.layers if l.bn)
    bias_params = sum(l.out_dim for l in arch.layers if l.bias)
    return MacManifest(arch.name, tuple(layers), bn_params, bias_params)


# ---------------------------------------------------------------------------
# BitOPs and size budgets


def bitops(manifest: MacManifest, k: int, first_last_bits: int = 8, input_bits: int = 8) -> int:
    """Sum over layers of MACs x weight_bits x activation_bits.

    First layer: first_last_bits-bit weights on input_bits-bit inputs.
    Last layer: first_last_bits-bit weights on k-bit inputs. Interior:
    k-bit weights on k-bit activations.
    """
    k = check_bits(k)
    total = 0
    for layer in manifest.layers:
        if layer.role == "first":
            total += layer.macs * first_last_bits * input_bits
        elif layer.role == "last":
            total += layer.macs * first_last_bits * k
        else:
            total += layer.macs * k * k
    return total


def format_bitops(n: int) -> str:
    return f"{n / 1e9:.2f} B"


@dataclass(frozen=True)
class SizeReport:
    """Storage accounting of one deployment of a manifest.

    weight_bytes counts quantized weight payload (or float32 masters when
    fp_master). bn/bias/alpha are float32. scl_overhead_ratio compares the
    clipping-level table against all other parameters at float32 width
    (equivalently, a parameter-count ratio).
    """

    manifest: str
    bits: tuple[int, ...]
    scheme: QuantScheme
    scl: bool
    fp_master: bool
    weight_bytes: int
    bn_bytes: int
    bias_bytes: int
    alpha_bytes: int
    fp_weight_bytes: int
    bn_one_set_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.bn_bytes + self.bias_bytes + self.alpha_bytes

    @property
    def mib(self) -> float:
        return self.total_bytes / (1024.0 * 1024.0)

    @property
    def scl_overhead_ratio(self) -> float:
        # defined against the full-precision parameter footprint of a single
        # deployment (one BN set); equivalent to a parameter-count ratio
        other = self.fp_weight_bytes + self.bn_one_set_bytes + self.bias_bytes
        return self.alpha_bytes / other


def model_size(manifest: MacManifest, bits, scheme: QuantScheme,
               scl: bool = False, first_last_bits: int = 8) -> SizeReport:
    """Storage budget for deploying `manifest` at the given bit-width list.

    A single bit-width is an individually-quantized deployment. Several
    bit-widths form an adaptive deployment: under the modified scheme
    weights are stored once at max(bits); under the original scheme the
    float32 masters must be kept (fp_master). BN sets are stored per
    bit-width; the clipping-level table has one column (shared) or one per
    bit-width (scl).
    """
    scheme = QuantScheme.parse(scheme)
    bit_list = tuple(sorted({check_bits(b) for b in bits}, reverse=True))
    if not bit_list:
        raise ContractError("bits must be non-empty")
    adaptive = len(bit_list) > 1
    fp_master = adaptive and scheme is QuantScheme.ORIGINAL

    if fp_master:
        weight_bytes = 4 * manifest.weight_params
    else:
        store_bits = bit_list[0]
        weight_bytes = 0
        for layer in manifest.layers:
            b = first_last_bits if layer.role in ("first", "last") else store_bits
            weight_bytes += math.ceil(layer.params * b / 8)

    bn_bytes = 4 * manifest.bn_params * len(bit_list)
    bias_bytes = 4 * manifest.bias_params
    alpha_bytes = 4 * manifest.clip_sites * (len(bit_list) if scl else 1)
    return SizeReport(
        manifest=manifest.name, bits=bit_list, scheme=scheme, scl=scl,
        fp_master=fp_master, weight_bytes=weight_bytes, bn_bytes=bn_bytes,
        bias_bytes=bias_bytes, alpha_bytes=alpha_bytes,
        fp_weight_bytes=4 * manifest.weight_params,
        bn_one_set_bytes=4 * manifest.bn_params,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo clipping error (synthetic linear layer)


_MC_CHUNK = 1000


def synthetic_preactivations(n: int = 1000, trials: int = 100000, seed: int = 0) -> np.ndarray:
    """Pre-activations z_t = sum_i w_i u_i with w ~ N(0, 1/n), u ~ U[0,1].

    Trials are generated in fixed chunks whose generators derive from
    (seed, chunk index), so serial and parallel evaluation agree.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1")
    out = np.empty(trials, dtype=np.float64)
    sigma = 1.0 / math.sqrt(n)
    for ci, lo in enumerate(range(0, trials, _MC_CHUNK)):
        m = min(_MC_CHUNK, trials - lo)
        rng = np.random.default_rng([seed, ci])
        # always draw full chunks so any trial budget shares a prefix
        w = rng.normal(0.0, sigma, size=(_MC_CHUNK, n))
        u = rng.uniform(0.0, 1.0, size=(_MC_CHUNK, n))
        out[lo : lo + m] = (w * u).sum(axis=1)[:m]
    return out


def synthetic_clipping_error(k: int, alpha: float, n: int = 1000, trials: int = 100000,
                             seed: int = 0, scheme: QuantScheme = QuantScheme.ORIGINAL,
                             z: np.ndarray | None = None) -> float:
    """Relative RMS error between the clipped-quantized and the ReLU
    output of the synthetic layer: sqrt(E[(q - y)^2] / E[y^2])."""
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    if z is None:
        z = synthetic_preactivations(n, trials, seed)
    y = np.maximum(z, 0.0)
    denom = float(np.sum(y * y))
    if denom == 0.0:
        raise ContractError("degenerate sample: all pre-activations non-positive")
    q = clipped_quantize(z, alpha, k, scheme)
    return float(np.sqrt(np.sum((q - y) ** 2) / denom))


@dataclass
class SweepResult:
    """Grid of (k, alpha, relative_error) plus the per-k argmin alpha."""

    rows: list[tuple[int, float, float]]
    argmin: dict[int, float] = field(default_factory=dict)

    def errors_for(self, k: int) -> list[tuple[float, float]]:
        return [(a, e) for kk, a, e in self.rows if kk == k]


def default_alpha_grid(points: int = 60, lo: float = 0.02, hi: float = 4.0) -> np.ndarray:
    return np.geomspace(lo, hi, points)


def clipping_error_sweep(bits, alphas: np.ndarray | None = None, n: int = 1000,
                         trials: int = 100000, seed: int = 0,
                         scheme: QuantScheme = QuantScheme.ORIGINAL) -> SweepResult:
    """Relative-error surface over (bit-width, clipping level). One shared
    pre-activation sample is reused across the whole grid."""
    if alphas is None:
        alphas = default_alpha_grid()
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0 or np.any(alphas <= 0):
        raise ContractError("alpha grid must be non-empty and positive")
    bit_list = sorted({check_bits(k) for k in bits})
    z = synthetic_preactivations(n, trials, seed)
    result = SweepResult(rows=[])
    for k in bit_list:
        errs = [synthetic_clipping_error(k, float(a), n, trials, seed, scheme, z=z)
                for a in alphas]
        for a, e in zip(alphas, errs):
            result.rows.append((k, float(a), float(e)))
        result.argmin[k] = float(alphas[int(np.argmin(errs))])
    return result


# ---------------------------------------------------------------------------
# model profiles


def clipping_profile(model: AdaptiveModel) -> list[tuple[str, int, float]]:
    """(layer, bit-width, alpha) rows for every clipped activation site;
    the unclipped final output has no entry. Shared-clip models repeat the
    shared value at every bit-width."""
    rows = []
    for spec in model.arch.layers:
        if spec.name not in model.clip:
            continue
        for k in model.config.bit_widths:
            key = k if model.config.clip_mode == "switchable" else "shared"
            rows.append((spec.name, k, float(model.clip[spec.name][key].data[0])))
    return rows


def variance_profile(model: AdaptiveModel, k: int, probe_x: np.ndarray
                     ) -> list[tuple[str, int, float, float]]:
    """(layer, k, quantized-weight std, activation std) at active bit-width
    k, with activations taken from an eval-mode forward over probe_x."""
    if len(probe_x) == 0:
        raise ContractError("probe data is empty")
    model.set_bitwidth(k)
    model.train_mode = False
    collect: dict[str, np.ndarray] = {}
    with engine.no_grad():
        model.forward(probe_x, collect=collect)
    rows = []
    for idx, spec in enumerate(model.arch.layers):
        if model.quantize_enabled:
            with engine.no_grad():
                wq = quantize_weight(model.weights[idx], model.weight_bits(idx),
                                     model.config.scheme).data
        else:
            wq = model.weights[idx].data
        rows.append((spec.name, k, float(wq.std()), float(collect[spec.name].std())))
    return rows
