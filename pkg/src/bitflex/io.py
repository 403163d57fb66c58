"""Serialization and dataset ingestion.

Model files (`.bfx`) are a self-describing binary container: magic,
version, a canonical JSON header (architecture, quantization policy,
tensor directory), the tensor payload, and a CRC-32 trailer. Under the
modified scheme, weights are stored as bit-packed integer codes at the
widest registered precision, so files convert losslessly to lower
bit-widths by right-shifting codes. Under the original scheme the
real-valued master weights are stored as float32.

Datasets are either IDX-style binary tensor files (uint8 payloads) or a
seeded synthetic generator producing a 10-class image classification
task at configurable difficulty.
"""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path

import numpy as np

from .errors import ContractError, ModelFileError
from .model import SHARED, AdaptiveModel, Architecture, QuantConfig
from .quant import QuantScheme, weight_decode

MAGIC = b"BFLX"
VERSION = 1


# ---------------------------------------------------------------------------
# bit packing


def pack_codes(codes: np.ndarray, k: int) -> bytes:
    """Pack integer codes in [0, 2^k) as k-bit fields, little-endian within
    bytes, padded to a whole number of bytes."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1, 1)
    bits = np.unpackbits(flat, axis=1, bitorder="little", count=k)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, k: int, count: int) -> np.ndarray:
    """Inverse of pack_codes for `count` codes."""
    need = math.ceil(count * k / 8)
    if len(buf) < need:
        raise ModelFileError(f"truncated code payload: {len(buf)} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bits = bits[: count * k].reshape(count, k)
    return np.packbits(bits, axis=1, bitorder="little")[:, 0]


def packed_nbytes(count: int, k: int) -> int:
    return math.ceil(count * k / 8)


# ---------------------------------------------------------------------------
# model files


def _tensor_walk(model: AdaptiveModel):
    """Deterministic (name, kind, array, bits) walk defining payload order."""
    modified = model.config.scheme is QuantScheme.MODIFIED
    codes = model.export_max_bit_codes() if modified else None
    for idx, spec in enumerate(model.arch.layers):
        if modified:
            c, bits = codes[spec.name]
            yield f"{spec.name}.weight", "codes", c, bits
        else:
            yield f"{spec.name}.weight", "f32", model.weights[idx].data, None
    for spec in model.arch.layers:
        if spec.name in model.biases:
            yield f"{spec.name}.bias", "f32", model.biases[spec.name].data, None
    for spec in model.arch.layers:
        if spec.name in model.bn:
            for key in model._keys(model.config.bn_mode):
                block = model.bn[spec.name][key]
                prefix = f"{spec.name}.bn.{key}"
                yield f"{prefix}.gamma", "f32", block.gamma.data, None
                yield f"{prefix}.beta", "f32", block.beta.data, None
                yield f"{prefix}.running_mean", "f32", block.state.running_mean, None
                yield f"{prefix}.running_var", "f32", block.state.running_var, None
    for spec in model.arch.layers:
        if spec.name in model.clip:
            for key in model._keys(model.config.clip_mode):
                yield f"{spec.name}.alpha.{key}", "f32", model.clip[spec.name][key].data, None


def save_model(model: AdaptiveModel, path) -> Path:
    """Write the model in canonical form; returns the path written."""
    directory = []
    payload = bytearray()
    for name, kind, arr, bits in _tensor_walk(model):
        if kind == "codes":
            blob = pack_codes(arr, bits)
        else:
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entry = {"name": name, "kind": kind, "shape": list(np.shape(arr)), "nbytes": len(blob)}
        if bits is not None:
            entry["bits"] = bits
        directory.append(entry)
        payload.extend(blob)

    header = {
        "arch": model.arch.to_dict(),
        "quant": model.config.to_dict(),
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    crc = zlib.crc32(hbytes + bytes(payload)) & 0xFFFFFFFF

    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(2, "little"))
        f.write(len(hbytes).to_bytes(4, "little"))
        f.write(hbytes)
        f.write(payload)
        f.write(crc.to_bytes(4, "little"))
    return path


def load_model(path) -> AdaptiveModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ModelFileError(f"cannot read model file {path}: {e}") from e
    if len(raw) < 14:
        raise ModelFileError(f"{path}: file too short to be a model file")
    if raw[:4] != MAGIC:
        raise ModelFileError(f"{path}: bad magic {raw[:4]!r}")
    version = int.from_bytes(raw[4:6], "little")
    if version != VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    hlen = int.from_bytes(raw[6:10], "little")
    if 10 + hlen + 4 > len(raw):
        raise ModelFileError(f"{path}: truncated header")
    hbytes = raw[10 : 10 + hlen]
    body = raw[10 + hlen : -4]
    crc_stored = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(hbytes + body) & 0xFFFFFFFF != crc_stored:
        raise ModelFileError(f"{path}: checksum mismatch (corrupt file)")
    try:
        header = json.loads(hbytes.decode("utf-8"))
        arch = Architecture.from_dict(header["arch"])
        config = QuantConfig.from_dict(header["quant"])
        directory = header["tensors"]
    except (KeyError, ValueError, TypeError) as e:
        raise ModelFileError(f"{path}: malformed header: {e}") from e

    model = AdaptiveModel(arch, config, seed=0)
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in directory:
        try:
            name, kind, shape, nbytes = (entry["name"], entry["kind"],
                                         tuple(entry["shape"]), int(entry["nbytes"]))
        except (KeyError, TypeError) as e:
            raise ModelFileError(f"{path}: malformed tensor directory: {e}") from e
        blob = body[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise ModelFileError(f"{path}: truncated payload at tensor {name!r}")
        offset += nbytes
        count = int(np.prod(shape)) if shape else 1
        if kind == "codes":
            bits = int(entry["bits"])
            if nbytes != packed_nbytes(count, bits):
                raise ModelFileError(f"{path}: tensor {name!r} has inconsistent size")
            codes = unpack_codes(blob, bits, count)
            tensors[name] = weight_decode(codes, bits).reshape(shape)
        elif kind == "f32":
            if nbytes != 4 * count:
                raise ModelFileError(f"{path}: tensor {name!r} has inconsistent size")
            tensors[name] = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
        else:
            raise ModelFileError(f"{path}: unknown tensor kind {kind!r}")
    if offset != len(body):
        raise ModelFileError(f"{path}: {len(body) - offset} trailing payload bytes")

    try:
        model.load_state_dict(tensors)
    except ContractError as e:
        raise ModelFileError(f"{path}: payload does not match architecture: {e}") from e
    return model


# ---------------------------------------------------------------------------
# IDX files


_IDX_DTYPE_UINT8 = 0x08


def write_idx(path, array: np.ndarray) -> Path:
    """Write a uint8 tensor in IDX format (big-endian dims)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ContractError(f"IDX writer supports uint8 payloads, got {arr.dtype}")
    if not 1 <= arr.ndim <= 3:
        raise ContractError(f"IDX writer supports 1-3 dimensions, got {arr.ndim}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, _IDX_DTYPE_UINT8, arr.ndim]))
        for d in arr.shape:
            f.write(int(d).to_bytes(4, "big"))
        f.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ModelFileError(f"{path}: not an IDX file")
    if raw[2] != _IDX_DTYPE_UINT8:
        raise ModelFileError(f"{path}: unsupported IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    if not 1 <= ndim <= 3 or len(raw) < 4 + 4 * ndim:
        raise ModelFileError(f"{path}: malformed IDX dimensions")
    shape = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    count = int(np.prod(shape))
    data = raw[4 + 4 * ndim :]
    if len(data) != count:
        raise ModelFileError(f"{path}: IDX payload is {len(data)} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8).reshape(shape).copy()


# ---------------------------------------------------------------------------
# synthetic dataset


def _smooth_upsample(grids: np.ndarray, hw: int) -> np.ndarray:
    """Bilinear upsample [C, g, g] -> [C, hw, hw]."""
    g = grids.shape[-1]
    xs = np.linspace(0.0, g - 1.0, hw)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = xs - i0
    rows = grids[:, i0, :] * (1.0 - f)[None, :, None] + grids[:, i1, :] * f[None, :, None]
    return rows[:, :, i0] * (1.0 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]


def synthetic_dataset(n_train: int = 10000, n_test: int = 2000, image_hw: int = 16,
                      classes: int = 10, seed: int = 123, signal: float = 0.32,
                      noise: float = 0.22, confusion: float = 0.35):
    """Seeded 10-class image task: smooth Gaussian class templates mixed
    with their neighbours (confusion), amplitude/offset jitter, and pixel
    noise, coded as uint8. Returns (x_train, y_train, x_test, y_test)
    with images shaped [N, 1, hw, hw].

    Difficulty is set so a small full-precision model lands in the low-90s
    while very low bit-widths degrade visibly.
    """
    if classes < 2 or n_train < classes or n_test < classes:
        raise ContractError("synthetic dataset needs >= 2 classes and >= classes samples")
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(classes, 4, 4))
    templates = _smooth_upsample(base, image_hw)
    templates /= np.abs(templates).max(axis=(1, 2), keepdims=True)
    mixed = (1.0 - confusion) * templates + confusion * np.roll(templates, 1, axis=0)

    def make(n: int, r: np.random.Generator):
        y = r.integers(0, classes, size=n)
        amp = r.uniform(0.6, 1.4, size=(n, 1, 1))
        off = r.uniform(-0.08, 0.08, size=(n, 1, 1))
        x = 0.5 + signal * amp * mixed[y] + off + noise * r.normal(size=(n, image_hw, image_hw))
        codes = np.clip(np.floor(x * 256.0), 0, 255).astype(np.uint8)
        return codes[:, None, :, :], y.astype(np.int64)

    x_train, y_train = make(n_train, rng)
    x_test, y_test = make(n_test, rng)
    return x_train, y_train, x_test, y_test
