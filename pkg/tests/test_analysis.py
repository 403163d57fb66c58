import json

import numpy as np
import pytest

from bitflex.analysis import (
    BUNDLED_MANIFESTS,
    MacManifest,
    ManifestLayer,
    SweepResult,
    bitops,
    clipping_error_sweep,
    clipping_profile,
    default_alpha_grid,
    format_bitops,
    load_manifest,
    manifest_from_arch,
    model_size,
    synthetic_clipping_error,
    synthetic_preactivations,
    variance_profile,
)
from bitflex.errors import ContractError, ModelFileError
from bitflex.model import SHARED, SWITCHABLE, cnn16
from bitflex.quant import QuantScheme
from test_model import codes, make_model


def toy_manifest():
    return MacManifest(
        name="toy",
        layers=(
            ManifestLayer("a", macs=1_000_000, params=100, role="first"),
            ManifestLayer("b", macs=2_000_000, params=200, role="interior"),
            ManifestLayer("c", macs=1_000_000, params=50, role="last"),
        ),
        bn_params=10,
        bias_params=5,
    )


# ---------------------------------------------------------------------------
# manifests


def test_manifest_validation():
    with pytest.raises(ContractError):
        ManifestLayer("x", macs=0, params=1, role="first")
    with pytest.raises(ContractError):
        ManifestLayer("x", macs=1, params=1, role="middle")
    with pytest.raises(ContractError):
        MacManifest("m", (ManifestLayer("a", 1, 1, "first"),
                          ManifestLayer("b", 1, 1, "interior")))


def test_manifest_totals():
    m = toy_manifest()
    assert m.total_macs == 4_000_000
    assert m.weight_params == 350
    assert m.clip_sites == 2


def test_manifest_from_arch_cnn16_hand_counts():
    m = manifest_from_arch(cnn16())
    macs = {l.name: l.macs for l in m.layers}
    # conv1: 16x16 out, 16x1x3x3 kernel -> 256*144; conv2: 8x8 out -> 64*4608;
    # conv3: 8x8 out -> 64*9216; fc after pooling: 32*10
    assert macs == {"conv1": 36_864, "conv2": 294_912, "conv3": 589_824, "fc": 320}
    assert m.weight_params == 144 + 4_608 + 9_216 + 320
    assert m.bn_params == 2 * (16 + 32 + 32)
    assert m.bias_params == 10
    assert [l.role for l in m.layers] == ["first", "interior", "interior", "last"]


def test_bundled_manifest_totals_frozen():
    v1 = load_manifest("mobilenet_v1")
    assert v1.total_macs == 568_740_352
    assert v1.weight_params == 4_209_088
    assert v1.bn_params == 21_888
    assert v1.bias_params == 1_000
    assert len(v1.layers) == 28  # 1 + 13 depthwise/pointwise pairs + fc

    v2 = load_manifest("mobilenet_v2")
    assert v2.total_macs == 300_774_272
    assert v2.weight_params == 3_469_760
    assert v2.bn_params == 34_112


def test_load_manifest_from_path(tmp_path):
    m = toy_manifest()
    p = tmp_path / "toy.json"
    p.write_text(json.dumps({
        "name": m.name,
        "layers": [{"name": l.name, "macs": l.macs, "params": l.params, "role": l.role}
                   for l in m.layers],
        "bn_params": m.bn_params,
        "bias_params": m.bias_params,
    }))
    again = load_manifest(str(p))
    assert again == m
    with pytest.raises(ModelFileError):
        load_manifest(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelFileError):
        load_manifest(str(bad))


def test_bundled_names_load():
    for name in BUNDLED_MANIFESTS:
        m = load_manifest(name)
        assert m.total_macs > 0


# ---------------------------------------------------------------------------
# bitops / size


def test_bitops_hand_computed():
    m = toy_manifest()
    # first: 1e6 * 8w * 8in; interior: 2e6 * k*k; last: 1e6 * 8w * k
    assert bitops(m, 4) == 1_000_000 * 64 + 2_000_000 * 16 + 1_000_000 * 32
    assert bitops(m, 8) == 1_000_000 * 64 + 2_000_000 * 64 + 1_000_000 * 64
    with pytest.raises(ContractError):
        bitops(m, 1)


def test_bitops_monotone_in_k():
    m = load_manifest("mobilenet_v1")
    vals = [bitops(m, k) for k in range(2, 9)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_format_bitops():
    assert format_bitops(36_400_000_000) == "36.40 B"
    assert format_bitops(9_670_000_000) == "9.67 B"


def test_model_size_single_bit_hand_computed():
    m = toy_manifest()
    r = model_size(m, [4], QuantScheme.MODIFIED)
    assert not r.fp_master and r.bits == (4,)
    assert r.weight_bytes == 100 + (200 * 4 + 7) // 8 + 50  # first/last at 8 bits
    assert r.bn_bytes == 4 * 10
    assert r.bias_bytes == 4 * 5
    assert r.alpha_bytes == 4 * 2
    assert r.total_bytes == r.weight_bytes + r.bn_bytes + r.bias_bytes + r.alpha_bytes
    assert r.mib == pytest.approx(r.total_bytes / 2**20)


def test_model_size_adaptive_modified():
    m = toy_manifest()
    r = model_size(m, [8, 4, 2], QuantScheme.MODIFIED, scl=True)
    assert not r.fp_master
    assert r.weight_bytes == 100 + 200 + 50     # stored once at max bits
    assert r.bn_bytes == 4 * 10 * 3             # one BN set per bit-width
    assert r.alpha_bytes == 4 * 2 * 3           # per-bit clipping table
    r_shared = model_size(m, [8, 4, 2], QuantScheme.MODIFIED, scl=False)
    assert r_shared.alpha_bytes == 4 * 2


def test_model_size_adaptive_original_keeps_masters():
    m = toy_manifest()
    r = model_size(m, [8, 4], QuantScheme.ORIGINAL)
    assert r.fp_master
    assert r.weight_bytes == 4 * 350
    # single-bit original deployments still store quantized codes
    r1 = model_size(m, [4], QuantScheme.ORIGINAL)
    assert not r1.fp_master


def test_scl_overhead_ratio_definition():
    m = toy_manifest()
    r = model_size(m, [8, 4], QuantScheme.MODIFIED, scl=True)
    want = r.alpha_bytes / (4 * 350 + 4 * 10 + 4 * 5)
    assert r.scl_overhead_ratio == pytest.approx(want)
    # negligible on a realistically sized manifest
    big = model_size(load_manifest("mobilenet_v1"), [8, 6, 5, 4],
                     QuantScheme.MODIFIED, scl=True)
    assert big.scl_overhead_ratio < 1e-4


def test_model_size_input_validation():
    with pytest.raises(ContractError):
        model_size(toy_manifest(), [], QuantScheme.MODIFIED)


# ---------------------------------------------------------------------------
# Monte-Carlo clipping error


def test_preactivations_chunked_determinism():
    a = synthetic_preactivations(n=50, trials=2500, seed=3)
    b = synthetic_preactivations(n=50, trials=5000, seed=3)
    np.testing.assert_array_equal(a, b[:2500])
    c = synthetic_preactivations(n=50, trials=2500, seed=4)
    assert not np.array_equal(a, c)


def test_preactivation_moments():
    z = synthetic_preactivations(n=200, trials=20000, seed=0)
    # E[z] = 0, Var[z] = E[w^2] * n * E[u^2] = (1/n) * n * 1/3 = 1/3
    assert abs(z.mean()) < 0.02
    assert z.var() == pytest.approx(1.0 / 3.0, rel=0.05)


def test_clipping_error_limits():
    z = synthetic_preactivations(n=100, trials=4000, seed=1)
    tiny = synthetic_clipping_error(4, 1e-4, z=z)
    assert tiny == pytest.approx(1.0, abs=0.01)   # everything clipped to ~0
    # a clipping level far above the signal wastes the grid on empty range
    huge = synthetic_clipping_error(2, 50.0, z=z)
    good = synthetic_clipping_error(4, 1.0, z=z)
    assert good < 0.2 < huge
    with pytest.raises(ContractError):
        synthetic_clipping_error(4, 0.0, z=z)


def test_sweep_argmin_increases_with_bits():
    grid = default_alpha_grid(40, 0.05, 4.0)
    res = clipping_error_sweep([2, 4, 8], alphas=grid, n=100, trials=4000, seed=0)
    assert res.argmin[2] < res.argmin[4] < res.argmin[8]
    # argmins are interior grid points
    assert grid[0] < res.argmin[2] and res.argmin[8] < grid[-1]
    assert len(res.rows) == 3 * len(grid)
    # per-k slices cover the grid in order
    pairs = res.errors_for(4)
    assert [a for a, _ in pairs] == pytest.approx(list(grid))


def test_sweep_reproducible():
    kw = dict(alphas=default_alpha_grid(10, 0.1, 3.0), n=64, trials=2000, seed=9)
    r1 = clipping_error_sweep([3], **kw)
    r2 = clipping_error_sweep([3], **kw)
    assert r1.rows == r2.rows


def test_sweep_validation():
    with pytest.raises(ContractError):
        clipping_error_sweep([4], alphas=np.array([]))
    with pytest.raises(ContractError):
        clipping_error_sweep([4], alphas=np.array([-1.0, 1.0]))


def test_sweep_result_errors_for():
    r = SweepResult(rows=[(2, 0.5, 0.9), (4, 0.5, 0.8), (2, 1.0, 0.7)])
    assert r.errors_for(2) == [(0.5, 0.9), (1.0, 0.7)]


# ---------------------------------------------------------------------------
# model profiles


def test_clipping_profile_shared_repeats_value():
    model = make_model(bits=(8, 4), active=8, clip_mode=SHARED)
    model.clip["fc1"][SHARED].data[:] = 1.25
    rows = clipping_profile(model)
    assert rows == [("fc1", 8, 1.25), ("fc1", 4, 1.25)]


def test_clipping_profile_switchable_per_bit():
    model = make_model(bits=(8, 4), active=8, clip_mode=SWITCHABLE)
    model.clip["fc1"][8].data[:] = 2.0
    model.clip["fc1"][4].data[:] = 1.5
    rows = clipping_profile(model)
    assert rows == [("fc1", 8, 2.0), ("fc1", 4, 1.5)]


def test_variance_profile_rows(rng):
    model = make_model(bits=(8, 4), active=8)
    rows = variance_profile(model, 4, codes(rng, 16))
    assert [r[0] for r in rows] == ["fc1", "fc2"]
    assert all(r[1] == 4 for r in rows)
    assert all(np.isfinite(r[2]) and np.isfinite(r[3]) for r in rows)
    assert all(r[2] > 0 for r in rows)
    with pytest.raises(ContractError):
        variance_profile(model, 4, np.zeros((0, 1, 2, 2), dtype=np.uint8))
