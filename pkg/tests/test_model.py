import numpy as np
import pytest

import oracles
from bitflex.engine import no_grad
from bitflex.errors import ConfigError, ContractError
from bitflex.model import (
    SHARED,
    SWITCHABLE,
    AdaptiveModel,
    Architecture,
    LayerSpec,
    QuantConfig,
    cnn16,
    get_architecture,
    mlp784,
)
from bitflex.quant import QuantScheme, weight_decode, downshift_codes


def tiny_arch() -> Architecture:
    return Architecture(
        name="tiny",
        input_shape=(1, 2, 2),
        layers=(
            LayerSpec("fc1", "dense", 4, 3, bn=True, act=True),
            LayerSpec("fc2", "dense", 3, 2, bias=True),
        ),
    )


def make_model(scheme="modified", bits=(8, 4, 2), active=8, bn_mode=SWITCHABLE,
               clip_mode=SHARED, arch=None, seed=7, alpha_init=1.0):
    cfg = QuantConfig(scheme=scheme, bit_widths=bits, active=active,
                      bn_mode=bn_mode, clip_mode=clip_mode, alpha_init=alpha_init)
    return AdaptiveModel(arch or tiny_arch(), cfg, seed=seed)


def codes(rng, n, shape=(1, 2, 2)):
    return rng.integers(0, 256, size=(n, *shape), dtype=np.uint8)


# ---------------------------------------------------------------------------
# architecture contracts


def test_architecture_rejects_bad_final_layer():
    with pytest.raises(ConfigError):
        Architecture("bad", (1, 2, 2), (
            LayerSpec("fc1", "dense", 4, 3, bn=True, act=True),
            LayerSpec("fc2", "dense", 3, 2, bn=True, bias=True),
        ))
    with pytest.raises(ConfigError):
        Architecture("bad", (1, 2, 2), (
            LayerSpec("fc1", "dense", 4, 3, bn=True, act=True),
            LayerSpec("fc2", "dense", 3, 2),  # missing bias
        ))


def test_architecture_rejects_hidden_bias():
    with pytest.raises(ConfigError):
        Architecture("bad", (1, 2, 2), (
            LayerSpec("fc1", "dense", 4, 3, bn=True, act=True, bias=True),
            LayerSpec("fc2", "dense", 3, 2, bias=True),
        ))


def test_architecture_roles_and_sites():
    arch = cnn16()
    assert [arch.role(i) for i in range(4)] == ["first", "interior", "interior", "last"]
    assert arch.clip_sites == ("conv1", "conv2", "conv3")
    assert mlp784().clip_sites == ("fc1", "fc2")


def test_architecture_dict_round_trip():
    arch = cnn16()
    again = Architecture.from_dict(arch.to_dict())
    assert again == arch


def test_get_architecture():
    assert get_architecture("cnn16").name == "cnn16"
    with pytest.raises(ConfigError):
        get_architecture("resnet9000")


def test_quant_config_normalizes_and_validates():
    cfg = QuantConfig(scheme="modified", bit_widths=(4, 8, 4, 6), active=6)
    assert cfg.bit_widths == (8, 6, 4)
    assert cfg.max_bits == 8 and cfg.min_bits == 4
    with pytest.raises(ConfigError):
        QuantConfig(scheme="modified", bit_widths=(8, 4), active=5)
    with pytest.raises(ConfigError):
        QuantConfig(scheme="modified", bit_widths=(8,), active=8, bn_mode="per-bit")
    assert QuantConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# forward: composed-operation oracle


@pytest.mark.parametrize("scheme,k", [("original", 2), ("modified", 4)])
def test_forward_matches_composed_oracle(scheme, k, rng):
    model = make_model(scheme=scheme, bits=(8, k) if k != 8 else (8,), active=k)
    model.train_mode = True
    x = codes(rng, 8)

    with no_grad():
        got = model.forward(x).data

    # independent composition in float64
    xs = x.reshape(8, 4).astype(np.float64) / 256.0
    w1 = model.weights[0].data
    w1q = np.array([[oracles.weight_chain(v, 8, scheme) for v in row] for row in w1])
    h = oracles.matmul_3loop(xs, w1q)
    blk = model.bn["fc1"][k if model.config.bn_mode == SWITCHABLE else SHARED]
    h, _, _ = oracles.batchnorm_2pass(h, blk.gamma.data, blk.beta.data)
    alpha = float(model.clip["fc1"][SHARED].data[0])
    h = np.vectorize(lambda v: oracles.pact_chain(v, alpha, k, scheme))(h)

    w2 = model.weights[1].data
    w2q = np.array([[oracles.weight_chain(v, 8, scheme) for v in row] for row in w2])
    w2q = w2q / np.sqrt(2 * np.var(np.asarray(w2q, dtype=np.float32).astype(np.float64)))
    logits = oracles.matmul_3loop(h, w2q) + model.biases["fc2"].data

    np.testing.assert_allclose(got, logits, rtol=1e-4, atol=1e-5)


def test_forward_eval_uses_running_stats(rng):
    model = make_model()
    model.train_mode = False
    blk = model.bn["fc1"][8]
    blk.state.running_mean[:] = [0.5, -0.2, 0.1]
    blk.state.running_var[:] = [2.0, 1.0, 0.5]
    mean_before = blk.state.running_mean.copy()
    x = codes(rng, 4)
    with no_grad():
        got = model.forward(x).data

    xs = x.reshape(4, 4).astype(np.float64) / 256.0
    w1q = np.vectorize(lambda v: oracles.weight_chain(v, 8, "modified"))(model.weights[0].data)
    h = oracles.matmul_3loop(xs, w1q)
    h = (h - blk.state.running_mean) / np.sqrt(blk.state.running_var + blk.state.eps)
    h = h * blk.gamma.data + blk.beta.data
    alpha = float(model.clip["fc1"][SHARED].data[0])
    h = np.vectorize(lambda v: oracles.pact_chain(v, alpha, 8, "modified"))(h)
    w2q = np.vectorize(lambda v: oracles.weight_chain(v, 8, "modified"))(model.weights[1].data)
    w2q = w2q / np.sqrt(2 * np.var(np.asarray(w2q, dtype=np.float32).astype(np.float64)))
    logits = oracles.matmul_3loop(h, w2q) + model.biases["fc2"].data
    np.testing.assert_allclose(got, logits, rtol=1e-4, atol=1e-5)
    # eval mode must not touch the running statistics
    np.testing.assert_array_equal(blk.state.running_mean, mean_before)


# ---------------------------------------------------------------------------
# bit-width switching


def test_set_bitwidth_stateless(rng):
    model = make_model()
    x = codes(rng, 4)
    with no_grad():
        before = model.forward(x).data.copy()
        model.set_bitwidth(4)
        at4 = model.forward(x).data.copy()
        model.set_bitwidth(2)
        model.forward(x)
        model.set_bitwidth(8)
        after = model.forward(x).data.copy()
        model.set_bitwidth(4)
        at4_again = model.forward(x).data.copy()
    np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(at4, at4_again)
    assert not np.array_equal(before, at4)


def test_set_bitwidth_rejects_unregistered():
    model = make_model(bits=(8, 4))
    with pytest.raises(ContractError):
        model.set_bitwidth(5)


def test_first_last_weight_bit_policy():
    arch = cnn16()
    cfg = QuantConfig(scheme="modified", bit_widths=(8, 3), active=3)
    model = AdaptiveModel(arch, cfg)
    assert [model.weight_bits(i) for i in range(4)] == [8, 3, 3, 8]
    model.set_bitwidth(8)
    assert [model.weight_bits(i) for i in range(4)] == [8, 8, 8, 8]


def test_bn_isolation_between_bit_widths(rng):
    model = make_model(bits=(8, 2), active=8)
    model.train_mode = True
    x = codes(rng, 16)
    with no_grad():
        model.forward(x)
    table = model.bn["fc1"]
    assert table[8].state.running_mean.any()          # updated
    assert not table[2].state.running_mean.any()      # untouched
    np.testing.assert_array_equal(table[2].state.running_var, 1.0)


def test_clip_isolation_between_bit_widths(rng):
    model = make_model(bits=(8, 2), active=2, clip_mode=SWITCHABLE)
    model.train_mode = True
    from bitflex.engine import softmax_xent

    loss = softmax_xent(model.forward(codes(rng, 8)), np.zeros(8, dtype=np.int64))
    loss.backward()
    assert model.clip["fc1"][2].grad is not None
    assert model.clip["fc1"][8].grad is None


def test_shared_clip_single_parameter():
    model = make_model(clip_mode=SHARED, bits=(8, 4, 2))
    assert set(model.clip["fc1"].keys()) == {SHARED}
    model_sw = make_model(clip_mode=SWITCHABLE, bits=(8, 4, 2))
    assert set(model_sw.clip["fc1"].keys()) == {8, 4, 2}


def test_parameter_count_and_uniqueness():
    model = make_model(bits=(8, 4, 2), bn_mode=SWITCHABLE, clip_mode=SWITCHABLE)
    params = model.parameters()
    assert len(params) == len({id(p) for p in params})
    # 2 weights + 1 bias + 3 bit-widths * (gamma, beta) + 3 alphas
    assert len(params) == 2 + 1 + 3 * 2 + 3
    names = [p.name for p in params]
    assert names == sorted(names, key=names.index)  # deterministic order


def test_input_validation(rng):
    model = make_model()
    with pytest.raises(ContractError):
        model.forward(rng.normal(size=(2, 1, 2, 2)).astype(np.float32))
    with pytest.raises(ContractError):
        model.forward(np.zeros((2, 1, 3, 3), dtype=np.uint8))


def test_input_channel_broadcast(rng):
    model = make_model()
    x3 = codes(rng, 2).reshape(2, 2, 2)  # (B, H, W) without channel axis
    with no_grad():
        y = model.forward(x3)
    assert y.data.shape == (2, 2)


# ---------------------------------------------------------------------------
# state dict


def test_state_dict_round_trip(rng):
    a = make_model(seed=3)
    b = make_model(seed=99)
    b.load_state_dict(a.state_dict())
    x = codes(rng, 4)
    with no_grad():
        ya = a.forward(x).data
        yb = b.forward(x).data
    np.testing.assert_array_equal(ya, yb)


def test_state_dict_missing_key():
    a = make_model()
    state = a.state_dict()
    state.pop("fc1.weight")
    with pytest.raises(ContractError):
        make_model().load_state_dict(state)


def test_state_dict_shape_mismatch():
    a = make_model()
    state = a.state_dict()
    state["fc1.weight"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ContractError):
        make_model().load_state_dict(state)


def test_broadcast_shared_seeds_switchable_tables(rng):
    shared = make_model(bn_mode=SHARED, clip_mode=SHARED, seed=11)
    shared.bn["fc1"][SHARED].state.running_mean[:] = [1.0, 2.0, 3.0]
    shared.clip["fc1"][SHARED].data[:] = 0.77
    sw = make_model(bn_mode=SWITCHABLE, clip_mode=SWITCHABLE, seed=0)
    sw.load_state_dict(shared.state_dict(), broadcast_shared=True)
    for k in (8, 4, 2):
        np.testing.assert_array_equal(sw.bn["fc1"][k].state.running_mean, [1.0, 2.0, 3.0])
        assert sw.clip["fc1"][k].data[0] == pytest.approx(0.77)
    # without broadcast the same load must fail
    with pytest.raises(ContractError):
        make_model(bn_mode=SWITCHABLE).load_state_dict(shared.state_dict())


# ---------------------------------------------------------------------------
# integer export


def test_export_codes_match_forward_weights(rng):
    model = make_model(scheme="modified", bits=(6, 3), active=6)
    exported = model.export_max_bit_codes()
    assert exported["fc1"][1] == 8      # first layer pinned to 8 bits
    assert exported["fc2"][1] == 8      # last layer pinned to 8 bits
    arch = cnn16()
    cfg = QuantConfig(scheme="modified", bit_widths=(6, 3), active=3)
    cnn = AdaptiveModel(arch, cfg, seed=1)
    exp = cnn.export_max_bit_codes()
    assert exp["conv2"][1] == 6         # interior at max registered width

    # codes decode to exactly the quantized weights the forward pass uses
    from bitflex.quant import quantize_weight

    for idx, spec in enumerate(arch.layers):
        c, bits = exp[spec.name]
        with no_grad():
            wq = quantize_weight(cnn.weights[idx], bits, QuantScheme.MODIFIED).data
        np.testing.assert_array_equal(weight_decode(c, bits), wq)


def test_export_then_downshift_matches_low_bit_forward(rng):
    """Stored high-bit codes, shifted down and decoded, must reproduce the
    low-bit forward bitwise."""
    model = make_model(scheme="modified", bits=(8, 4, 2), active=4, seed=5)
    x = codes(rng, 4)
    with no_grad():
        want = model.forward(x).data.copy()

    exported = model.export_max_bit_codes()
    clone = make_model(scheme="modified", bits=(8, 4, 2), active=4, seed=123)
    state = model.state_dict()
    for idx, spec in enumerate(model.arch.layers):
        c, bits = exported[spec.name]
        role = model.arch.role(idx)
        target = 8 if role in ("first", "last") else 4
        if bits > target:
            c = downshift_codes(c, bits, target)
        state[f"{spec.name}.weight"] = weight_decode(c, target)
    clone.load_state_dict(state)
    with no_grad():
        got = clone.forward(x).data
    np.testing.assert_array_equal(got, want)


def test_export_rejected_for_original_scheme():
    model = make_model(scheme="original")
    with pytest.raises(ContractError):
        model.export_max_bit_codes()


# ---------------------------------------------------------------------------
# quantize toggle


def test_quantize_disabled_uses_master_weights(rng):
    model = make_model(alpha_init=100.0)  # effectively no clipping
    model.quantize_enabled = False
    x = codes(rng, 4)
    with no_grad():
        got = model.forward(x).data

    xs = x.reshape(4, 4).astype(np.float64) / 256.0
    h = oracles.matmul_3loop(xs, model.weights[0].data)
    blk = model.bn["fc1"][8]
    h = (h - blk.state.running_mean) / np.sqrt(blk.state.running_var + blk.state.eps)
    h = h * blk.gamma.data + blk.beta.data
    h = np.clip(h, 0.0, 100.0)
    w2 = model.weights[1].data.astype(np.float64)
    w2 = w2 / np.sqrt(2 * np.var(w2.astype(np.float32).astype(np.float64)))
    logits = oracles.matmul_3loop(h, w2) + model.biases["fc2"].data
    np.testing.assert_allclose(got, logits, rtol=1e-4, atol=1e-5)


def test_clamp_weights():
    model = make_model()
    model.weights[0].data[0, 0] = 3.0
    model.weights[0].data[0, 1] = -3.0
    model.clamp_weights()
    assert model.weights[0].data[0, 0] == 1.0
    assert model.weights[0].data[0, 1] == -1.0
    assert np.abs(model.weights[0].data).max() <= 1.0
