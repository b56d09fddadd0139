import numpy as np
import pytest

from dlif.networks import (CwsaParams, Encoder, EncoderConfig, Head, HeadConfig, cwsa_forward, encode, head_forward,
                           load_parameters, read_weight_manifest, save_parameters, write_weight_manifest)
from dlif.stylecross import LEVELS, Pairing, StylePlan, make_level_pairings
from dlif.tensor import Tensor


def small_cfg(**kw):
    return EncoderConfig(input_size=16, stage_channels=(4, 6, 8), feature_dim=8, **kw)


def conv_ref(x, w, b, stride):
    n, _, h, _ = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    size = (h + 2 - 3) // stride + 1
    out = np.zeros((n, o, size, size))
    for i in range(size):
        for j in range(size):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return out


def reference_forward(params, x):
    h = x
    for s in (1, 2, 3):
        h = np.maximum(conv_ref(h, params[f"stage{s}.conv_a.weight"], params[f"stage{s}.conv_a.bias"], 2), 0)
        h = np.maximum(conv_ref(h, params[f"stage{s}.conv_b.weight"], params[f"stage{s}.conv_b.bias"], 1), 0)
    return h.mean(axis=(2, 3))


def cwsa_ref(x, w1, b1, w2, b2):
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        mu = np.array([x[n, c].mean() for c in range(x.shape[1])])
        var = np.array([((x[n, c] - mu[c]) ** 2).mean() for c in range(x.shape[1])])
        hidden = np.maximum(w1 @ np.concatenate([mu, var]) + b1, 0)
        a = 1 / (1 + np.exp(-(w2 @ hidden + b2)))
        for c in range(x.shape[1]):
            out[n, c] = a[c] * x[n, c] + x[n, c]
    return out


def params_np(enc):
    return {k: v.data for k, v in enc.params.items()}


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(input_size=12)
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=32)
    with pytest.raises(ValueError):
        EncoderConfig(stage_channels=(4, 4))
    with pytest.raises(ValueError):
        HeadConfig("classifier", 1, 4)
    with pytest.raises(ValueError):
        HeadConfig("regressor", 2, 4)


def test_plain_encoder_matches_reference():
    rng = np.random.default_rng(0)
    enc = Encoder(small_cfg(), rng)
    for p in enc.params.values():
        p.data = p.data + rng.normal(size=p.shape) * 0.1  # nonzero biases too
    x = rng.uniform(size=(2, 3, 16, 16))
    res = encode(enc, x)
    assert np.max(np.abs(res.features.data - reference_forward(params_np(enc), x))) < 1e-12
    assert [res.intermediates[lv].shape for lv in LEVELS] == [(2, 4, 8, 8), (2, 6, 4, 4), (2, 8, 2, 2)]
    assert res.augmented == []


def test_encode_deterministic_and_size_checked():
    rng = np.random.default_rng(1)
    enc = Encoder(small_cfg(), rng)
    x = rng.uniform(size=(2, 3, 16, 16))
    assert encode(enc, x).features.data.tobytes() == encode(enc, x).features.data.tobytes()
    with pytest.raises(ValueError):
        encode(enc, rng.uniform(size=(2, 3, 8, 8)))


def test_same_seed_same_init():
    a = Encoder(small_cfg(cwsa_enabled=True), np.random.default_rng(5))
    b = Encoder(small_cfg(cwsa_enabled=True), np.random.default_rng(5))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.any(a.params["stage1.conv_a.bias"].data)


@pytest.mark.parametrize("flow,count", [("M+H", 2), ("MxH", 1), ("L+M+H", 3), ("LxMxH", 1), ("L", 1)])
def test_flow_counts(flow, count):
    rng = np.random.default_rng(2)
    enc = Encoder(small_cfg(), rng)
    plan = StylePlan.parse(flow)
    pairing = make_level_pairings(plan, [0, 0, 1, 1], rng)
    res = encode(enc, rng.uniform(size=(4, 3, 16, 16)), plan, pairing)
    assert len(res.augmented) == count


def test_identity_permutation_changes_nothing():
    rng = np.random.default_rng(3)
    enc = Encoder(small_cfg(cwsa_enabled=True), rng)
    plan = StylePlan.parse("L+M+H")
    ident = Pairing({lv: np.arange(4) for lv in LEVELS}, np.zeros(4))
    res = encode(enc, rng.uniform(size=(4, 3, 16, 16)), plan, ident)
    for aug in res.augmented:
        assert np.max(np.abs(aug.data - res.features.data)) < 1e-9


def test_plan_without_pairing_rejected():
    rng = np.random.default_rng(4)
    enc = Encoder(small_cfg(), rng)
    x = rng.uniform(size=(2, 3, 16, 16))
    with pytest.raises(ValueError):
        encode(enc, x, StylePlan.parse("M+H"))
    with pytest.raises(ValueError):
        encode(enc, x, StylePlan.parse("M+H"), Pairing({"M": np.arange(2)}))


def _cwsa(rng, c, r=2, zero=False):
    h = c // r
    f = (lambda s: np.zeros(s)) if zero else (lambda s: rng.normal(size=s))
    return CwsaParams(*(Tensor(f(s)) for s in [(h, 2 * c), (h,), (c, h), (c,)]))


def test_cwsa_zero_params_scale_by_one_and_half():
    x = np.random.default_rng(6).normal(size=(2, 4, 3, 3))
    out = cwsa_forward(Tensor(x), _cwsa(None, 4, zero=True)).data
    assert np.array_equal(out, 1.5 * x)


def test_cwsa_zero_input():
    out = cwsa_forward(Tensor(np.zeros((1, 4, 3, 3))), _cwsa(np.random.default_rng(7), 4)).data
    assert not np.any(out)


def test_cwsa_matches_oracle_and_bounds():
    rng = np.random.default_rng(8)
    for _ in range(10):
        x = rng.normal(size=(1, 4, 3, 3))
        p = _cwsa(rng, 4)
        out = cwsa_forward(Tensor(x), p).data
        ref = cwsa_ref(x, p.w1.data, p.b1.data, p.w2.data, p.b2.data)
        assert np.max(np.abs(out - ref)) < 1e-12
        assert np.all(np.sign(out) == np.sign(x))
        assert np.all(np.abs(x) <= np.abs(out)) and np.all(np.abs(out) <= 2 * np.abs(x))


def test_cwsa_channel_mismatch():
    with pytest.raises(ValueError):
        cwsa_forward(Tensor(np.ones((1, 6, 2, 2))), _cwsa(np.random.default_rng(0), 4))


def test_head_parallel_and_orthogonal():
    head = Head(HeadConfig("classifier", 2, 3), np.random.default_rng(9))
    head.params["weight"].data = np.array([[2.0, 0, 0], [0, 5.0, 0]])
    probs, cos = head_forward(head, Tensor([[3.0, 0, 0], [0, 0, 1.0]]))
    np.testing.assert_allclose(cos.data[0], [1, 0], atol=1e-15)
    np.testing.assert_allclose(probs.data[1], [0.5, 0.5], atol=1e-15)


def test_head_random_softmax_oracle():
    rng = np.random.default_rng(10)
    head = Head(HeadConfig("discriminator", 5, 6), rng)
    f = rng.normal(size=(4, 6))
    probs, _ = head_forward(head, Tensor(f), scale=16.0)
    w = head.weight.data
    for i in range(4):
        cos = [f[i] @ w[k] / np.linalg.norm(f[i]) / np.linalg.norm(w[k]) for k in range(5)]
        e = np.exp(16 * np.array(cos) - 16 * max(cos))
        assert np.max(np.abs(probs.data[i] - e / e.sum())) < 1e-12
    with pytest.raises(ValueError):
        head_forward(head, Tensor(np.ones((2, 4))))


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    enc = Encoder(small_cfg(cwsa_enabled=True), rng)
    for p in enc.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    rows = save_parameters(enc.params, tmp_path, prefix="U.")
    write_weight_manifest(rows, tmp_path / "manifest.csv")
    other = Encoder(small_cfg(cwsa_enabled=True), np.random.default_rng(12))
    load_parameters(other.params, tmp_path, read_weight_manifest(tmp_path / "manifest.csv"), prefix="U.")
    assert all(np.array_equal(enc.params[k].data, other.params[k].data) for k in enc.params)
