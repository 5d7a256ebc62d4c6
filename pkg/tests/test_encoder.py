import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facereg import autodiff as ad
from facereg.autodiff.gradcheck import check_gradients
from facereg.config import Config, ConfigError
from facereg.encoder import encode, init_encoder, pn_block
from facereg.model import init_params
from facereg.sampling import make_rng

from conftest import tiny_config


def cloud(seed, n=64):
    return np.random.default_rng(seed).normal(size=(n, 3))


def test_pn_block_identity_weights_give_group_norm():
    p = ad.ModelParams(np.float64)
    p.add("b/weight", np.eye(4))
    p.add("b/bias", np.zeros((1, 4)))
    p.add("b/gn_scale", np.ones((1, 4)))
    p.add("b/gn_shift", np.zeros((1, 4)))
    x = np.abs(np.random.default_rng(0).normal(size=(9, 4)))
    got = pn_block(ad.Tensor(x), p, "b", 2).value
    assert np.allclose(got, ad.group_norm(ad.Tensor(x), 2).value, rtol=0, atol=1e-15)


@pytest.mark.parametrize("n", [1, 5, 200])
def test_pn_block_output_width(tiny_params, n):
    x = ad.Tensor(np.random.default_rng(n).normal(size=(n, 3)))
    assert pn_block(x, tiny_params, "encoder/trunk/pn1", 4).shape == (n, 8)


def test_pn_block_gradcheck():
    rng = np.random.default_rng(1)
    p = ad.ModelParams(np.float64)
    init_encoder(p, tiny_config(encoder_widths=(4, 4, 4)), rng)
    x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = np.random.default_rng(2).normal(size=(4, 4))
    inputs = [x] + [p[f"encoder/trunk/pn1/{k}"] for k in ("weight", "bias", "gn_scale", "gn_shift")]
    err = check_gradients(lambda: ad.sum_(ad.mul(pn_block(x, p, "encoder/trunk/pn1", 2), ad.Tensor(w))),
                          inputs)
    assert err <= 1e-4


def test_non_divisible_group_is_config_error():
    bad = Config(encoder_widths=(8, 10), encoder_group=4)
    with pytest.raises(ConfigError):
        init_encoder(ad.ModelParams(), bad, make_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance_bit_exact(seed):
    cfg = tiny_config()
    params = init_params(cfg, [195, 49, 12], seed=3)
    pts = cloud(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(pts))
    a = encode(pts, params, cfg)
    b = encode(pts[perm], params, cfg)
    assert np.array_equal(a.z_joint.value, b.z_joint.value)
    assert np.array_equal(a.z_id.value, b.z_id.value)
    assert np.array_equal(a.z_exp.value, b.z_exp.value)
    # logits travel with their points
    assert np.array_equal(a.attention_logits.value[perm], b.attention_logits.value)


def test_duplicating_every_point(tiny_cfg, tiny_params):
    pts = cloud(4)
    a = encode(pts, tiny_params, tiny_cfg).z_joint.value
    b = encode(np.vstack([pts, pts]), tiny_params, tiny_cfg).z_joint.value
    # oracle: a per-channel max is idempotent, and the normalization
    # statistics of a doubled cloud equal those of the original
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_heads_are_unit_vectors(dtype):
    cfg = tiny_config(dtype=dtype)
    params = init_params(cfg, [195, 49, 12], seed=0)
    for seed in range(20):
        code = encode(cloud(seed, 30) * 10 ** (seed % 4), params, cfg)
        for z in (code.z_id, code.z_exp):
            assert abs(np.linalg.norm(z.value.astype(np.float64)) - 1) <= 1e-6


def test_attention_probabilities_in_open_interval(tiny_cfg, tiny_params):
    att = encode(cloud(5), tiny_params, tiny_cfg).attention()
    assert att.shape == (64,) and np.all((att > 0) & (att < 1))


def test_bypass_equals_no_attention_variant(tiny_cfg, tiny_params):
    pts = cloud(6)
    a = encode(pts, tiny_params, tiny_cfg, bypass_attention=True)
    b = encode(pts, tiny_params, tiny_cfg.replace(attention=False))
    assert b.attention_logits is None
    assert np.array_equal(a.z_joint.value, b.z_joint.value)
    assert np.array_equal(a.z_id.value, b.z_id.value)


def test_vanilla_blocks_run(tiny_params):
    cfg = tiny_config(block_style="vanilla")
    code = encode(cloud(7), tiny_params, cfg)
    assert np.isfinite(code.z_joint.value).all()


def test_rejects_empty_cloud(tiny_cfg, tiny_params):
    with pytest.raises(ValueError):
        encode(np.zeros((0, 3)), tiny_params, tiny_cfg)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_critical_subset(seed):
    # at the pooling stage: rows that win no channel may be replaced by any
    # convex combination of winning rows without changing the pooled vector
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(30, 5))
    gate = rng.random((30, 1))
    pooled = ad.masked_max_pool(ad.Tensor(f), ad.Tensor(gate)).value
    gated = gate * f
    winners = np.unique(np.argmax(gated, axis=0))
    assert len(winners) <= f.shape[1]
    losers = np.setdiff1d(np.arange(30), winners)
    w = rng.random((len(losers), len(winners)))
    w /= w.sum(axis=1, keepdims=True)
    replaced = gated.copy()
    replaced[losers] = w @ gated[winners]
    again = ad.masked_max_pool(ad.Tensor(replaced)).value
    assert np.array_equal(again, pooled)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_attention_monotonicity(seed, shrink):
    # with non-negative features, lowering one point's gate never raises a
    # channel that point was winning
    rng = np.random.default_rng(seed)
    f = np.abs(rng.normal(size=(25, 6)))
    logits = rng.normal(size=(25, 1))
    i = int(rng.integers(25))
    before = ad.masked_max_pool(ad.Tensor(f), ad.sigmoid(ad.Tensor(logits))).value
    won = np.argmax(ad.sigmoid(ad.Tensor(logits)).value * f, axis=0) == i
    lowered = logits.copy()
    lowered[i] -= 5 * shrink
    after = ad.masked_max_pool(ad.Tensor(f), ad.sigmoid(ad.Tensor(lowered))).value
    assert np.all(after[won] <= before[won])
    assert np.all(after[~won] == before[~won])
