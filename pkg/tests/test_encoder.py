import numpy as np
import pytest

from asc import numeric as nm
from asc.encoder import (EncoderConfig, attention, block_forward, block_params, encode, encode_images,
                         init_encoder_params)
from asc.errors import ConfigError
from asc.gradsuite import MODEL_TOL, check_model
from asc.grouping import AscConfig
from asc.numeric import Tensor


def _attn_params(rng, d, std=0.3):
    return {f"attn.{w}": Tensor(rng.normal(0, std, (d, d)), True) for w in ("wq", "wk", "wv", "wo")}


def test_single_token_attention_is_value_output_projection():
    rng = np.random.default_rng(0)
    p = _attn_params(rng, 8)
    x = rng.normal(size=(1, 1, 8))
    out, _ = attention(Tensor(x), np.ones((1, 1), bool), p, heads=2)
    assert np.allclose(out.data, x @ p["attn.wv"].data @ p["attn.wo"].data, atol=1e-12)


def test_identical_tokens_give_identical_outputs():
    rng = np.random.default_rng(1)
    p = _attn_params(rng, 8)
    x = np.tile(rng.normal(size=8), (1, 5, 1))
    out, _ = attention(Tensor(x), np.ones((1, 5), bool), p, heads=4)
    assert np.allclose(out.data, out.data[:, :1], atol=1e-12)


def test_attention_gradients():
    rng = np.random.default_rng(2)
    p = _attn_params(rng, 8)
    x = Tensor(rng.normal(size=(1, 6, 8)), True)
    w = rng.normal(size=(1, 6, 8))
    names = sorted(p)

    def f(x, *ws):
        return nm.sum(nm.mul(attention(x, np.ones((1, 6), bool), dict(zip(names, ws)), 2)[0], w))

    assert nm.gradcheck(f, [x] + [p[k] for k in names]) <= 1e-3


def test_masked_keys_do_not_influence_valid_queries():
    rng = np.random.default_rng(3)
    p = _attn_params(rng, 8)
    x = rng.normal(size=(1, 5, 8))
    mask = np.array([[True, True, True, False, False]])
    a, _ = attention(Tensor(x), mask, p, 2)
    y = x.copy()
    y[0, 3:] = rng.normal(size=(2, 8)) * 100
    b, _ = attention(Tensor(y), mask, p, 2)
    assert np.allclose(a.data, b.data, atol=1e-12)
    assert np.all(a.data[0, 3:] == 0)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(depth=2, asc_positions=(2,))


def _cfg(**kw):
    base = dict(depth=2, embed_dim=16, heads=2, asc_positions=(1,), image_size=16, patch_size=4)
    base.update(kw)
    return EncoderConfig(**base)


def test_block_without_asc_preserves_count():
    cfg = _cfg(asc_positions=())
    params = init_encoder_params(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 7, 16)))
    out, mask, grouped = block_forward(x, np.ones((2, 7), bool), block_params(params, 0), 2)
    assert out.shape == (2, 7, 16) and mask.sum() == 14 and grouped is None


def test_block_with_very_low_threshold_leaves_one_token():
    cfg = _cfg(asc_positions=(0,), asc=AscConfig(theta_init=-1e12))
    params = init_encoder_params(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 7, 16)))
    out, mask, grouped = block_forward(x, np.ones((2, 7), bool), block_params(params, 0), 2, cfg.asc)
    assert out.shape == (2, 1, 16)
    assert [p.count for p in grouped.partitions] == [1, 1]


def test_two_cluster_input_gives_two_components_at_second_block():
    rng = np.random.default_rng(4)
    cfg = _cfg(asc=AscConfig(theta_init=4.5))
    params = init_encoder_params(cfg, rng)
    labels = rng.permutation(np.arange(16) % 2)
    z = np.zeros((16, 16))
    z[np.arange(16), labels] = 3.0
    z += rng.uniform(-0.01, 0.01, z.shape)
    out = encode(Tensor(z), params, cfg)
    part = out.layers[0].partitions[0]
    assert part.count == 2
    assert np.array_equal(part.labels, (labels != labels[0]).astype(int))


def test_depth_zero_representation_is_token_mean():
    cfg = EncoderConfig(depth=0, asc_positions=(), embed_dim=8, heads=2)
    z = np.random.default_rng(5).normal(size=(9, 8))
    out = encode(Tensor(z), {}, cfg)
    assert np.allclose(out.rep.data, z.mean(axis=0), atol=1e-12)


def test_single_token_representation_is_that_token_after_blocks():
    cfg = _cfg()
    params = init_encoder_params(cfg, np.random.default_rng(6))
    z = np.random.default_rng(7).normal(size=(1, 16))
    out = encode(Tensor(z), params, cfg)
    x, mask = Tensor(z[None]), np.ones((1, 1), bool)
    for i in range(cfg.depth):
        x, mask, _ = block_forward(x, mask, block_params(params, i), cfg.heads, cfg.asc)
    assert np.allclose(out.rep.data, x.data[0, 0], atol=1e-12)


def test_token_trace_non_increasing_only_at_asc_positions():
    cfg = EncoderConfig()
    params = init_encoder_params(cfg, np.random.default_rng(8))
    imgs = np.random.default_rng(9).uniform(size=(4, 32, 32, 3))
    trace = encode_images(imgs, params, cfg).token_trace
    assert trace[0] == 64
    for i in range(cfg.depth):
        if i in cfg.asc_positions:
            assert trace[i + 1] <= trace[i]
        else:
            assert trace[i + 1] == trace[i]


def test_padded_batch_matches_unpadded_samples():
    rng = np.random.default_rng(10)
    cfg = EncoderConfig(depth=3, embed_dim=16, heads=2, asc_positions=(0, 1), image_size=16,
                        asc=AscConfig(theta_init=6.0), init_std=0.1)
    params = init_encoder_params(cfg, rng)
    a = rng.normal(size=(12, 16))
    b = rng.normal(size=(7, 16))
    batch = np.zeros((2, 12, 16))
    batch[0], batch[1, :7] = a, b
    batch[1, 7:] = rng.normal(size=(5, 16)) * 50  # garbage in padding
    mask = np.zeros((2, 12), bool)
    mask[0], mask[1, :7] = True, True
    out = encode(Tensor(batch), params, cfg, mask=mask)
    ra = encode(Tensor(a), params, cfg).rep.data
    rb = encode(Tensor(b), params, cfg).rep.data
    assert np.max(np.abs(out.rep.data[0] - ra)) <= 1e-9
    assert np.max(np.abs(out.rep.data[1] - rb)) <= 1e-9
    # grouping happened and left the batch ragged
    assert [p.count for p in out.layers[0].partitions] == [9, 6]


def test_theta_is_excluded_from_grad_when_fixed():
    cfg = _cfg(asc=AscConfig(learnable_theta=False))
    params = init_encoder_params(cfg, np.random.default_rng(0))
    assert not params["blocks.1.theta"].requires_grad
    assert float(params["blocks.1.theta"].data) == 0.2


def test_full_model_gradient_check():
    worst, errs = check_model(tokens=16, dim=32, depth=2)
    assert worst <= MODEL_TOL, errs
    assert "blocks.0.theta" in errs


def test_eight_token_model_gradient_check():
    worst, errs = check_model(tokens=8, dim=32, depth=2)
    assert worst <= MODEL_TOL, errs
