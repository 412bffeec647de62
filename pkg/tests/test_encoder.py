import numpy as np
import pytest

from longvit.attention import DilationSchedule
from longvit.encoder import (EncoderConfig, EncoderWeights, block_forward, encode, head_logits, init_weights,
                             param_count)
from longvit.errors import ConfigError, DimensionError
from longvit.tensor import Tensor, layer_norm


def _random_weights(cfg, seed=0, scale=0.2):
    w = init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in w.params.values():
        t.data = t.data + scale * rng.normal(size=t.shape)
    return w


def _zero_branches(w: EncoderWeights) -> None:
    for name, t in w.params.items():
        if name.startswith("blocks.") and (".attn." in name or ".fc" in name):
            t.data = np.zeros_like(t.data)


def test_paper_parameter_count():
    d, f = 384, 1536
    block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    embed = 3 * 32 * 32 * d + d
    expected = 12 * block + embed + 32 * 32 * d + 2 * d + (d * 2 + 2)
    assert expected == 22_868_354
    assert param_count(EncoderConfig.paper()) == expected


def test_paper_init_zeroes_output_projections():
    cfg = EncoderConfig.paper(layers=1, hidden=48, ffn=192, heads=4)
    w = init_weights(cfg)
    assert not w["blocks.0.attn.o.weight"].data.any()
    assert not w["blocks.0.fc2.weight"].data.any()
    assert w["blocks.0.attn.q.weight"].data.std() == pytest.approx(0.02 * 0.88, rel=0.2)


def test_tiny_init_uses_fan_in_scale():
    w = init_weights(EncoderConfig.tiny())
    fc2 = w["blocks.0.fc2.weight"].data
    assert fc2.any()
    assert np.abs(fc2).max() <= 2.0 / np.sqrt(fc2.shape[0])


def test_init_is_deterministic():
    a, b = init_weights(EncoderConfig.tiny(), 3), init_weights(EncoderConfig.tiny(), 3)
    assert np.array_equal(a.flat(), b.flat())


def test_block_with_zero_weights_is_identity():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    _zero_branches(w)
    x = Tensor(np.random.default_rng(1).normal(size=(16, cfg.hidden)))
    out = block_forward(x, w, 0, DilationSchedule(((16, 1),)))
    assert np.array_equal(out.data, x.data)


def test_zero_branches_encode_to_normed_mean():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    _zero_branches(w)
    x = Tensor(np.random.default_rng(2).normal(size=(16, cfg.hidden)))
    _, pooled = encode(x, w)
    normed = layer_norm(x, w["norm.weight"], w["norm.bias"], eps=1e-6).data
    assert np.max(np.abs(pooled.data - normed.mean(axis=0))) <= 1e-12


def test_train_equals_eval_without_drop_path():
    cfg = EncoderConfig.tiny(drop_path=0.0)
    w = _random_weights(cfg)
    x = Tensor(np.random.default_rng(3).normal(size=(32, cfg.hidden)))
    a = encode(x, w, train=False)[1].data
    b = encode(x, w, train=True, rng=np.random.default_rng(0))[1].data
    assert np.array_equal(a, b)


def test_eval_is_deterministic():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    x = Tensor(np.random.default_rng(4).normal(size=(32, cfg.hidden)))
    assert np.array_equal(encode(x, w)[1].data, encode(x, w)[1].data)


def test_drop_path_needs_rng_in_training():
    cfg = EncoderConfig.tiny()
    with pytest.raises(ConfigError):
        encode(Tensor(np.zeros((4, cfg.hidden))), init_weights(cfg), train=True)


def test_pooled_is_exact_mean():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    tokens, pooled = encode(Tensor(np.random.default_rng(5).normal(size=(48, cfg.hidden))), w)
    assert np.max(np.abs(pooled.data - tokens.data.mean(axis=0))) <= 1e-12


def test_single_token_pools_to_itself():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    tokens, pooled = encode(Tensor(np.random.default_rng(6).normal(size=(1, cfg.hidden))), w)
    assert np.array_equal(pooled.data, tokens.data[0])


def test_pooled_invariant_to_token_permutation_under_dense_schedule():
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, cfg.hidden))  # positions already folded in; they move with their tokens
    perm = rng.permutation(20)
    sched = DilationSchedule(((20, 1),))
    a = encode(Tensor(x), w, schedule=sched)[1].data
    b = encode(Tensor(x[perm]), w, schedule=sched)[1].data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_shapes_at_paper_width():
    cfg = EncoderConfig.paper(layers=1)
    w = init_weights(cfg)
    tokens, pooled = encode(Tensor(np.random.default_rng(8).normal(size=(64, 384))), w)
    assert tokens.shape == (64, 384)
    assert pooled.shape == (384,)
    assert head_logits(pooled, w).shape == (2,)


def test_wrong_width_rejected():
    with pytest.raises(DimensionError):
        encode(Tensor(np.zeros((4, 7))), init_weights(EncoderConfig.tiny()))


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(hidden=30, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(drop_path=1.0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = EncoderConfig.tiny()
    w = _random_weights(cfg)
    w.save(tmp_path / "w.lvt")
    back = EncoderWeights.load(tmp_path / "w.lvt", cfg)
    assert np.array_equal(back.flat(), w.flat())


def test_checkpoint_shape_mismatch(tmp_path):
    init_weights(EncoderConfig.tiny()).save(tmp_path / "w.lvt")
    with pytest.raises(DimensionError):
        EncoderWeights.load(tmp_path / "w.lvt", EncoderConfig.tiny(hidden=64))
