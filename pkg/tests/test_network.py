import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lodseg import config as cfgmod
from lodseg.network import (
    ConfigError,
    LODConfig,
    LODNetwork,
    build,
    downsample_input,
    freeze_level,
    level_output,
    majority_pool,
    mean_pool,
    norm_groups,
    parameter_count,
    unfreeze_level,
)


def tiny(**kw):
    base = dict(levels=2, down_factor=2, input_side=16, channels_per_level=[[4, 8], [4, 8]],
                convs_per_block=1, dropout_rate=0.0)
    base.update(kw)
    return LODConfig(**base)


def torch_count(cfg):
    return sum(p.numel() for p in LODNetwork(cfg).parameters())


def test_default_config_parameter_count_is_exact():
    cfg = cfgmod.load().network
    assert parameter_count(cfg) == 337_719
    assert torch_count(cfg) == 337_719


def test_single_conv_count():
    # one 3x3x3 conv, 1 -> 8 channels, with bias
    assert 27 * 8 + 8 == 224
    from lodseg.network import _conv
    assert _conv(1, 8, 3) == 224


@pytest.mark.parametrize("cfg", [
    tiny(),
    tiny(levels=1, channels_per_level=[[4, 8, 16]]),
    tiny(levels=3, input_side=32, channels_per_level=[[4, 8], [4, 8], [8, 12, 6]]),
    tiny(fusion="probabilities"),
    tiny(convs_per_block=3, kernel_side=5, channels_per_level=[[6, 10], [3, 7]]),
])
def test_closed_form_count_matches_modules(cfg):
    assert parameter_count(cfg) == torch_count(cfg)


def test_count_independent_of_input_side_and_monotone():
    a = tiny(input_side=16)
    b = tiny(input_side=64)
    assert parameter_count(a) == parameter_count(b)
    doubled = tiny(channels_per_level=[[8, 16], [8, 16]])
    assert parameter_count(doubled) > parameter_count(a)


@settings(max_examples=25, deadline=None)
@given(ws=st.lists(st.integers(1, 12), min_size=2, max_size=3), i=st.integers(0, 2))
def test_count_strictly_monotone_in_each_width(ws, i):
    i = i % len(ws)
    cfg = LODConfig(levels=1, input_side=16, channels_per_level=[ws])
    wider = LODConfig(levels=1, input_side=16,
                      channels_per_level=[[w + (1 if j == i else 0) for j, w in enumerate(ws)]])
    assert parameter_count(wider) > parameter_count(cfg)


def test_norm_groups_rule():
    assert norm_groups(16, 4) == 4
    assert norm_groups(59, 4) == 1  # prime width
    assert norm_groups(12, 4) == 3
    assert norm_groups(18, 4) == 3  # 18 // 4 = 4 does not divide, largest divisor below is 3
    assert norm_groups(2, 4) == 1


def test_shape_arithmetic_full_scale_default():
    cfg = cfgmod.load().network
    assert cfg.level_side(2) == 64
    assert cfg.level_side(1) == 256


def test_invalid_configs_list_constraint():
    with pytest.raises(ConfigError, match="divisible"):
        LODConfig(levels=2, down_factor=4, input_side=250, channels_per_level=[[4], [4]]).validate()
    with pytest.raises(ConfigError, match="internal stride"):
        LODConfig(levels=2, down_factor=4, input_side=32,
                  channels_per_level=[[4, 4], [4, 4, 4, 4, 4]]).validate()
    with pytest.raises(ConfigError, match="channels_per_level"):
        LODConfig(levels=3, channels_per_level=[[4]]).validate()


@pytest.mark.parametrize("cfg", [
    tiny(),
    tiny(levels=1, channels_per_level=[[4, 8]]),
    tiny(levels=3, input_side=32, channels_per_level=[[4, 8], [4, 8], [4, 8]]),
])
def test_softmax_and_shape(cfg):
    model = build(cfg, seed=1)
    x = torch.randn(2, 1, cfg.input_side, cfg.input_side, cfg.input_side)
    outs = model.eval()(x, return_all=True)
    for lvl, probs in outs.items():
        side = cfg.level_side(lvl)
        assert probs.shape == (2, cfg.num_classes, side, side, side)
        assert torch.allclose(probs.sum(1), torch.ones(()), atol=1e-5)
        assert probs.min() >= 0 and probs.max() <= 1


def test_level1_equals_forward_and_level_shapes():
    cfg = tiny()
    model = build(cfg)
    x = np.random.default_rng(0).normal(size=(16, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(level_output(model, x, 1), model.predict(x))
    assert level_output(model, x, 2).shape == (8, 8, 8, 8)
    with pytest.raises(ValueError):
        level_output(model, x, 3)


def test_inference_deterministic_with_dropout():
    model = build(tiny(dropout_rate=0.5))
    x = np.random.default_rng(1).normal(size=(16, 16, 16)).astype(np.float32)
    assert np.array_equal(model.predict(x), model.predict(x))


def test_zero_head_gives_uniform():
    model = build(tiny())
    head = model.level(1).head.conv
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    probs = model.predict(np.random.default_rng(2).normal(size=(16, 16, 16)))
    np.testing.assert_allclose(probs, 1 / 8, atol=1e-7)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="does not match"):
        build(tiny()).predict(np.zeros((8, 8, 8)))


def test_zeroed_fusion_equals_standalone_unet():
    cfg = tiny()
    model = build(cfg, seed=3)
    fusion = model.level(1).fusion.conv
    with torch.no_grad():
        fusion.weight.zero_()
        fusion.bias.zero_()
    single = build(LODConfig(levels=1, down_factor=2, input_side=16,
                             channels_per_level=[cfg.channels_per_level[0]], convs_per_block=1,
                             dropout_rate=0.0), seed=9)
    own = {k: v for k, v in model.export_state().items()
           if k.startswith("level1/") and "/fusion/" not in k}
    single.import_state(own)
    x = np.random.default_rng(4).normal(size=(16, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(model.predict(x), single.predict(x), atol=1e-6)


def test_downsample_examples():
    assert np.allclose(downsample_input(np.full((8, 8, 8), 3.0), 4), 3.0)
    assert downsample_input(np.zeros((256, 256, 256), np.float32), 4).shape == (64, 64, 64)
    idx = np.indices((8, 8, 8)).sum(0)
    checker = np.where(idx % 2 == 0, 1.0, -1.0)
    assert np.array_equal(downsample_input(checker, 2), np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        downsample_input(np.zeros((6, 6, 6)), 4)
    t = torch.randn(2, 1, 8, 8, 8)
    np.testing.assert_allclose(mean_pool(t, 2).numpy(), mean_pool(t.numpy(), 2), atol=1e-6)


def test_majority_pool_ties_to_smaller():
    lab = np.zeros((2, 2, 2), int)
    lab[0] = 5
    lab[1] = 3
    assert majority_pool(lab, 2, 8).item() == 3
    lab[1, 0, 0] = 5
    assert majority_pool(lab, 2, 8).item() == 5


def _train_steps(model, level, steps=10):
    params = [p for _, p in model.named_level_parameters(level)]
    opt = torch.optim.Adam(params, lr=1e-2)
    x = torch.randn(1, 1, 16, 16, 16)
    for _ in range(steps):
        opt.zero_grad()
        model(x, level=level).square().mean().backward()
        opt.step()


def test_freeze_keeps_coarse_level_bit_identical():
    model = build(tiny(dropout_rate=0.1))
    freeze_level(model, 2)
    before = {k: v.copy() for k, v in model.export_state().items() if k.startswith("level2/")}
    model.train()
    assert not model.level(2).training
    _train_steps(model, 1)
    after = model.export_state()
    for k, v in before.items():
        assert after[k].tobytes() == v.tobytes(), k
    assert all(p.grad is None for _, p in model.named_level_parameters(2))


def test_unfreeze_restores_trainability():
    model = build(tiny())
    freeze_level(model, 2)
    unfreeze_level(model, 2)
    assert all(p.requires_grad for _, p in model.named_level_parameters(2))
    before = model.export_state()["level2/head/conv.weight"].copy()
    model.train()
    _train_steps(model, 2, steps=2)
    assert not np.array_equal(before, model.export_state()["level2/head/conv.weight"])


def test_export_names_follow_level_block_layer():
    names = build(tiny()).export_state()
    assert "level1/enc0/conv0.weight" in names
    assert "level1/fusion/conv.weight" in names
    assert "level2/head/conv.bias" in names
    assert all(n.split("/")[0] in ("level1", "level2") for n in names)


def test_partial_import_by_level():
    a, b = build(tiny(), seed=1), build(tiny(), seed=2)
    b.import_state(a.export_state(), levels=[2])
    sa, sb = a.export_state(), b.export_state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa if k.startswith("level2/"))
    assert not np.array_equal(sa["level1/enc0/conv0.weight"], sb["level1/enc0/conv0.weight"])


def test_head_bias_initialized_to_zero():
    model = build(tiny())
    for lvl in (1, 2):
        assert torch.count_nonzero(model.level(lvl).head.conv.bias) == 0
