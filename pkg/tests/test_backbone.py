import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffprobe.backbone import (BackboneConfig, BlockRegistry, BlockSpec, UNet, build_backbone,
                                build_registry, count_parameters, forward_with_taps,
                                reference_config, toy_config, weight_digest)
from diffprobe.errors import InvalidConfigError, InvalidInputError
from diffprobe.schedule import build_linear_schedule, q_sample, simple_loss
from oracles import central_difference

MICRO = BackboneConfig(resolution=8, in_channels=1, base_channels=8, channel_multipliers=(1, 2),
                       num_res_blocks=1, attention_resolutions=(4,), head_channels=8,
                       norm_groups=4)


def test_reference_layout_has_37_blocks():
    reg = build_registry(reference_config())
    assert len(reg) == 37
    assert reg.bottleneck == 19
    assert reg[24].output_shape(256) == (1024, 16, 16)
    assert reg[1].kind == "stem"
    assert reg[37].output_shape(256) == (256, 256, 256)


def test_reference_parameter_count_near_published_scale():
    with torch.device("meta"):
        model = UNet(reference_config())
    # the unconditional 256x256 ADM model is roughly 553M parameters
    assert count_parameters(model) == pytest.approx(553e6, rel=0.01)


def test_registry_matches_live_activations():
    cfg = toy_config()
    model, reg = build_backbone(cfg, seed=0)
    x = torch.randn(2, 3, cfg.resolution, cfg.resolution)
    _, acts = forward_with_taps(model, x, torch.tensor([5, 700]), taps=reg.indices)
    assert set(acts) == set(reg.indices)
    for spec in reg:
        assert tuple(acts[spec.index].shape[1:]) == spec.output_shape(cfg.resolution)


def test_taps_do_not_change_prediction():
    model, reg = build_backbone(MICRO, seed=1)
    x = torch.randn(3, 1, 8, 8)
    plain = model(x, 17)
    tapped, _ = forward_with_taps(model, x, 17, taps=reg.indices)
    assert torch.equal(plain, tapped)


@pytest.mark.parametrize("b", [0, 99, -1])
def test_unknown_block_rejected(b):
    model, _ = build_backbone(MICRO, seed=0)
    with pytest.raises(InvalidInputError):
        forward_with_taps(model, torch.zeros(1, 1, 8, 8), 1, taps=[b])


def test_wrong_input_shape_rejected():
    model, _ = build_backbone(MICRO, seed=0)
    with pytest.raises(InvalidInputError):
        model(torch.zeros(1, 1, 16, 16), 1)


def test_build_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.random.get_rng_state()
    a, _ = build_backbone(MICRO, seed=5)
    assert torch.equal(before, torch.random.get_rng_state())
    b, _ = build_backbone(MICRO, seed=5)
    c, _ = build_backbone(MICRO, seed=6)
    assert weight_digest(a) == weight_digest(b) != weight_digest(c)


def test_count_is_mode_independent():
    model, _ = build_backbone(MICRO, seed=0)
    n = count_parameters(model)
    model.requires_grad_(False)
    assert count_parameters(model) == n
    assert count_parameters(model, trainable_only=True) == 0


@pytest.mark.parametrize("kw", [dict(resolution=30, channel_multipliers=(1, 2, 4)),
                                dict(base_channels=0), dict(channel_multipliers=()),
                                dict(base_channels=24, norm_groups=16)])
def test_invalid_configs_rejected(kw):
    with pytest.raises(InvalidConfigError):
        BackboneConfig(**kw)


def test_config_round_trip_and_strict_keys():
    cfg = toy_config()
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfigError):
        BackboneConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


def test_registry_rejects_gaps_and_bad_divisors():
    with pytest.raises(InvalidConfigError):
        BlockRegistry((BlockSpec(2, "residual", 8, 1, "encoder"),))
    with pytest.raises(InvalidConfigError):
        BlockRegistry((BlockSpec(1, "residual", 8, 3, "encoder"),))


@given(levels=st.integers(1, 4), nres=st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_registry_structure_property(levels, nres):
    cfg = BackboneConfig(resolution=2 ** (levels + 1), base_channels=4,
                         channel_multipliers=tuple(range(1, levels + 1)), num_res_blocks=nres,
                         attention_resolutions=(), norm_groups=4)
    reg = build_registry(cfg)
    # stem + encoder + bottleneck + decoder
    assert len(reg) == 1 + levels * nres + (levels - 1) + 1 + levels * (nres + 1)
    assert reg[len(reg)].spatial_divisor == 1
    assert reg[reg.bottleneck].spatial_divisor == 2 ** (levels - 1)
    assert reg.indices == list(range(1, len(reg) + 1))


def test_gradient_matches_central_differences():
    torch.manual_seed(0)
    model, _ = build_backbone(MICRO, seed=0)
    model.double()
    # zero-initialised output layers would make most gradients vanish
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.randn_like(p))
    sched = build_linear_schedule(100)
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.tensor([3, 60])
    x_t = q_sample(x0, t, eps, sched).x_t

    def loss():
        return simple_loss(model(x_t, t), eps)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.numel() > 1]
    checked = 0
    pick = torch.Generator().manual_seed(2)
    errors = []
    for p in params[:: max(1, len(params) // 12)]:
        for idx in torch.randint(0, p.numel(), (2,), generator=pick).tolist():
            analytic = p.grad.view(-1)[idx].item()
            with torch.no_grad():
                numeric = central_difference(loss, p, idx)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            errors.append(abs(analytic - numeric) / denom)
            checked += 1
    assert checked >= 20
    assert max(errors) < 1e-4


def _hand_count(levels, res_blocks):
    # stem + encoder blocks + downsamplers + bottleneck + decoder blocks (one extra per level)
    return 1 + levels * res_blocks + (levels - 1) + 1 + levels * (res_blocks + 1)


def test_toy_layout_registry_length_matches_hand_count():
    cfg = toy_config()
    assert (cfg.resolution, cfg.base_channels, cfg.channel_multipliers) == (32, 64, (1, 2, 4))
    assert len(build_registry(cfg)) == _hand_count(3, 2) == 19
    assert len(build_registry(reference_config())) == _hand_count(6, 2)


def test_bottleneck_tap_shape_on_toy_config():
    cfg = toy_config()
    model, reg = build_backbone(cfg, seed=0)
    x = torch.randn(2, 3, 32, 32)
    _, acts = forward_with_taps(model, x, torch.tensor([5, 50]), {reg.bottleneck})
    c = cfg.base_channels * cfg.channel_multipliers[-1]
    assert acts[reg.bottleneck].shape == (2, c, 8, 8)


def test_empty_taps_return_plain_forward_bitwise():
    model, _ = build_backbone(MICRO, seed=0)
    x = torch.randn(2, 1, 8, 8)
    t = torch.tensor([3, 7])
    eps, acts = forward_with_taps(model, x, t, set())
    assert acts == {} and torch.equal(eps, model(x, t))


def test_all_taps_return_one_tensor_per_block():
    model, reg = build_backbone(MICRO, seed=0)
    _, acts = forward_with_taps(model, torch.randn(1, 1, 8, 8), torch.tensor([1]), reg.indices)
    assert sorted(acts) == reg.indices


def test_toy_count_matches_layer_walk_oracle():
    from oracles import layer_walk_count
    model, _ = build_backbone(toy_config(), seed=0)
    assert count_parameters(model) == layer_walk_count(model)
    lin = torch.nn.Linear(7, 3)
    assert count_parameters(lin) == 7 * 3 + 3
