import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffprobe.backbone import count_parameters
from diffprobe.errors import InvalidConfigError, InvalidInputError
from diffprobe.heads import (CNNHead, HeadConfig, build_head, head_forward, head_param_count,
                             published_config, PUBLISHED_HEADS)

heads = st.one_of(
    st.builds(HeadConfig, family=st.just("linear"), input_channels=st.integers(1, 16),
              num_classes=st.integers(2, 12), pool=st.integers(1, 4)),
    st.builds(HeadConfig, family=st.just("mlp"), input_channels=st.integers(1, 16),
              num_classes=st.integers(2, 12), pool=st.integers(1, 3),
              hidden_sizes=st.lists(st.integers(1, 24), min_size=0, max_size=3).map(tuple)),
    st.builds(HeadConfig, family=st.just("cnn"), input_channels=st.integers(1, 16),
              num_classes=st.integers(2, 12), pool=st.integers(7, 9),
              conv_channels=st.tuples(st.integers(1, 12), st.integers(1, 12))),
    st.builds(HeadConfig, family=st.just("attention"),
              input_channels=st.sampled_from([8, 16, 24]), num_classes=st.integers(2, 12),
              pool=st.just(8), num_blocks=st.integers(1, 3), token_grid=st.integers(1, 4)),
)


@given(heads)
@settings(max_examples=60, deadline=None)
def test_closed_form_count_equals_module_count(cfg):
    assert head_param_count(cfg) == count_parameters(build_head(cfg, seed=0))


@given(heads, st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_output_shape(cfg, n):
    head = build_head(cfg, seed=0)
    if cfg.flat_input:
        x = torch.randn(n, cfg.feature_dim)
    else:
        x = torch.randn(n, cfg.input_channels, cfg.pool, cfg.pool)
    assert head_forward(head, x).shape == (n, cfg.num_classes)


@pytest.mark.parametrize("name,kwargs,published", PUBLISHED_HEADS,
                         ids=[r[0] for r in PUBLISHED_HEADS])
def test_published_rows_count_exactly_under_module(name, kwargs, published):
    cfg = published_config(name)
    with torch.device("meta"):
        head = build_head(cfg)
    assert head_param_count(cfg) == count_parameters(head)


def test_linear_counts_are_exact_affine_maps():
    assert head_param_count(published_config("Linear-1k")) == 1024 * 1000 + 1000
    assert head_param_count(published_config("Linear-4k")) == 4096 * 1000 + 1000


def test_seeded_build_is_reproducible():
    cfg = HeadConfig(family="mlp", input_channels=4, num_classes=3, hidden_sizes=(5,))
    a, b = build_head(cfg, seed=1), build_head(cfg, seed=1)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    z = build_head(cfg, seed=1, zero_init=True)
    assert torch.count_nonzero(z.classifier.weight) == 0


def test_classifier_is_last_affine_layer():
    cfg = HeadConfig(family="attention", input_channels=8, num_classes=5, pool=8, num_blocks=1,
                     token_grid=2)
    head = build_head(cfg)
    assert head.classifier.out_features == 5 and head.classifier.in_features == 8


@pytest.mark.parametrize("kw", [
    dict(family="linear", hidden_sizes=(4,)),
    dict(family="mlp", conv_channels=(4, 4)),
    dict(family="cnn"),
    dict(family="cnn", conv_channels=(4,)),
    dict(family="attention"),
    dict(family="bogus"),
    dict(family="linear", num_classes=0),
])
def test_inconsistent_configs_rejected(kw):
    base = dict(input_channels=8, num_classes=3)
    with pytest.raises(InvalidConfigError):
        HeadConfig(**{**base, **kw})


def test_wrong_layout_rejected():
    lin = build_head(HeadConfig(family="linear", input_channels=4, num_classes=2, pool=2))
    with pytest.raises(InvalidInputError):
        head_forward(lin, torch.randn(3, 4))
    cnn = build_head(HeadConfig(family="cnn", input_channels=4, num_classes=2, pool=8,
                                conv_channels=(3, 3)))
    with pytest.raises(InvalidInputError):
        head_forward(cnn, torch.randn(3, 4, CNNHead.min_side - 1, CNNHead.min_side - 1))
    head_forward(cnn, torch.randn(3, 4, CNNHead.min_side, CNNHead.min_side))


def test_config_round_trip():
    cfg = published_config("CNN-1k-2k-512", num_classes=10)
    assert HeadConfig.from_dict(cfg.to_dict()) == cfg


def test_mlp_without_hidden_layers_is_the_linear_head():
    mlp = HeadConfig(family="mlp", input_channels=6, num_classes=3, pool=2)
    lin = HeadConfig(family="linear", input_channels=6, num_classes=3, pool=2)
    a, b = build_head(mlp, seed=4), build_head(lin, seed=4)
    assert head_param_count(mlp) == head_param_count(lin)
    x = torch.randn(5, 24)
    assert torch.equal(a(x), b(x))


def test_zero_init_gives_zero_logits():
    for cfg in (HeadConfig(family="linear", input_channels=4, num_classes=5),
                HeadConfig(family="cnn", input_channels=4, num_classes=5, pool=8,
                           conv_channels=(3, 3)),
                HeadConfig(family="attention", input_channels=8, num_classes=5, pool=8,
                           num_blocks=1)):
        head = build_head(cfg, zero_init=True)
        if cfg.flat_input:
            x = torch.randn(3, cfg.feature_dim)
        else:
            x = torch.randn(3, cfg.input_channels, 8, 8)
        assert torch.count_nonzero(head_forward(head, x)) == 0


@given(heads)
@settings(max_examples=25, deadline=None)
def test_eval_logits_are_batch_independent(cfg):
    head = build_head(cfg, seed=0).eval()
    shape = (cfg.feature_dim,) if cfg.flat_input else (cfg.input_channels, cfg.pool, cfg.pool)
    x = torch.randn(32, *shape)
    with torch.no_grad():
        full = head_forward(head, x)
        single = head_forward(head, x[7:8])
    assert torch.allclose(full[7:8], single, atol=1e-5)


def test_fifty_way_logits_finite():
    cfg = HeadConfig(family="mlp", input_channels=16, num_classes=50, hidden_sizes=(32,))
    out = head_forward(build_head(cfg), torch.randn(4, 16))
    assert out.shape == (4, 50) and torch.isfinite(out).all()


@pytest.mark.parametrize("side", [7, 8, 13, 16])
def test_cnn_pre_classifier_width_is_fixed(side):
    cfg = HeadConfig(family="cnn", input_channels=3, num_classes=2, pool=side,
                     conv_channels=(4, 5))
    head = build_head(cfg)
    assert head.body.features(torch.randn(2, 3, side, side)).shape == (2, 5 * 4)


def test_attention_tokens_permutation_invariant_without_positions():
    cfg = HeadConfig(family="attention", input_channels=8, num_classes=3, pool=8, num_blocks=2)
    head = build_head(cfg, seed=0).eval()
    with torch.no_grad():
        head.body.pos_embed.zero_()
    x = torch.randn(2, 8, 8, 8)
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(0))
    xp = x.flatten(2)[:, :, perm].reshape(2, 8, 8, 8)
    with torch.no_grad():
        assert torch.allclose(head(x), head(xp), atol=1e-5)


def test_attention_token_count():
    cfg = HeadConfig(family="attention", input_channels=8, num_classes=3, pool=16, num_blocks=1)
    head = build_head(cfg)
    assert head.body.tokens(torch.randn(2, 8, 16, 16)).shape == (2, 64, 8)
    assert head.body.pos_embed.shape[1] == 65
