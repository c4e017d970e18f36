import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sdgkit import model as M
from sdgkit.model import (BackboneConfig, DecoderConfig, NetworkConfig, SDGNet, StyleDecoder, StylePluginConfig,
                          count_parameters, dsu_apply, mixstyle_apply, resize)
from oracles import central_difference, relative_error, tiny_composite_error

SMALL = BackboneConfig("small-cnn", 16, 2, (16, 24, 32))


def test_resize_example_and_identity():
    x = torch.arange(16.0).view(1, 1, 4, 4)
    assert resize(x, 2).flatten().tolist() == [2.5, 4.5, 10.5, 12.5]
    assert resize(x, 4) is x
    with pytest.raises(ValueError):
        resize(x, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.sampled_from([1, 2, 3, 6]))
def test_resize_keeps_constants(value, r):
    x = torch.full((2, 3, 12, 12), value, dtype=torch.float64)
    assert torch.allclose(resize(x, r), torch.full((2, 3, r, r), value, dtype=torch.float64))


def test_resnet18_stem_shape():
    net = SDGNet(NetworkConfig())
    assert net.stem(torch.zeros(2, 3, 96, 96)).shape == (2, 64, 48, 48)
    assert net.stem_size == 48
    assert net(torch.zeros(2, 3, 96, 96)).shape == (2, 1)


@pytest.mark.parametrize("stride,size", [(1, 96), (2, 48), (4, 24), (8, 12)])
def test_small_cnn_stem_sizes(stride, size):
    bb = BackboneConfig("small-cnn", 8, stride, (8, 8, 8))
    net = SDGNet(NetworkConfig(backbone=bb, decoder=DecoderConfig(24, (4,)), proj_dim=4))
    assert net.stem(torch.zeros(1, 3, 96, 96)).shape == (1, 8, size, size)
    assert net.decoder(torch.zeros(1, 8, size, size)).shape == (1, 3, 24, 24)


def test_stem_rejects_wrong_channels():
    with pytest.raises(ValueError):
        SDGNet(NetworkConfig(backbone=SMALL))(torch.zeros(1, 1, 96, 96))


def test_backbone_config_errors():
    with pytest.raises(ValueError):
        BackboneConfig("vgg")
    with pytest.raises(ValueError):
        BackboneConfig("resnet18", stem_channels=32)
    with pytest.raises(ValueError):
        BackboneConfig("small-cnn", widths=(8, 8))
    with pytest.raises(ValueError):
        BackboneConfig(plugin_layers=(3,))
    with pytest.raises(ValueError):
        DecoderConfig(0)


def test_parameter_count_goldens():
    def count(bb, use_gate=True, decoder=DecoderConfig()):
        return count_parameters(SDGNet(NetworkConfig(backbone=bb, use_gate=use_gate, decoder=decoder)))

    assert count(BackboneConfig(), use_gate=False) == 11_177_025
    assert count(BackboneConfig()) == 11_196_900
    small = BackboneConfig("small-cnn", 64, 2, (32, 48, 64))
    assert count(small, use_gate=False) == 136_161
    assert count(small) == 156_036
    desk = BackboneConfig("small-cnn", 32, 8, (32, 48, 64))
    assert count(desk, use_gate=False) == 130_273
    assert count(desk, decoder=DecoderConfig(24, (8,))) == 135_436


def test_no_gate_means_no_extra_modules():
    net = SDGNet(NetworkConfig(backbone=SMALL, use_gate=False))
    assert net.gate is None and net.proj is None and net.decoder is None
    with pytest.raises(ValueError):
        M.decode_style(torch.zeros(1, 16, 48, 48), net)


def test_forward_uses_structure_half():
    net = SDGNet(NetworkConfig(backbone=SMALL)).eval()
    x = torch.rand(2, 3, 96, 96)
    f = M.stem_forward(x, net)
    assert torch.allclose(net(x), M.backbone_forward(net.gate.structure(f), net))


# ---------------------------------------------------------------- decoder

@pytest.mark.parametrize("r", [24, 48, 96])
def test_decoder_output_shape(r):
    dec = StyleDecoder(16, 48, DecoderConfig(r, (8,)))
    assert dec(torch.randn(2, 16, 48, 48)).shape == (2, 3, r, r)


def test_decoder_rejects_non_power_of_two_ratio():
    with pytest.raises(ValueError):
        StyleDecoder(16, 48, DecoderConfig(36))


def test_decoder_zero_input_gives_bias_image():
    dec = StyleDecoder(4, 12, DecoderConfig(24, (4,)))
    for m in dec.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    assert torch.all(dec(torch.zeros(1, 4, 12, 12)) == 0)


def test_pointwise_matches_conv():
    pw = M.Pointwise(5, 3)
    x = torch.randn(2, 5, 7, 7)
    ref = torch.nn.functional.conv2d(x, pw.weight, pw.bias)
    assert torch.allclose(pw(x), ref, atol=1e-6)


def test_decoder_jacobian():
    torch.manual_seed(0)
    dec = StyleDecoder(3, 4, DecoderConfig(8, (3,))).double()
    f = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 8, 8, dtype=torch.float64)

    def fn():
        return (dec(f) * w).sum()

    fn().backward()
    (num,) = central_difference(fn, [f])
    assert relative_error(f.grad, num) <= 1e-6


# ---------------------------------------------------------------- plugins

CFG = StylePluginConfig("mixstyle", p=1.0)


def _feat(seed=0, n=4):
    return torch.randn(n, 5, 6, 6, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 2 + 1


def test_mixstyle_identity_cases():
    f = _feat()
    rng = np.random.default_rng(0)
    assert torch.allclose(mixstyle_apply(f, CFG, rng, True, lam=1.0), f, atol=1e-6)
    assert torch.allclose(mixstyle_apply(f, CFG, rng, True, perm=np.arange(4)), f, atol=1e-6)
    assert mixstyle_apply(f, CFG, rng, False) is f
    one = f[:1]
    assert mixstyle_apply(one, CFG, rng, True) is one


def test_mixstyle_lam_zero_swaps_statistics():
    f = _feat(1)
    perm = np.array([1, 0, 3, 2])
    out = mixstyle_apply(f, CFG, None, True, lam=0.0, perm=perm)
    mu = f.mean(dim=(2, 3))
    sig = f.var(dim=(2, 3), unbiased=False).sqrt()
    assert torch.allclose(out.mean(dim=(2, 3)), mu[perm], atol=1e-6)
    assert torch.allclose(out.var(dim=(2, 3), unbiased=False).sqrt(), sig[perm], atol=1e-5)


def test_mixstyle_needs_rng_in_training():
    with pytest.raises(RuntimeError):
        mixstyle_apply(_feat(), CFG, None, True)


def test_dsu_identity_cases():
    f = _feat(2)
    zeros = (np.zeros((4, 5)), np.zeros((4, 5)))
    cfg = StylePluginConfig("dsu", p=1.0)
    assert torch.allclose(dsu_apply(f, cfg, None, True, noise=zeros), f, atol=1e-6)
    same = f[:1].repeat(4, 1, 1, 1)
    assert torch.allclose(dsu_apply(same, cfg, np.random.default_rng(0), True), same, atol=1e-6)
    assert dsu_apply(f, cfg, np.random.default_rng(0), False) is f


@pytest.mark.parametrize("kind", ["mixstyle", "dsu"])
def test_plugins_are_identity_in_eval_mode(kind):
    bb = BackboneConfig("small-cnn", 8, 2, (8, 8, 8))
    plain = SDGNet(NetworkConfig(backbone=bb, use_gate=False))
    plugged = SDGNet(NetworkConfig(backbone=bb, use_gate=False, plugin=StylePluginConfig(kind, p=1.0)))
    plugged.load_state_dict(plain.state_dict())
    plugged.set_plugin_rng(np.random.default_rng(0))
    x = torch.rand(3, 3, 32, 32)
    plain.eval()
    plugged.eval()
    assert (plain(x) - plugged(x)).abs().max() < 1e-6
    plugged.train()
    plain.train()
    assert (plain(x) - plugged(x)).abs().max() > 1e-6


def test_plugin_layer_placement():
    body = M.build_body(BackboneConfig("small-cnn", 8, 2, (8, 8, 8), plugin_layers=(1,)),
                        StylePluginConfig("mixstyle"))
    kinds = [type(p).__name__ for p in body.plugins]
    assert kinds == ["Identity", "MixStyle", "Identity"]


def test_register_plugin():
    class Doubler(torch.nn.Module):
        def __init__(self, cfg):
            super().__init__()

        def forward(self, f):
            return 2 * f

    M.register_plugin("doubler", Doubler)
    try:
        assert isinstance(M.make_plugin(StylePluginConfig("doubler")), Doubler)
    finally:
        M.PLUGINS.pop("doubler")
    with pytest.raises(ValueError):
        M.register_plugin("none", Doubler)
    with pytest.raises(ValueError):
        M.make_plugin(StylePluginConfig("csu"))


# ---------------------------------------------------------------- composite

def test_composite_objective_gradients():
    errors = [tiny_composite_error(seed) for seed in range(20)]
    assert max(errors) <= 1e-3
