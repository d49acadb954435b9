import numpy as np
import pytest
import torch

from regfreenet.core import ConfigError, VoxelVolume
from regfreenet.ndp import NDPConfig
from regfreenet.network import (
    Encoder,
    FeaturePyramid,
    NetworkConfig,
    PositionDecoder,
    RegFreeNet,
    SlopeHead,
    build_model,
    regfreenet_forward,
)
from regfreenet.objectives import seg_loss

from .helpers import finite_difference_check

TINY = dict(channels=(4, 8, 16, 32), input_size=16, ndp=NDPConfig(branch_channels=2, gcn_hidden=4), spb_hidden=8)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(channels=(8, 16, 32))
    with pytest.raises(ConfigError):
        NetworkConfig(channels=(8, 16, 16, 32))
    with pytest.raises(ConfigError):
        NetworkConfig(input_size=40)
    cfg = NetworkConfig.full_scale()
    assert cfg.channels == (64, 128, 256, 512) and cfg.input_size == (128, 128, 128)
    assert cfg.spb_hidden == 256 and cfg.spb_dropout == 0.5


def test_config_round_trip():
    cfg = NetworkConfig(**TINY)
    back = NetworkConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.fingerprint() == cfg.fingerprint()
    assert NetworkConfig(**{**TINY, "use_spb": False}).fingerprint() != cfg.fingerprint()


def test_encoder_pyramid_32():
    enc = Encoder(1, (8, 16, 32, 64))
    pyr = enc(torch.randn(1, 1, 32, 32, 32))
    assert [tuple(m.shape[1:]) for m in pyr] == [
        (8, 16, 16, 16), (16, 8, 8, 8), (32, 4, 4, 4), (64, 2, 2, 2)]


def test_encoder_rejects_indivisible():
    with pytest.raises(ValueError):
        Encoder(1, (4, 8, 16, 32))(torch.randn(1, 1, 24, 32, 32))


def test_encoder_zero():
    enc = Encoder(1, (4, 8, 16, 32))
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    assert all(m.abs().max() == 0 for m in enc(torch.zeros(1, 1, 16, 16, 16)))


def test_decoder_range_and_shape():
    enc, dec = Encoder(1, (4, 8, 16, 32)), PositionDecoder(1, (4, 8, 16, 32))
    x = torch.randn(2, 1, 32, 32, 32)
    out = dec(enc(x), x)
    assert out.shape == (2, 1, 32, 32, 32)
    assert out.min() >= 0 and out.max() <= 1


def test_decoder_zero_params_half():
    dec = PositionDecoder(1, (4, 8, 16, 32))
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    pyr = FeaturePyramid(*(torch.zeros(1, c, s, s, s) for c, s in zip((4, 8, 16, 32), (16, 8, 4, 2))))
    out = dec(pyr, torch.zeros(1, 1, 32, 32, 32))
    torch.testing.assert_close(out, torch.full_like(out, 0.5))


def test_decoder_gradient_finite_differences():
    torch.manual_seed(0)
    channels = (2, 3, 4, 5)
    enc, dec = Encoder(1, channels).double(), PositionDecoder(1, channels).double()
    x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
    pyr = FeaturePyramid(*(m.detach() for m in enc(x)))
    y = (torch.rand(1, 1, 16, 16, 16, dtype=torch.float64) > 0.8).double()
    errors = finite_difference_check(dec, lambda: seg_loss(dec(pyr, x), y), h=1e-6, per_tensor=6, directions=2)
    assert max(errors.values()) < 1e-5, errors


def test_slope_head_zero():
    head = SlopeHead(64 * 8, 16)
    with torch.no_grad():
        head.fc1.bias.zero_()
        head.fc2.bias.zero_()
    torch.testing.assert_close(head(torch.zeros(3, 64, 2, 2, 2)), torch.zeros(3, 2))


def test_slope_head_flatten_mismatch():
    with pytest.raises(ValueError):
        SlopeHead(64 * 8)(torch.zeros(1, 64, 4, 4, 4))


def test_slope_head_dropout_modes():
    head = SlopeHead(32, 64, 0.5)
    x = torch.randn(2, 32, 1, 1, 1)
    head.eval()
    torch.testing.assert_close(head(x), head(x))
    head.train()
    torch.manual_seed(5)
    a = head(x)
    torch.manual_seed(5)
    b = head(x)
    torch.testing.assert_close(a, b)
    torch.manual_seed(6)
    assert not torch.equal(a, head(x))


@pytest.mark.parametrize("use_ndp", [False, True])
@pytest.mark.parametrize("use_spb", [False, True])
def test_ablation_variants(use_ndp, use_spb):
    cfg = NetworkConfig(channels=(4, 8, 16, 32), input_size=32, use_ndp=use_ndp, use_spb=use_spb,
                        ndp=NDPConfig(branch_channels=4))
    net = build_model(cfg, seed=0)
    assert (net.ndp is not None) == use_ndp
    assert (net.slope_head is not None) == use_spb
    prob, k = net(torch.randn(2, 1, 32, 32, 32))
    assert prob.shape == (2, 1, 32, 32, 32)
    assert (k is not None) == use_spb
    if use_spb:
        assert k.shape == (2, 2)


def test_plain_variant_is_encoder_decoder():
    cfg = NetworkConfig(**{**TINY, "use_ndp": False, "use_spb": False})
    net = build_model(cfg, seed=0)
    names = {n.split(".")[0] for n, _ in net.named_parameters()}
    assert names == {"encoder", "decoder"}


def test_variable_size_skips_slope_head():
    net = build_model(NetworkConfig(**TINY), seed=0)
    prob, k = net(torch.randn(1, 1, 32, 16, 48))
    assert prob.shape == (1, 1, 32, 16, 48) and k is None


def test_regfreenet_forward_on_volume():
    net = build_model(NetworkConfig(**{**TINY, "input_size": 32}), seed=0)
    vol = VoxelVolume(np.random.default_rng(0).normal(size=(32, 32, 32)))
    prob, k = regfreenet_forward(vol, net)
    assert prob.shape == (32, 32, 32) and k is not None
    assert net.training  # mode restored
    prob2, k2 = regfreenet_forward(vol, net)
    np.testing.assert_array_equal(prob, prob2)
    assert k == k2


def test_every_parameter_receives_gradient():
    torch.manual_seed(1)
    # a 2-wide GCN output can be all-negative at init, which is a seed accident rather than a wiring bug
    cfg = NetworkConfig(**{**TINY, "ndp": NDPConfig(branch_channels=4, gcn_hidden=8)})
    net = build_model(cfg, seed=1, dtype=torch.float64)
    net.eval()
    x = torch.rand(2, 1, 16, 16, 16, dtype=torch.float64)
    y = (torch.rand_like(x) > 0.8).double()
    prob, k = net(x)
    (seg_loss(prob, y) + (k - 0.2).abs().sum()).backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or p.grad.abs().max() == 0]
    assert not dead
