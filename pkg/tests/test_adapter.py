import pytest
import torch

from vlgrasp.adapter import (AdapterConfig, AdapterState, DepthStem, VLAdapter, VLAdapterLayer, tunable_parameters)
from vlgrasp.backbone import BackboneConfig, build_toy_backbone, tokenize
from vlgrasp.errors import AuditError, ConfigError, FusionError, InputError
from vlgrasp.model import GroundingModel

from oracles import count_parameters


def _inputs(cfg, batch=2):
    ids, valid = tokenize("the blue marker to the left of the apple", cfg.text_length)
    return (torch.rand(batch, 3, *cfg.image_size), torch.from_numpy(ids).repeat(batch, 1),
            torch.from_numpy(valid).repeat(batch, 1))


def test_config_validation():
    with pytest.raises(ConfigError):
        AdapterConfig(dim=30, heads=4)
    with pytest.raises(ConfigError):
        AdapterConfig(down_kernel=2)


def test_zero_initialized_adapters_are_identity():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    adapter = VLAdapter(cfg, AdapterConfig())
    inputs = _inputs(cfg)
    plain = bb.encode(*inputs)
    session = adapter.session()
    hooked = bb.encode(*inputs, interceptors=session.interceptors())
    assert torch.equal(hooked.sentence, plain.sentence)
    assert torch.equal(hooked.words, plain.words)
    for a, b in zip(hooked.stages, plain.stages):
        assert torch.equal(a.visual, b.visual) and torch.equal(a.text, b.text)
    # the adapters did run and produced taps for every stage boundary
    assert len(session.taps.visual) == cfg.num_stages - 1


def test_back_projection_changes_streams_once_trained():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    adapter = VLAdapter(cfg, AdapterConfig())
    with torch.no_grad():
        for layer in adapter.layers:
            layer.up_v.weight.normal_()
    inputs = _inputs(cfg)
    plain = bb.encode(*inputs)
    hooked = bb.encode(*inputs, interceptors=adapter.session().interceptors())
    assert not torch.equal(hooked.stages[-1].visual, plain.stages[-1].visual)


def test_state_carries_between_layers():
    layer = VLAdapterLayer(16, 32, AdapterConfig(dim=8, heads=2))
    f_v, f_t = torch.randn(1, 16, 8, 8), torch.randn(1, 5, 32)
    zero = AdapterState.zeros(1, 8, (8, 8), 5, f_v)
    prev = AdapterState(torch.randn(1, 8, 16, 16), torch.randn(1, 5, 8))
    out0 = layer(f_v, f_t, zero)[2]
    out1 = layer(f_v, f_t, prev)[2]
    assert not torch.allclose(out0.visual, out1.visual)
    assert out1.visual.shape == (1, 8, 8, 8)


def test_fuse_tokens_masks_padded_text():
    layer = VLAdapterLayer(16, 32, AdapterConfig(dim=8, heads=2)).eval()
    v, t = torch.randn(1, 6, 8), torch.randn(1, 4, 8)
    valid = torch.tensor([[True, True, False, False]])
    t2 = t.clone()
    t2[0, 2:] = 100.0
    a = layer.fuse_tokens(v, None, t, valid)
    b = layer.fuse_tokens(v, None, t2, valid)
    assert torch.allclose(a[0], b[0], atol=1e-5)
    assert a[1] is None


def test_fuse_tokens_width_and_depth_checks():
    layer = VLAdapterLayer(16, 32, AdapterConfig(dim=8, heads=2))
    with pytest.raises(FusionError):
        layer.fuse_tokens(torch.randn(1, 4, 7), None, torch.randn(1, 3, 8))
    with pytest.raises(FusionError):
        layer.fuse_tokens(torch.randn(1, 4, 8), torch.randn(1, 4, 8), torch.randn(1, 3, 8))


def test_depth_fusion_returns_depth_part():
    layer = VLAdapterLayer(16, 32, AdapterConfig(dim=8, heads=2, use_depth=True))
    v, d, t = layer.fuse_tokens(torch.randn(1, 4, 8), torch.randn(1, 4, 8), torch.randn(1, 3, 8))
    assert v.shape == (1, 4, 8) and d.shape == (1, 4, 8) and t.shape == (1, 3, 8)


def test_depth_required_when_enabled():
    cfg = BackboneConfig()
    adapter = VLAdapter(cfg, AdapterConfig(use_depth=True))
    with pytest.raises(InputError):
        adapter.session(None)
    tokens = adapter.session(torch.full((1, 64, 64), 0.6)).depth_tokens
    assert tokens.shape == (1, 32, 16, 16)


def test_depth_stem_normalization():
    stem = DepthStem(4, 4, (8, 8), scale=0.05)
    d = torch.full((1, 8, 8), 0.6)
    d[0, :2, :2] = 0.7
    n = stem.normalize(d)
    assert torch.allclose(n[0, 0, 4, 4], torch.tensor(0.0))
    assert torch.allclose(n[0, 0, 0, 0], torch.tensor(2.0))
    with pytest.raises(InputError):
        stem.normalize(torch.full((1, 8, 8), float("nan")))
    with pytest.raises(InputError):
        stem.normalize(-d)


def test_parameter_registry_matches_enumeration(tiny_config):
    model = GroundingModel(tiny_config("rgs", use_depth=True))
    reg = tunable_parameters(model)
    frozen, tunable = count_parameters(model)
    assert (reg.frozen_count, reg.tunable_count) == (frozen, tunable)
    assert reg.ratio() == pytest.approx(100.0 * tunable / frozen)


def test_backbone_only_registry_has_zero_ratio():
    reg = tunable_parameters(build_toy_backbone(BackboneConfig()))
    assert reg.tunable_count == 0 and reg.ratio() == 0.0


def test_unclassifiable_parameter_raises(tiny_config):
    model = GroundingModel(tiny_config())
    model.backbone.stem.weight.requires_grad_(True)
    with pytest.raises(AuditError):
        tunable_parameters(model)


def test_forward_layers_flag_controls_taps(tiny_config):
    with_fl = GroundingModel(tiny_config(forward_layers=True))
    without = GroundingModel(tiny_config(forward_layers=False))
    assert with_fl.adapter.layers[0].fl_v is not None
    assert without.adapter.layers[0].fl_v is None
    assert tunable_parameters(without).tunable_count < tunable_parameters(with_fl).tunable_count
