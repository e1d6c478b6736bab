import pytest
import torch

from vlgrasp.backbone import (PAD_ID, UNK_ID, BackboneConfig, Tokenizer, assert_frozen, build_toy_backbone,
                              load_backbone_weights, snapshot, tokenize)
from vlgrasp.datasynth import PALETTE, COLORS
from vlgrasp.errors import AuditError, ConfigError, InputError, InterceptionError


def _inputs(cfg, batch=2, text="the red cube"):
    image = torch.rand(batch, 3, *cfg.image_size)
    ids, valid = tokenize(text, cfg.text_length)
    return image, torch.from_numpy(ids).repeat(batch, 1), torch.from_numpy(valid).repeat(batch, 1)


def test_stage_shapes_follow_config():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    out = bb.encode(*_inputs(cfg))
    assert len(out.stages) == cfg.num_stages
    for st, c, (h, w) in zip(out.stages, cfg.stage_channels, cfg.stage_sizes):
        assert st.visual.shape == (2, c, h, w)
        assert st.text.shape == (2, cfg.text_length, cfg.text_channels)
    assert out.sentence.shape == (2, cfg.sentence_dim)
    assert cfg.stage_sizes == [(16, 16), (8, 8), (4, 4), (2, 2)]


def test_same_seed_same_weights_and_all_frozen():
    a, b = build_toy_backbone(BackboneConfig(seed=5)), build_toy_backbone(BackboneConfig(seed=5))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert all(not p.requires_grad for p in a.parameters())
    c = build_toy_backbone(BackboneConfig(seed=6))
    assert not torch.equal(a.stem.weight, c.stem.weight)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_toy_backbone(BackboneConfig())
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("kw", [
    {"stage_channels": (16,), "stage_strides": (1,)},
    {"image_size": (62, 64)},
    {"text_channels": 30, "text_heads": 4},
    {"stage_channels": (16, 0)},
])
def test_invalid_config_raises(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**{"stage_strides": (1, 2), "stage_channels": (16, 32), **kw})


def test_encode_rejects_bad_inputs():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    image, ids, valid = _inputs(cfg)
    with pytest.raises(InputError):
        bb.encode(image[:, :, :32], ids, valid)
    with pytest.raises(InputError):
        bb.encode(image, ids, torch.zeros_like(valid))
    with pytest.raises(InputError):
        bb.encode(image, ids, valid, [None] * cfg.num_stages)


def test_interceptor_sees_stage_output_and_can_rewrite_it():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    inputs = _inputs(cfg)
    plain = bb.encode(*inputs)
    seen = []

    def hook(f_v, f_t, valid):
        seen.append(f_v.clone())
        return f_v * 0, f_t

    out = bb.encode(*inputs, interceptors=[hook])
    assert torch.equal(seen[0], plain.stages[0].visual)
    assert torch.equal(out.stages[0].visual, torch.zeros_like(seen[0]))
    assert not torch.equal(out.stages[1].visual, plain.stages[1].visual)


def test_identity_interceptors_change_nothing():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    inputs = _inputs(cfg)
    plain = bb.encode(*inputs)
    out = bb.encode(*inputs, interceptors=[lambda v, t, m: (v, t)] * (cfg.num_stages - 1))
    assert torch.equal(out.sentence, plain.sentence)
    for a, b in zip(out.stages, plain.stages):
        assert torch.equal(a.visual, b.visual) and torch.equal(a.text, b.text)


def test_bad_interceptor_shape_raises():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    with pytest.raises(InterceptionError):
        bb.encode(*_inputs(cfg), interceptors=[lambda v, t, m: (v[:, :1], t)])


def test_padding_does_not_leak_into_sentence():
    cfg = BackboneConfig()
    bb = build_toy_backbone(cfg)
    image, ids, valid = _inputs(cfg, batch=1)
    ids2 = ids.clone()
    ids2[0, ~valid[0]] = 7  # garbage in padded slots
    a = bb.encode(image, ids, valid)
    b = bb.encode(image, ids2, valid)
    assert torch.allclose(a.sentence, b.sentence, atol=1e-6)


def test_frozen_audit_detects_change():
    bb = build_toy_backbone(BackboneConfig())
    snap = snapshot(bb)
    assert assert_frozen(bb, snap)
    with torch.no_grad():
        bb.stem.weight[0, 0, 0, 0] += 1e-7
    assert assert_frozen(bb, snap) is False
    with pytest.raises(AuditError):
        assert_frozen(bb, {k: v for k, v in list(snap.items())[1:]})


def test_backbone_stays_in_eval_mode():
    bb = build_toy_backbone(BackboneConfig())
    bb.train()
    assert not bb.training


def test_weights_round_trip(tmp_path):
    cfg = BackboneConfig(seed=9)
    bb = build_toy_backbone(cfg)
    path = bb.export_weights(tmp_path / "bb.npz")
    loaded = load_backbone_weights(path)
    assert loaded.config == cfg
    for k, v in bb.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    assert all(not p.requires_grad for p in loaded.parameters())


def test_tokenizer_basics(tmp_path):
    tok = Tokenizer(length=6)
    ids, valid = tok("The RED cube, please")
    assert valid.tolist() == [True] * 4 + [False] * 2
    assert ids[-1] == PAD_ID
    assert tok("zzz")[0][0] == UNK_ID
    with pytest.raises(InputError):
        tok("  ,, ")
    tok.save(tmp_path / "vocab.txt")
    assert Tokenizer.load(tmp_path / "vocab.txt", 6).vocabulary == tok.vocabulary


def test_vocabulary_covers_generator_words():
    tok = Tokenizer()
    words = {w for k in PALETTE for w in k.name.split()} | set(COLORS)
    words |= set("the that is to of in workspace pick up above below upper middle lower left right center".split())
    missing = [w for w in words if tok(w)[0][0] == UNK_ID]
    assert not missing
