import warnings

import pytest
import torch

from vlgrasp.decoder import DecoderConfig, MultimodalDecoder, PixelSentenceFusion, PixelWordsDecoder
from vlgrasp.errors import ConfigError, InputError

STAGES = (16, 32, 48, 64)


def _features(batch=2):
    return [torch.randn(batch, c, s, s) for c, s in zip(STAGES[1:], (8, 4, 2))]


def test_output_tokens_on_decoding_grid():
    dec = MultimodalDecoder(DecoderConfig(), STAGES, 32, 64, (64, 64))
    words = torch.randn(2, 20, 32)
    valid = torch.zeros(2, 20, dtype=torch.bool)
    valid[:, :5] = True
    out = dec(_features(), torch.randn(2, 64), words, valid)
    assert dec.grid == (4, 4)
    assert out.shape == (2, 16, 64)


def test_grid_requires_divisible_size():
    with pytest.raises(ConfigError):
        DecoderConfig(stride=16).grid((72, 64))
    with pytest.raises(ConfigError):
        DecoderConfig(stride=12)
    with pytest.raises(ConfigError):
        MultimodalDecoder(DecoderConfig(scales=(5,)), STAGES, 32, 64, (64, 64))


def test_single_scale_warns():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        PixelSentenceFusion([32], 64, 16, (4, 4))
    assert any("scale" in str(w.message) for w in rec)


def test_sentence_gates_fusion():
    fusion = PixelSentenceFusion([32, 48], 8, 16, (4, 4))
    for proj in fusion.sentence_proj:
        torch.nn.init.zeros_(proj.bias)
    feats = [torch.randn(1, 32, 8, 8), torch.randn(1, 48, 4, 4)]
    assert torch.equal(fusion(feats, torch.zeros(1, 8)), torch.zeros(1, 16, 4, 4))
    out = fusion(feats, torch.randn(1, 8))
    assert out.shape == (1, 16, 4, 4) and out.abs().sum() > 0


def test_padding_words_do_not_matter():
    dec = PixelWordsDecoder(16, 32, 2, 2, 2, (4, 4)).eval()
    fused = torch.randn(1, 16, 4, 4)
    words = torch.randn(1, 6, 32)
    valid = torch.tensor([[True, True, True, False, False, False]])
    words2 = words.clone()
    words2[0, 3:] = 50.0
    assert torch.allclose(dec(fused, words, valid), dec(fused, words2, valid), atol=1e-5)


def test_all_padding_rejected():
    dec = PixelWordsDecoder(16, 32, 2, 1, 2, (4, 4))
    with pytest.raises(InputError):
        dec(torch.randn(1, 16, 4, 4), torch.randn(1, 6, 32), torch.zeros(1, 6, dtype=torch.bool))


def test_decoder_output_depends_on_words():
    dec = MultimodalDecoder(DecoderConfig(), STAGES, 32, 64, (64, 64)).eval()
    feats, sent = _features(1), torch.randn(1, 64)
    valid = torch.ones(1, 20, dtype=torch.bool)
    a = dec(feats, sent, torch.randn(1, 20, 32), valid)
    b = dec(feats, sent, torch.randn(1, 20, 32), valid)
    assert not torch.allclose(a, b)
