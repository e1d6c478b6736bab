"""Multimodal decoder: pixel-sentence fusion followed by pixel-words transformer layers."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    ffn_ratio: int = 4
    scales: tuple = (2, 3, 4)  # 1-based backbone stages fed to the decoder
    stride: int = 16  # decoding grid = input size / stride

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.dim <= 0 or self.heads <= 0 or self.layers <= 0 or self.ffn_ratio <= 0:
            raise ConfigError("decoder dims must be positive")
        if self.dim % self.heads:
            raise ConfigError("decoder dim must be divisible by heads")
        if not self.scales:
            raise ConfigError("decoder needs at least one visual scale")
        if self.stride < 4 or self.stride & (self.stride - 1):
            raise ConfigError("decoder stride must be a power of two >= 4")

    def to_dict(self) -> dict:
        return asdict(self)

    def grid(self, image_size) -> tuple[int, int]:
        h, w = image_size
        if h % self.stride or w % self.stride:
            raise ConfigError(f"image size {image_size} not divisible by decoder stride {self.stride}")
        return h // self.stride, w // self.stride


class PixelSentenceFusion(nn.Module):
    """Project each visual scale to the decoding grid, gate it by the sentence, sum."""

    def __init__(self, in_channels, sentence_dim, dim, grid):
        super().__init__()
        if len(in_channels) < 2:
            warnings.warn("pixel-sentence fusion with a single scale: no cross-scale addition", stacklevel=2)
        self.grid = tuple(grid)
        self.visual_proj = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels)
        self.sentence_proj = nn.ModuleList(nn.Linear(sentence_dim, dim) for _ in in_channels)

    def forward(self, features, sentence):
        if len(features) != len(self.visual_proj):
            raise InputError(f"expected {len(self.visual_proj)} scales, got {len(features)}")
        out = 0
        for f, vproj, sproj in zip(features, self.visual_proj, self.sentence_proj):
            v = vproj(f)
            if tuple(v.shape[-2:]) != self.grid:
                v = F.interpolate(v, size=self.grid, mode="bilinear", align_corners=False)
            out = out + v * sproj(sentence)[:, :, None, None]
        return out


class PixelWordsLayer(nn.Module):
    """Post-norm decoder layer: self-attention, cross-attention to words, FFN."""

    def __init__(self, dim, word_dim, heads, ffn_ratio):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, kdim=word_dim, vdim=word_dim, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_ratio * dim), nn.GELU(), nn.Linear(ffn_ratio * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, words, word_pad):
        x = self.norm1(self.self_attn(x, x, x, need_weights=False)[0] + x)
        x = self.norm2(self.cross_attn(x, words, words, key_padding_mask=word_pad, need_weights=False)[0] + x)
        return self.norm3(self.ffn(x) + x)


class PixelWordsDecoder(nn.Module):
    def __init__(self, dim, word_dim, heads, layers, ffn_ratio, grid):
        super().__init__()
        self.grid = tuple(grid)
        self.position = nn.Parameter(0.02 * torch.randn(1, grid[0] * grid[1], dim))
        self.layers = nn.ModuleList(PixelWordsLayer(dim, word_dim, heads, ffn_ratio) for _ in range(layers))

    def forward(self, fused_map, words, text_valid):
        """``fused_map`` (B, C_d, h, w) -> multimodal tokens f_c (B, h*w, C_d)."""
        if not bool(text_valid.any(dim=1).all()):
            raise InputError("word mask has no valid token")
        x = fused_map.flatten(2).transpose(1, 2) + self.position
        pad = ~text_valid
        for layer in self.layers:
            x = layer(x, words, pad)
        return x


class MultimodalDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, stage_channels, text_channels, sentence_dim, image_size):
        super().__init__()
        self.config = config
        self.grid = config.grid(image_size)
        for s in config.scales:
            if not 1 <= s <= len(stage_channels):
                raise ConfigError(f"decoder scale {s} outside 1..{len(stage_channels)}")
        self.fusion = PixelSentenceFusion(
            [stage_channels[s - 1] for s in config.scales], sentence_dim, config.dim, self.grid
        )
        self.words = PixelWordsDecoder(config.dim, text_channels, config.heads, config.layers, config.ffn_ratio, self.grid)

    def forward(self, visual_scales, sentence, words, text_valid):
        f_vs = self.fusion(visual_scales, sentence)
        return self.words(f_vs, words, text_valid)
