"""Frozen dual encoder (vision + language) with per-stage interception points.

The toy backbone stands in for a pretrained CLIP-style encoder pair: a stack of
convolutional stages for the image and a stack of transformer blocks for the
text, one text block per visual stage so the two streams advance in lockstep.
Hooks registered between consecutive stages may rewrite both streams; this is
where the vision-language adapters plug in.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_arrays, save_arrays
from .errors import AuditError, ConfigError, InputError, InterceptionError

PAD_ID = 0
UNK_ID = 1
SPECIAL_TOKENS = ("<pad>", "<unk>")

# Fixed toy vocabulary. Covers every word the synthetic generator emits plus a
# handful of common instruction words.
DEFAULT_WORDS = (
    "the a an that is to of in on at and with near next by from",
    "workspace table object thing one item",
    "upper middle lower left right center top bottom above below",
    "pick grasp up grab get me please",
    "red green blue yellow orange purple white black brown pink gray",
    "mustard bleach bottle apple lemon ball can cube block marker sponge tee bracket",
    "small large big little tall short",
)

# An interceptor receives (f_v, f_t, text_valid) for the stage it is attached to
# and returns replacement (f_v, f_t).
Interceptor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], tuple]


def default_vocabulary() -> list[str]:
    words = []
    for line in DEFAULT_WORDS:
        for w in line.split():
            if w not in words:
                words.append(w)
    return list(SPECIAL_TOKENS) + words


class Tokenizer:
    """Lower-casing whitespace tokenizer over a fixed vocabulary."""

    def __init__(self, vocabulary: Sequence[str] | None = None, length: int = 20):
        vocab = list(vocabulary) if vocabulary is not None else default_vocabulary()
        if vocab[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ConfigError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(vocab)) != len(vocab):
            raise ConfigError("vocabulary contains duplicate tokens")
        if length < 1:
            raise ConfigError("token length must be positive")
        self.vocabulary = vocab
        self.length = length
        self._ids = {w: i for i, w in enumerate(vocab)}

    def __len__(self):
        return len(self.vocabulary)

    @staticmethod
    def words(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    def __call__(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(ids, valid)``, both of length ``self.length``."""
        words = self.words(text)
        if not words:
            raise InputError("cannot tokenize an empty expression")
        words = words[: self.length]
        ids = np.full(self.length, PAD_ID, dtype=np.int64)
        ids[: len(words)] = [self._ids.get(w, UNK_ID) for w in words]
        valid = np.zeros(self.length, dtype=bool)
        valid[: len(words)] = True
        return ids, valid

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocabulary) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, length: int = 20) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], length=length)


def tokenize(expression: str, length: int = 20) -> tuple[np.ndarray, np.ndarray]:
    return Tokenizer(length=length)(expression)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple = (64, 64)
    stem_stride: int = 4
    stage_channels: tuple = (16, 32, 48, 64)
    stage_strides: tuple = (1, 2, 2, 2)
    text_length: int = 20
    text_channels: int = 32
    text_heads: int = 4
    sentence_dim: int = 64
    vocab_size: int = field(default_factory=lambda: len(default_vocabulary()))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(int(v) for v in self.stage_strides))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def stage_sizes(self) -> list[tuple[int, int]]:
        h, w = self.image_size[0] // self.stem_stride, self.image_size[1] // self.stem_stride
        sizes = []
        for s in self.stage_strides:
            h, w = h // s, w // s
            sizes.append((h, w))
        return sizes

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.num_stages}")
        if len(self.stage_strides) != self.num_stages:
            raise ConfigError("stage_strides and stage_channels differ in length")
        dims = (*self.image_size, self.stem_stride, *self.stage_channels, *self.stage_strides,
                self.text_length, self.text_channels, self.text_heads, self.sentence_dim, self.vocab_size)
        if any(d <= 0 for d in dims):
            raise ConfigError("all backbone dimensions must be positive")
        if self.text_channels % self.text_heads:
            raise ConfigError("text_channels must be divisible by text_heads")
        h, w = self.image_size
        if h % self.stem_stride or w % self.stem_stride:
            raise ConfigError(f"image size {self.image_size} not divisible by stem stride {self.stem_stride}")
        h, w = h // self.stem_stride, w // self.stem_stride
        for s in self.stage_strides:
            if h % s or w % s:
                raise ConfigError(f"stage stride {s} does not divide grid {(h, w)}")
            h, w = h // s, w // s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class StageFeatures:
    index: int  # 1-based stage number
    visual: torch.Tensor  # (B, C_i, H_i, W_i)
    text: torch.Tensor  # (B, L, C_t)


@dataclass
class EncodedOutputs:
    stages: list
    sentence: torch.Tensor  # (B, C_s)
    words: torch.Tensor  # (B, L, C_t)
    text_valid: torch.Tensor  # (B, L) bool, True for real tokens


class VisualStage(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride) if (c_in != c_out or stride != 1) else nn.Identity()
        self.norm = nn.GroupNorm(1, c_out)

    def forward(self, x):
        y = self.conv2(F.gelu(self.conv1(x)))
        return F.gelu(self.norm(y + self.skip(x)))


class TextBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, valid):
        h = self.ln1(x).transpose(0, 1)
        a = self.attn
        # The functional form always takes the same kernel path, whether or not
        # the inputs carry gradients, so hooked and plain passes agree bitwise.
        out = F.multi_head_attention_forward(
            h, h, h, a.embed_dim, a.num_heads, a.in_proj_weight, a.in_proj_bias, None, None, False, 0.0,
            a.out_proj.weight, a.out_proj.bias, training=False, key_padding_mask=~valid, need_weights=False,
        )[0]
        x = x + out.transpose(0, 1)
        return x + self.mlp(self.ln2(x))


class ToyBackbone(nn.Module):
    """Seeded, frozen stand-in for a pretrained image/text encoder pair."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        chans = config.stage_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stem = nn.Conv2d(3, chans[0], config.stem_stride, stride=config.stem_stride)
            self.visual_stages = nn.ModuleList(
                VisualStage(chans[max(i - 1, 0)], chans[i], config.stage_strides[i])
                for i in range(config.num_stages)
            )
            self.token_embedding = nn.Embedding(config.vocab_size, config.text_channels)
            self.position_embedding = nn.Parameter(0.02 * torch.randn(config.text_length, config.text_channels))
            self.text_blocks = nn.ModuleList(
                TextBlock(config.text_channels, config.text_heads) for _ in range(config.num_stages)
            )
            self.text_norm = nn.LayerNorm(config.text_channels)
            self.sentence_proj = nn.Linear(config.text_channels, config.sentence_dim)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Frozen encoder: stays in eval mode whatever the parent module does.
        return super().train(False)

    def encode(
        self,
        image: torch.Tensor,
        tokens: torch.Tensor,
        text_valid: torch.Tensor,
        interceptors: Optional[Sequence[Optional[Interceptor]]] = None,
    ) -> EncodedOutputs:
        """Run both encoders stage by stage.

        ``interceptors[k]`` (0-based) sees the output of stage ``k + 1`` and its
        result is what stage ``k + 2`` consumes. Gradients flow through the
        frozen blocks, so hooks placed early still receive a training signal.
        """
        cfg = self.config
        interceptors = list(interceptors or [])
        if len(interceptors) > cfg.num_stages - 1:
            raise InputError(f"at most {cfg.num_stages - 1} interceptors, got {len(interceptors)}")
        self._check_inputs(image, tokens, text_valid)
        if not bool(text_valid.any(dim=1).all()):
            raise InputError("every expression needs at least one valid token")

        f_v = self.stem(image)
        f_t = self.token_embedding(tokens) + self.position_embedding
        stages = []
        for i in range(cfg.num_stages):
            f_v = self.visual_stages[i](f_v)
            f_t = self.text_blocks[i](f_t, text_valid)
            hook = interceptors[i] if i < len(interceptors) else None
            if hook is not None:
                new_v, new_t = hook(f_v, f_t, text_valid)
                if new_v.shape != f_v.shape or new_t.shape != f_t.shape:
                    raise InterceptionError(
                        f"stage {i + 1} hook returned {tuple(new_v.shape)}/{tuple(new_t.shape)}, "
                        f"expected {tuple(f_v.shape)}/{tuple(f_t.shape)}"
                    )
                f_v, f_t = new_v, new_t
            stages.append(StageFeatures(i + 1, f_v, f_t))

        words = self.text_norm(f_t)
        w = text_valid.unsqueeze(-1).to(words.dtype)
        pooled = (words * w).sum(1) / w.sum(1)
        return EncodedOutputs(stages, self.sentence_proj(pooled), words, text_valid)

    forward = encode

    def _check_inputs(self, image, tokens, text_valid):
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != cfg.image_size:
            raise InputError(f"image must be (B, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {tuple(image.shape)}")
        if tokens.shape != (image.shape[0], cfg.text_length) or text_valid.shape != tokens.shape:
            raise InputError(f"tokens must be (B, {cfg.text_length}), got {tuple(tokens.shape)}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise InputError("token id outside vocabulary")

    def export_weights(self, path) -> Path:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        return save_arrays(path, arrays, {"kind": "backbone", "config": self.config.to_dict(), "seed": self.config.seed})


def build_toy_backbone(config: BackboneConfig) -> ToyBackbone:
    config.validate()
    return ToyBackbone(config)


def load_backbone_weights(path, config: BackboneConfig | None = None) -> ToyBackbone:
    """Build a backbone from an exported archive.

    This is also the import boundary for externally converted weights: any
    archive whose array names and shapes match the toy module's state dict loads.
    """
    arrays, meta = load_arrays(path)
    if config is None:
        config = BackboneConfig.from_dict(meta["config"])
    backbone = ToyBackbone(config)
    state = backbone.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise InputError(f"weights archive lacks arrays: {sorted(missing)[:5]}")
    for name, ref in state.items():
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise InputError(f"{name}: shape {arrays[name].shape} != {tuple(ref.shape)}")
    backbone.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})
    backbone.requires_grad_(False)
    return backbone


def snapshot(backbone: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in backbone.named_parameters()}


def assert_frozen(backbone: nn.Module, snap: dict[str, torch.Tensor]) -> bool:
    """True iff every parameter is bitwise equal to its snapshot."""
    params = dict(backbone.named_parameters())
    if set(params) != set(snap):
        raise AuditError("snapshot does not cover the same parameters as the backbone")
    same = True
    for name, p in params.items():
        ref = snap[name]
        if ref.shape != p.shape:
            raise AuditError(f"{name}: snapshot shape {tuple(ref.shape)} != {tuple(p.shape)}")
        if not torch.equal(p.detach(), ref):
            same = False
    return same
