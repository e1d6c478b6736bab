"""Task models: frozen encoder + VL-adapters + multimodal decoder + task head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .adapter import AdapterConfig, VLAdapter, tunable_parameters
from .backbone import BackboneConfig, ToyBackbone, build_toy_backbone
from .decoder import DecoderConfig, MultimodalDecoder
from .errors import ConfigError, InputError
from .heads import AffordanceHead, GraspHead, HeadConfig, SegmentationHead

TASKS = ("res", "rgs", "rga")
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


@dataclass(frozen=True)
class ModelConfig:
    task: str = "res"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        self.backbone.validate()
        self.decoder.grid(self.backbone.image_size)

    @property
    def use_depth(self) -> bool:
        return self.adapter.use_depth

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "backbone": self.backbone.to_dict(),
            "adapter": self.adapter.to_dict(),
            "decoder": self.decoder.to_dict(),
            "heads": self.heads.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"task", "backbone", "adapter", "decoder", "heads"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        try:
            return cls(
                task=d.get("task", "res"),
                backbone=BackboneConfig.from_dict(d.get("backbone", {})),
                adapter=AdapterConfig(**d.get("adapter", {})),
                decoder=DecoderConfig(**_tuples(d.get("decoder", {}))),
                heads=HeadConfig(**d.get("heads", {})),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


class ResOutput(NamedTuple):
    mask_logits: torch.Tensor  # (B, H, W)
    mask_logits4: torch.Tensor  # (B, H/4, W/4), the sites L_tp is computed on


class GroundingModel(nn.Module):
    """One model per task; only the backbone is frozen.

    The decoder reads stages ``decoder.scales``. With forward layers enabled,
    scale ``i`` receives ``f_v^i`` plus the adapter tap of stage ``i`` (the last
    stage has no adapter after it, hence no tap) and the word features receive
    the sum of the text taps.
    """

    def __init__(self, config: ModelConfig, backbone: Optional[ToyBackbone] = None):
        super().__init__()
        self.config = config
        bcfg = config.backbone
        self.backbone = backbone if backbone is not None else build_toy_backbone(bcfg)
        if self.backbone.config != bcfg:
            raise ConfigError("backbone does not match the model config")
        self.adapter = VLAdapter(bcfg, config.adapter)
        self.decoder = MultimodalDecoder(config.decoder, bcfg.stage_channels, bcfg.text_channels,
                                         bcfg.sentence_dim, bcfg.image_size)
        args = (config.heads, config.decoder.dim, bcfg.sentence_dim, self.decoder.grid, bcfg.image_size)
        head = {"res": SegmentationHead, "rgs": GraspHead, "rga": AffordanceHead}[config.task]
        self.head = head(*args)

    @property
    def task(self) -> str:
        return self.config.task

    def parameter_registry(self):
        return tunable_parameters(self)

    def features(self, image, tokens, text_valid, depth=None):
        """Decoder tokens ``f_c`` (B, h*w, C) and the sentence feature ``f_s``."""
        if self.config.use_depth and depth is None:
            raise InputError("this model was built with depth; pass a depth map")
        image = (image - IMAGE_MEAN) / IMAGE_STD
        session = self.adapter.session(depth if self.config.use_depth else None)
        enc = self.backbone.encode(image, tokens, text_valid, session.interceptors())
        words = enc.words
        scales = []
        use_taps = self.config.adapter.forward_layers
        for s in self.config.decoder.scales:
            f_v = enc.stages[s - 1].visual
            if use_taps and s - 1 < len(session.taps.visual):
                f_v = f_v + session.taps.visual[s - 1]
            scales.append(f_v)
        if use_taps and session.taps.text:
            words = words + torch.stack(session.taps.text).sum(0)
        f_c = self.decoder(scales, enc.sentence, words, text_valid)
        return f_c, enc.sentence

    def forward(self, image, tokens, text_valid, depth=None):
        f_c, f_s = self.features(image, tokens, text_valid, depth)
        if self.task == "res":
            full, low = self.head(f_c, f_s)
            return ResOutput(full[:, 0], low[:, 0])
        return self.head(f_c, f_s)


def build_model(config: ModelConfig) -> GroundingModel:
    return GroundingModel(config)
