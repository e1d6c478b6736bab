"""Bi-directional vision-language adapter with an optional depth token stream.

One :class:`VLAdapterLayer` sits after each backbone stage except the last. A
layer projects the stage's visual map and text tokens to a shared width, adds
the previous layer's fused tokens, runs one transformer layer over the
concatenation ``[visual, depth, text]``, and writes the result back into both
backbone streams. Separate forward layers carry the fused tokens out of the
backbone to the decoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AuditError, ConfigError, FusionError, InputError


@dataclass(frozen=True)
class AdapterConfig:
    dim: int = 32
    heads: int = 4
    ffn_ratio: int = 2
    down_kernel: int = 1
    use_depth: bool = False
    forward_layers: bool = True
    back_projection: bool = True
    # Depth is referenced to the per-image median (the table plane) and divided
    # by this many meters before the stem.
    depth_scale: float = 0.05

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.ffn_ratio <= 0:
            raise ConfigError("adapter dims must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"adapter dim {self.dim} not divisible by {self.heads} heads")
        if self.down_kernel % 2 == 0:
            raise ConfigError("down-projection kernel must be odd")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdapterState:
    """Fused tokens carried from one adapter layer to the next.

    Visual and depth tokens are kept as maps ``(B, C_a, h, w)`` so that they can
    be resampled when the stage grid shrinks; ``tokens()`` flattens them.
    """

    visual: torch.Tensor
    text: torch.Tensor  # (B, L, C_a)
    depth: Optional[torch.Tensor] = None

    @classmethod
    def zeros(cls, batch, dim, grid, length, like: torch.Tensor, depth: Optional[torch.Tensor] = None):
        z = like.new_zeros
        return cls(z(batch, dim, *grid), z(batch, length, dim), depth)

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.visual.shape[-2:])

    @staticmethod
    def tokens(m: torch.Tensor) -> torch.Tensor:
        return m.flatten(2).transpose(1, 2)


@dataclass
class ForwardTaps:
    visual: list = field(default_factory=list)  # per stage, (B, C_i, H_i, W_i)
    text: list = field(default_factory=list)  # per stage, (B, L, C_t)


def resample_bilinear(m: torch.Tensor, grid) -> torch.Tensor:
    if tuple(m.shape[-2:]) == tuple(grid):
        return m
    return F.interpolate(m, size=tuple(grid), mode="bilinear", align_corners=False)


def resample_depth(m: torch.Tensor, grid) -> torch.Tensor:
    if tuple(m.shape[-2:]) == tuple(grid):
        return m
    return F.adaptive_avg_pool2d(m, tuple(grid))


class DepthStem(nn.Module):
    """Strided patch embedding of a depth image onto the stage-1 grid."""

    def __init__(self, dim, patch, image_size, scale):
        super().__init__()
        self.patch = patch
        self.image_size = tuple(image_size)
        self.scale = scale
        self.embed = nn.Conv2d(1, dim, patch, stride=patch)

    def normalize(self, depth: torch.Tensor) -> torch.Tensor:
        if depth.ndim == 3:
            depth = depth.unsqueeze(1)
        if not torch.isfinite(depth).all():
            raise InputError("depth contains NaN or inf")
        if (depth < 0).any():
            raise InputError("depth must be non-negative")
        if tuple(depth.shape[-2:]) != self.image_size:
            depth = F.interpolate(depth, size=self.image_size, mode="bilinear", align_corners=False)
        plane = depth.flatten(1).median(dim=1).values.view(-1, 1, 1, 1)
        return (depth - plane) / self.scale

    def forward(self, depth: torch.Tensor) -> torch.Tensor:
        return self.embed(self.normalize(depth))


class VLAdapterLayer(nn.Module):
    def __init__(self, visual_channels, text_channels, config: AdapterConfig):
        super().__init__()
        d = config.dim
        self.config = config
        self.down_v = nn.Conv2d(visual_channels, d, config.down_kernel, padding=config.down_kernel // 2)
        self.down_t = nn.Linear(text_channels, d)
        self.ln_v = nn.LayerNorm(d, eps=1e-5)
        self.ln_t = nn.LayerNorm(d, eps=1e-5)
        self.ln_d = nn.LayerNorm(d, eps=1e-5) if config.use_depth else None
        self.attn = nn.MultiheadAttention(d, config.heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, config.ffn_ratio * d), nn.GELU(), nn.Linear(config.ffn_ratio * d, d))
        self.up_v = nn.Conv2d(d, visual_channels, 1)
        self.up_t = nn.Linear(d, text_channels)
        # Zero-initialized write-back: at step 0 the adapter is an exact identity
        # on the frozen streams.
        for m in (self.up_v, self.up_t):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        self.fl_v = nn.Conv2d(d, visual_channels, 1) if config.forward_layers else None
        self.fl_t = nn.Linear(d, text_channels) if config.forward_layers else None

    def down_project(self, f_v, f_t, prev: AdapterState):
        """Returns the projected visual map ``(B, C_a, H_i, W_i)`` and text tokens."""
        v = self.down_v(f_v) + resample_bilinear(prev.visual, f_v.shape[-2:])
        t = self.down_t(f_t) + prev.text
        if v.shape[1] != self.config.dim or t.shape[-1] != self.config.dim:
            raise FusionError("projected width differs from adapter dim")
        return v, t

    def fuse_tokens(self, v_tok, d_tok, t_tok, text_valid=None):
        """Transformer layer over ``Concat(LN(v), LN(d), LN(t))``; returns the split parts.

        ``d_tok`` may be None (RGB-only path). Padded text slots are masked as
        attention keys.
        """
        parts = [v_tok, t_tok] if d_tok is None else [v_tok, d_tok, t_tok]
        dim = self.config.dim
        if any(p.shape[-1] != dim for p in parts):
            raise FusionError(f"fusion expects width {dim}, got {[p.shape[-1] for p in parts]}")
        if d_tok is not None and self.ln_d is None:
            raise FusionError("depth tokens given to an adapter built without depth")
        normed = [self.ln_v(v_tok)]
        if d_tok is not None:
            normed.append(self.ln_d(d_tok))
        normed.append(self.ln_t(t_tok))
        x = torch.cat(normed, dim=1)

        key_pad = None
        if text_valid is not None:
            n_pre = x.shape[1] - t_tok.shape[1]
            key_pad = torch.cat([text_valid.new_zeros(x.shape[0], n_pre), ~text_valid], dim=1)
        x = self.attn(x, x, x, key_padding_mask=key_pad, need_weights=False)[0] + x
        x = self.ffn(x) + x

        sizes = [p.shape[1] for p in parts]
        out = list(torch.split(x, sizes, dim=1))
        if d_tok is None:
            return out[0], None, out[1]
        return out[0], out[1], out[2]

    def back_project(self, adpt_v, adpt_t, f_v, f_t):
        return self.up_v(adpt_v) + f_v, self.up_t(adpt_t) + f_t

    def forward_taps(self, adpt_v, adpt_t):
        if self.fl_v is None:
            return None, None
        return self.fl_v(adpt_v), self.fl_t(adpt_t)

    def forward(self, f_v, f_t, prev: AdapterState, text_valid=None):
        """One full adapter step; returns ``(f_v_new, f_t_new, state, (tap_v, tap_t))``."""
        v, t = self.down_project(f_v, f_t, prev)
        grid = v.shape[-2:]
        d_tok = None
        if self.ln_d is not None:
            if prev.depth is None:
                raise FusionError("adapter expects depth tokens but none were supplied")
            d_tok = AdapterState.tokens(resample_depth(prev.depth, grid))
        a_v, a_d, a_t = self.fuse_tokens(AdapterState.tokens(v), d_tok, t, text_valid)
        # contiguous maps keep the write-back in the backbone's memory layout, so
        # the frozen convolutions downstream take the same kernel path
        to_map = lambda tok: tok.transpose(1, 2).reshape(tok.shape[0], -1, *grid).contiguous()
        a_v = to_map(a_v)
        a_d = to_map(a_d) if a_d is not None else None
        if self.config.back_projection:
            f_v, f_t = self.back_project(a_v, a_t, f_v, f_t)
        taps = self.forward_taps(a_v, a_t)
        return f_v, f_t, AdapterState(a_v, a_t, a_d), taps


class VLAdapter(nn.Module):
    """The stack of adapter layers (one per stage boundary) plus the depth stem."""

    def __init__(self, backbone_config, config: AdapterConfig):
        super().__init__()
        self.config = config
        self.backbone_config = backbone_config
        chans = backbone_config.stage_channels
        self.layers = nn.ModuleList(
            VLAdapterLayer(chans[i], backbone_config.text_channels, config)
            for i in range(backbone_config.num_stages - 1)
        )
        self.depth_stem = (
            DepthStem(config.dim, backbone_config.stem_stride, backbone_config.image_size, config.depth_scale)
            if config.use_depth else None
        )

    def session(self, depth: Optional[torch.Tensor] = None) -> "AdapterSession":
        if self.config.use_depth and depth is None:
            raise InputError("depth-enabled adapter needs a depth image")
        return AdapterSession(self, depth)


class AdapterSession:
    """Per-forward-pass carrier of adapter state; yields the backbone interceptors."""

    def __init__(self, adapter: VLAdapter, depth):
        self.adapter = adapter
        self.depth_tokens = adapter.depth_stem(depth) if adapter.depth_stem is not None else None
        self.state: Optional[AdapterState] = None
        self.taps = ForwardTaps()

    def interceptors(self):
        return [self._hook(layer) for layer in self.adapter.layers]

    def _hook(self, layer):
        def hook(f_v, f_t, text_valid):
            if self.state is None:
                self.state = AdapterState.zeros(
                    f_v.shape[0], self.adapter.config.dim, f_v.shape[-2:], f_t.shape[1], f_v, self.depth_tokens
                )
            f_v, f_t, self.state, (tap_v, tap_t) = layer(f_v, f_t, self.state, text_valid)
            self.taps.visual.append(tap_v)
            self.taps.text.append(tap_t)
            return f_v, f_t

        return hook


@dataclass
class ParameterRegistry:
    frozen: dict
    tunable: dict

    @property
    def frozen_count(self) -> int:
        return sum(self.frozen.values())

    @property
    def tunable_count(self) -> int:
        return sum(self.tunable.values())

    def ratio(self) -> float:
        """Tunable parameters as a percentage of frozen backbone parameters."""
        if self.frozen_count == 0:
            return 0.0
        return 100.0 * self.tunable_count / self.frozen_count


def tunable_parameters(model: nn.Module, frozen_prefix: str = "backbone.") -> ParameterRegistry:
    """Partition every parameter of ``model`` into frozen (backbone) and tunable.

    A backbone parameter that requires grad, or a non-backbone parameter that
    does not, cannot be classified and raises :class:`AuditError`.
    """
    from .backbone import ToyBackbone

    if isinstance(model, ToyBackbone):
        frozen_prefix = ""
    frozen, tunable = {}, {}
    for name, p in model.named_parameters():
        in_backbone = name.startswith(frozen_prefix)
        if in_backbone and not p.requires_grad:
            frozen[name] = p.numel()
        elif not in_backbone and p.requires_grad:
            tunable[name] = p.numel()
        else:
            raise AuditError(f"cannot classify parameter {name!r} (requires_grad={p.requires_grad})")
    return ParameterRegistry(frozen, tunable)
