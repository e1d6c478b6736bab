"""Task projectors.

* :class:`SegmentationHead` - dynamic-kernel projector. The pixel path lifts the
  decoder tokens to a stride-4 map ``F_c`` with D channels; the sentence path
  emits ``F_s`` of length ``K*K*D + 1`` which is applied as a per-sample KxK
  convolution (weights + bias) over ``F_c``.
* :class:`GraspHead` - the segmentation projector duplicated for the quality,
  angle and width maps, plus the mask head itself.
* :class:`AffordanceHead` - rotate / decode / unrotate scorer producing a stack
  of horizontal-grasp score maps, one per 30 degree orientation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class HeadConfig:
    kernel: int = 3
    proj_dim: int = 32
    mask_threshold: float = 0.35
    max_width: float = 40.0  # pixels; width maps are predicted normalized by this
    rotations: int = 6
    fcn_hidden: int = 32
    fcn_kernel: int = 3
    # RGS: let the quality / angle / width heads reuse the mask head's pixel
    # projection (only the sentence kernels are separate).
    share_projection: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("dynamic kernel size must be a positive odd integer")
        if self.proj_dim <= 0 or self.fcn_hidden <= 0 or self.rotations <= 0 or self.max_width <= 0:
            raise ConfigError("head dims must be positive")
        if self.fcn_kernel % 2 == 0:
            raise ConfigError("FCN kernel must be odd")

    @property
    def kernel_length(self) -> int:
        return self.kernel * self.kernel * self.proj_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)


def stride4_grid(image_size) -> tuple[int, int]:
    h, w = image_size
    if h % 4 or w % 4:
        raise ConfigError(f"image size {image_size} must be divisible by 4")
    return h // 4, w // 4


def tokens_to_map(tokens: torch.Tensor, grid) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], *grid)


class PixelProjector(nn.Module):
    """Decoder tokens at the decoding grid -> stride-4 feature map with D channels."""

    def __init__(self, in_dim, out_dim, grid, image_size):
        super().__init__()
        self.grid = tuple(grid)
        self.out_grid = stride4_grid(image_size)
        steps = int(round(math.log2(self.out_grid[0] / self.grid[0])))
        if steps < 0 or self.grid[0] * 2 ** steps != self.out_grid[0] or self.grid[1] * 2 ** steps != self.out_grid[1]:
            raise ConfigError(f"cannot lift grid {self.grid} to stride-4 grid {self.out_grid}")
        blocks, c = [], in_dim
        for _ in range(steps):
            c_next = max(out_dim, c // 2)
            blocks += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                       nn.Conv2d(c, c_next, 3, padding=1), nn.GELU()]
            c = c_next
        blocks.append(nn.Conv2d(c, out_dim, 1))
        self.body = nn.Sequential(*blocks)

    def forward(self, f_c):
        return self.body(tokens_to_map(f_c, self.grid))


def dynamic_conv(feature: torch.Tensor, kernels: torch.Tensor, kernel_size: int) -> torch.Tensor:
    """Apply per-sample kernels.

    ``feature`` (B, D, h, w); ``kernels`` (B, n_out, K*K*D + 1) with the bias
    last. Returns (B, n_out, h, w).
    """
    b, d, h, w = feature.shape
    n_out = kernels.shape[1]
    if kernels.shape[-1] != kernel_size * kernel_size * d + 1:
        raise ConfigError(f"kernel length {kernels.shape[-1]} != K*K*D+1 = {kernel_size * kernel_size * d + 1}")
    weight = kernels[..., :-1].reshape(b * n_out, d, kernel_size, kernel_size)
    bias = kernels[..., -1].reshape(b * n_out)
    out = F.conv2d(feature.reshape(1, b * d, h, w), weight, bias, padding=kernel_size // 2, groups=b)
    return out.reshape(b, n_out, h, w)


class SegmentationHead(nn.Module):
    def __init__(self, config: HeadConfig, dec_dim, sentence_dim, grid, image_size, n_out=1):
        super().__init__()
        self.config = config
        self.n_out = n_out
        self.image_size = tuple(image_size)
        self.pixel = PixelProjector(dec_dim, config.proj_dim, grid, image_size)
        self.kernel = nn.Linear(sentence_dim, n_out * config.kernel_length)

    def kernels(self, f_s):
        """The dynamic kernels F_s, shape (B, n_out, K*K*D + 1)."""
        return self.kernel(f_s).reshape(f_s.shape[0], self.n_out, self.config.kernel_length)

    def forward(self, f_c, f_s, pixel_map=None):
        """Returns ``(logits_full, logits_stride4)``.

        ``pixel_map`` replaces this head's own projection of ``f_c`` when given.
        """
        fmap = self.pixel(f_c) if pixel_map is None else pixel_map
        low = dynamic_conv(fmap, self.kernels(f_s), self.config.kernel)
        full = F.interpolate(low, size=self.image_size, mode="bilinear", align_corners=False)
        return full, low


class GraspOutput(NamedTuple):
    mask_logits: torch.Tensor  # (B, H, W)
    mask_logits4: torch.Tensor  # (B, H/4, W/4)
    quality: torch.Tensor  # (B, H, W) in [0, 1]
    angle: torch.Tensor  # (B, H, W) radians in [-pi/2, pi/2)
    width: torch.Tensor  # (B, H, W) pixels
    sin2: torch.Tensor  # raw angle channels used by the loss
    cos2: torch.Tensor
    width_norm: torch.Tensor  # width / max_width


def angle_from_channels(sin2: torch.Tensor, cos2: torch.Tensor) -> torch.Tensor:
    theta = 0.5 * torch.atan2(sin2, cos2)
    return torch.where(theta >= math.pi / 2, theta - math.pi, theta)


class GraspHead(nn.Module):
    """Mask head plus three duplicated dynamic-kernel heads (no parameter sharing)."""

    def __init__(self, config: HeadConfig, dec_dim, sentence_dim, grid, image_size):
        super().__init__()
        self.config = config
        args = (config, dec_dim, sentence_dim, grid, image_size)
        self.mask = SegmentationHead(*args)
        self.quality = SegmentationHead(*args)
        self.angle = SegmentationHead(*args, n_out=2)
        self.width = SegmentationHead(*args)
        if config.share_projection:
            for head in (self.quality, self.angle, self.width):
                del head.pixel

    def forward(self, f_c, f_s) -> GraspOutput:
        shared = self.mask.pixel(f_c) if self.config.share_projection else None
        mask, mask4 = self.mask(f_c, f_s, shared)
        q = self.quality(f_c, f_s, shared)[0][:, 0]
        a = self.angle(f_c, f_s, shared)[0]
        w = F.softplus(self.width(f_c, f_s, shared)[0][:, 0])
        sin2, cos2 = a[:, 0], a[:, 1]
        return GraspOutput(mask[:, 0], mask4[:, 0], torch.sigmoid(q), angle_from_channels(sin2, cos2),
                           w * self.config.max_width, sin2, cos2, w)


def rotate_content(x: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate map content about its center with bilinear sampling and zero padding.

    Angles follow the grasp convention (x = column, y = row, an orientation
    phi is the direction (cos phi, sin phi)); content at orientation phi ends up
    at orientation ``phi + angle``.
    """
    b, _, h, w = x.shape
    c, s = math.cos(angle), math.sin(angle)
    # out(p) = in(R(-angle) p), written in normalized coordinates
    theta = x.new_tensor([[c, s * h / w, 0.0], [-s * w / h, c, 0.0]]).expand(b, 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


class AffordanceHead(nn.Module):
    def __init__(self, config: HeadConfig, dec_dim, sentence_dim, grid, image_size):
        super().__init__()
        self.config = config
        self.grid = tuple(grid)
        self.image_size = tuple(image_size)
        self.out_grid = stride4_grid(image_size)
        d = config.proj_dim
        self.pixel = PixelProjector(dec_dim, d, grid, image_size)
        self.sentence = nn.Linear(sentence_dim, d)
        # start the gate near one: a product of two near-zero projections sits
        # on a saddle where neither factor gets a useful gradient
        nn.init.ones_(self.sentence.bias)
        k, hdim = config.fcn_kernel, config.fcn_hidden
        # replicate padding keeps the map border from scoring differently
        self.fcn = nn.Sequential(
            nn.Conv2d(d, hdim, k, padding=k // 2, padding_mode="replicate"), nn.GELU(),
            nn.Conv2d(hdim, hdim, k, padding=k // 2, padding_mode="replicate"), nn.GELU(),
            nn.Conv2d(hdim, 1, 1),
        )

    @property
    def angles(self) -> list[float]:
        step = math.pi / self.config.rotations
        return [k * step for k in range(self.config.rotations)]

    def feature_map(self, f_c, f_s):
        """F_a: the stride-4 lift of f_c times the projected sentence feature."""
        return self.pixel(f_c) * self.sentence(f_s)[:, :, None, None]

    def decode_rotations(self, fa: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) -> scores (B, N, h, w); channel k scores grasps at k*180/N degrees."""
        out = []
        for k, theta in enumerate(self.angles):
            if k == 0:
                out.append(torch.sigmoid(self.fcn(fa)))
                continue
            # bring orientation theta to horizontal, score, rotate back
            score = torch.sigmoid(self.fcn(rotate_content(fa, -theta)))
            out.append(rotate_content(score, theta))
        return torch.cat(out, dim=1)

    def forward(self, f_c, f_s) -> torch.Tensor:
        """Affordance stack Q_g, (B, N, H, W), values in [0, 1]."""
        low = self.decode_rotations(self.feature_map(f_c, f_s))
        full = F.interpolate(low, size=self.image_size, mode="bilinear", align_corners=False)
        return full.clamp(0.0, 1.0)
