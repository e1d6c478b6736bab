"""Training objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import InputError, LossError

NUM_ROTATIONS = 6


@dataclass(frozen=True)
class ExecutedAction:
    x: int  # column
    y: int  # row
    k: int  # orientation index, angle k * 30 degrees
    success: bool

    def validate(self, height, width, rotations=NUM_ROTATIONS):
        if not (0 <= self.x < width and 0 <= self.y < height and 0 <= self.k < rotations):
            raise InputError(f"action {self} outside a {height}x{width}x{rotations} stack")


def text_to_pixel_contrastive(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over all sites of -log sigma(s) on positives and -log(1 - sigma(s)) on negatives.

    ``logits`` are the per-site scores F_s . F_c^i (the segmentation head's
    stride-4 output); ``labels`` is the binary site field of the same shape.
    """
    if logits.shape != labels.shape:
        raise LossError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if logits.numel() == 0:
        raise LossError("empty site set")
    pos = labels.to(torch.bool)
    per_site = torch.where(pos, -F.logsigmoid(logits), -F.logsigmoid(-logits))
    return per_site.mean()


def site_labels(mask: torch.Tensor, stride: int = 4) -> torch.Tensor:
    """Full-resolution binary mask(s) -> stride-grid labels (site positive if >= half covered)."""
    m = mask.to(torch.float32)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    lab = F.avg_pool2d(m[:, None], stride)[:, 0] >= 0.5
    return lab[0] if squeeze else lab


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None, beta: float = 1.0):
    """Smooth-L1 averaged over ``valid`` sites (all sites when ``valid`` is None)."""
    if pred.shape != target.shape:
        raise LossError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    per_site = F.smooth_l1_loss(pred, target, reduction="none", beta=beta)
    if valid is None:
        if per_site.numel() == 0:
            raise LossError("empty site set")
        return per_site.mean()
    valid = valid.to(torch.bool)
    if not bool(valid.any()):
        raise LossError("empty valid mask")
    return per_site[valid].mean()


def smooth_l1_maps(pred, target, valid, beta: float = 1.0) -> torch.Tensor:
    """Sum of the quality, angle and width smooth-L1 terms.

    ``pred`` and ``target`` expose ``quality``, ``sin2``, ``cos2`` and
    ``width_norm`` tensors. Quality is supervised on every site; the angle
    (through its sin/cos channels) and the width only where ``valid``.
    """
    q = smooth_l1(pred.quality, target.quality, None, beta)
    a = smooth_l1(torch.stack([pred.sin2, pred.cos2]), torch.stack([target.sin2, target.cos2]),
                  torch.stack([valid, valid]), beta)
    w = smooth_l1(pred.width_norm, target.width_norm, valid, beta)
    return q + a + w


def clamp_probability(p: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Clamp into [eps, 1 - eps] in value only.

    A plain clamp has zero gradient outside the interval, so a score that
    saturates at 0 could never be pulled back up by a positive label.
    """
    return p + (p.clamp(eps, 1.0 - eps) - p).detach()


def rga_motion_loss(q_g: torch.Tensor, action: ExecutedAction, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy between the executed action's score and its outcome.

    ``q_g`` is one affordance stack, (N, H, W). Only the executed
    (orientation, row, column) entry is supervised.
    """
    n, h, w = q_g.shape
    action.validate(h, w, n)
    p = clamp_probability(q_g[action.k, action.y, action.x], eps)
    return -torch.log(p) if action.success else -torch.log1p(-p)
