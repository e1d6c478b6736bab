"""Planar grasp geometry: pose recovery, candidate extraction, rectangle IoU, J@N.

Coordinates: x is the column, y is the row, origin at the top-left pixel. An
orientation theta is the direction ``(cos theta, sin theta)`` of the gripper
opening axis in (x, y), normalized to [-pi/2, pi/2) since a parallel gripper is
symmetric under a half turn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InputError

DEFAULT_ASPECT = 0.5  # rectangle height = aspect * opening width
ROTATION_STEP = math.pi / 6


def wrap_angle(theta: float) -> float:
    """Map any angle into [-pi/2, pi/2)."""
    return (theta + math.pi / 2) % math.pi - math.pi / 2


def angle_difference(a: float, b: float) -> float:
    """Unsigned difference of two grasp angles modulo pi, in [0, pi/2]."""
    return abs(wrap_angle(a - b))


@dataclass(frozen=True)
class GraspRectangle:
    x: float
    y: float
    theta: float
    width: float
    height: Optional[float] = None

    @property
    def h(self) -> float:
        return self.height if self.height is not None else DEFAULT_ASPECT * self.width

    def corners(self) -> np.ndarray:
        """(4, 2) vertices in (x, y), counter-clockwise in image coordinates."""
        if not (self.width > 0 and self.h > 0):
            raise InputError(f"degenerate rectangle {self}")
        u = np.array([math.cos(self.theta), math.sin(self.theta)]) * self.width / 2
        v = np.array([-math.sin(self.theta), math.cos(self.theta)]) * self.h / 2
        c = np.array([self.x, self.y])
        return np.stack([c - u - v, c + u - v, c + u + v, c - u + v])

    def as_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.theta), float(self.width)]


@dataclass
class GraspMaps:
    quality: np.ndarray
    angle: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        if not (self.quality.shape == self.angle.shape == self.width.shape):
            raise InputError("grasp maps differ in shape")


@dataclass(frozen=True)
class RgaPose:
    x: int
    y: int
    theta: float
    z: float
    k: int

    def as_dict(self) -> dict:
        return {"x": int(self.x), "y": int(self.y), "theta": float(self.theta), "z": float(self.z), "k": int(self.k)}


def _check_finite(a, what):
    if np.isnan(a).any():
        raise InputError(f"{what} contains NaN")


def recover_grasp(maps: GraspMaps) -> GraspRectangle:
    """Grasp at the quality argmax (first in row-major order on ties)."""
    q = np.asarray(maps.quality)
    _check_finite(q, "quality map")
    row, col = np.unravel_index(int(np.argmax(q)), q.shape)
    return GraspRectangle(float(col), float(row), float(maps.angle[row, col]), float(maps.width[row, col]))


def extract_top_n(maps: GraspMaps, n: Optional[int] = 1, radius: int = 5) -> list[tuple[GraspRectangle, float]]:
    """Greedy peak picking on the quality map with non-maximum suppression.

    Candidates are the global maximum plus every non-flat local maximum (equal
    to the maximum of its ``(2r+1)^2`` window, which is not constant). Peaks are
    visited in descending quality, ties in row-major order, and a peak within
    ``radius`` pixels of an accepted one is dropped. ``n=None`` returns all.
    """
    if n is not None and n < 1:
        raise InputError("n must be >= 1")
    q = np.asarray(maps.quality, dtype=np.float64)
    _check_finite(q, "quality map")
    size = 2 * radius + 1
    hi = ndimage.maximum_filter(q, size=size, mode="nearest")
    lo = ndimage.minimum_filter(q, size=size, mode="nearest")
    peak = (q == hi) & (hi > lo)
    peak.flat[int(np.argmax(q))] = True

    flat = np.flatnonzero(peak)
    order = flat[np.argsort(-q.flat[flat], kind="stable")]
    chosen: list[tuple[int, int]] = []
    out = []
    for idx in order:
        r, c = divmod(int(idx), q.shape[1])
        if any((r - r0) ** 2 + (c - c0) ** 2 <= radius * radius for r0, c0 in chosen):
            continue
        chosen.append((r, c))
        rect = GraspRectangle(float(c), float(r), float(maps.angle[r, c]), float(maps.width[r, c]))
        out.append((rect, float(q[r, c])))
        if n is not None and len(out) >= n:
            break
    return out


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clip``."""
    def orientation(poly):
        x, y = poly[:, 0], poly[:, 1]
        return np.sign(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    sign = orientation(clip) or 1.0
    out = [np.asarray(p, dtype=np.float64) for p in subject]
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        edge = b - a

        def side(p):
            return sign * (edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]))

        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        for cur in inp:
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            prev = cur
    return np.array(out) if out else np.zeros((0, 2))


def rect_iou(a: GraspRectangle, b: GraspRectangle) -> float:
    pa, pb = a.corners(), b.corners()
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    inter = polygon_area(clip_convex(pa, pb))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def grasp_match(pred: GraspRectangle, gt: GraspRectangle, iou_threshold=0.25, angle_threshold=math.radians(30)) -> bool:
    return angle_difference(pred.theta, gt.theta) < angle_threshold and rect_iou(pred, gt) > iou_threshold


def jacquard_at_n(preds: Sequence, gts: Sequence[GraspRectangle], n: Optional[int] = 1, **kw) -> bool:
    """True if any of the first ``n`` candidates matches any ground-truth rectangle.

    ``preds`` may hold rectangles or ``(rectangle, quality)`` pairs, best first.
    ``n=None`` uses every candidate (J@Any).
    """
    if not gts:
        raise InputError("no ground-truth rectangles")
    cands = [p[0] if isinstance(p, tuple) else p for p in preds]
    if n is not None:
        cands = cands[:n]
    return any(grasp_match(p, g, **kw) for p in cands for g in gts)


def rga_select(q_g: np.ndarray, depth: np.ndarray) -> RgaPose:
    """Global argmax of an (H, W, N) affordance stack; ties resolve row-major, then channel."""
    q_g = np.asarray(q_g)
    if q_g.ndim != 3 or q_g.shape[:2] != np.shape(depth):
        raise InputError(f"stack {q_g.shape} does not match depth {np.shape(depth)}")
    _check_finite(q_g, "affordance stack")
    row, col, k = np.unravel_index(int(np.argmax(q_g)), q_g.shape)
    step = math.pi / q_g.shape[2]
    return RgaPose(int(col), int(row), k * step, float(depth[row, col]), int(k))


# Prediction exchange: one JSON object per line, fields in this order:
#   sample_id: str
#   candidates: [[x, y, theta, width, quality], ...] best first
#   rga_pose: {"x", "y", "theta", "z", "k"} or null
@dataclass
class PredictionRecord:
    sample_id: str
    candidates: list
    rga_pose: Optional[RgaPose] = None

    def to_json(self) -> str:
        cands = [[*r.as_list(), float(q)] for r, q in self.candidates]
        pose = self.rga_pose.as_dict() if self.rga_pose is not None else None
        return json.dumps({"sample_id": self.sample_id, "candidates": cands, "rga_pose": pose})

    @classmethod
    def from_json(cls, line: str) -> "PredictionRecord":
        d = json.loads(line)
        cands = [(GraspRectangle(x, y, t, w), q) for x, y, t, w, q in d["candidates"]]
        pose = RgaPose(**d["rga_pose"]) if d.get("rga_pose") else None
        return cls(str(d["sample_id"]), cands, pose)


def write_predictions(path, records: Iterable[PredictionRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def read_predictions(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionRecord.from_json(ln) for ln in fh if ln.strip()]


def rasterize_rectangle(rect: GraspRectangle, shape, supersample: int = 1) -> np.ndarray:
    """Fraction of each pixel covered by ``rect``; pixel (r, c) is the unit square centered at (c, r)."""
    h, w = shape
    s = supersample
    off = (np.arange(s) + 0.5) / s - 0.5
    ys = (np.arange(h)[:, None] + off[None, :]).ravel()
    xs = (np.arange(w)[:, None] + off[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    dx, dy = px - rect.x, py - rect.y
    c, sn = math.cos(rect.theta), math.sin(rect.theta)
    along = dx * c + dy * sn
    across = -dx * sn + dy * c
    inside = (np.abs(along) <= rect.width / 2) & (np.abs(across) <= rect.h / 2)
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))
