"""Synthetic tabletop scenes with referring expressions, masks, grasps and depth.

Objects are procedural sprites (boxes, disks, bottles, T and L pieces) placed
without overlap on a flat table. Each sample names one target with an
attribute, absolute (workspace region) or relative (with respect to another
object) expression. A referee parses the rendered text back against the scene
geometry and a sample is only emitted when the text picks out exactly the
target.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archive import load_arrays, save_arrays
from .errors import DatasetError, GenerationError, InputError, TemplateError
from .grasp import GraspMaps, GraspRectangle, angle_difference, rasterize_rectangle, wrap_angle

NUM_ROTATIONS = 6
DATASET_VERSION = 1
TEMPLATE_KINDS = ("attribute", "absolute", "relative")

COLORS = {
    "red": (0.85, 0.13, 0.12),
    "green": (0.15, 0.65, 0.22),
    "blue": (0.13, 0.30, 0.85),
    "yellow": (0.95, 0.85, 0.15),
    "orange": (0.98, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "white": (0.96, 0.96, 0.94),
    "black": (0.08, 0.08, 0.10),
    "brown": (0.50, 0.30, 0.13),
    "pink": (0.98, 0.55, 0.72),
}
TABLE_COLOR = (0.55, 0.52, 0.47)


@dataclass(frozen=True)
class ObjectKind:
    name: str
    shape: str  # box | disk | bottle | tee | ell
    colors: tuple
    length: tuple  # long side (disk: diameter), fraction of the canvas
    breadth: tuple  # short side, fraction of the canvas
    height: tuple  # meters above the table


PALETTE = (
    ObjectKind("mustard bottle", "bottle", ("yellow",), (0.28, 0.34), (0.14, 0.17), (0.10, 0.16)),
    ObjectKind("bleach bottle", "bottle", ("white", "blue"), (0.28, 0.34), (0.15, 0.18), (0.12, 0.18)),
    ObjectKind("apple", "disk", ("red", "green"), (0.19, 0.23), (0.19, 0.23), (0.06, 0.08)),
    ObjectKind("lemon", "disk", ("yellow",), (0.17, 0.20), (0.17, 0.20), (0.05, 0.06)),
    ObjectKind("ball", "disk", ("red", "blue", "green", "purple", "orange"), (0.19, 0.24), (0.19, 0.24), (0.06, 0.09)),
    ObjectKind("can", "disk", ("red", "blue", "white"), (0.19, 0.22), (0.19, 0.22), (0.09, 0.12)),
    ObjectKind("cube", "box", ("red", "green", "blue", "yellow", "purple"), (0.18, 0.22), (0.18, 0.22), (0.04, 0.06)),
    ObjectKind("block", "box", ("red", "green", "blue", "yellow", "orange", "brown"), (0.28, 0.34), (0.14, 0.17), (0.03, 0.05)),
    ObjectKind("marker", "box", ("black", "blue", "red"), (0.28, 0.34), (0.09, 0.11), (0.02, 0.02)),
    ObjectKind("sponge", "box", ("yellow", "pink", "green"), (0.24, 0.28), (0.16, 0.19), (0.03, 0.04)),
    ObjectKind("tee", "tee", ("blue", "orange", "purple"), (0.28, 0.32), (0.24, 0.28), (0.03, 0.04)),
    ObjectKind("bracket", "ell", ("brown", "black", "pink"), (0.28, 0.32), (0.24, 0.28), (0.03, 0.04)),
)
KINDS_BY_NAME = {k.name: k for k in PALETTE}

ROW_NAMES = ("upper", "middle", "lower")
COL_NAMES = ("left", "center", "right")


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (64, 64)
    num_objects: int = 4
    duplicates: int = 0  # identical instances of one kind+color (0 = none)
    kinds: tuple = TEMPLATE_KINDS  # template kinds allowed for the expression
    palette: Optional[tuple] = None  # object kind names; None = all
    seed: int = 0
    overlap_tolerance: int = 0  # pixels two objects may share
    gap: int = 1  # free pixels kept around each object
    max_attempts: int = 200
    table_depth: float = 0.6
    depth_noise: float = 0.001
    color_noise: float = 0.02
    # Tie the grasp opening to the object height instead of its footprint
    # (depth is then the only cue for the width).
    width_from_height: bool = False
    width_range: tuple = (8.0, 30.0)
    height_range: tuple = (0.02, 0.16)
    grasp_margin: float = 4.0
    separation: float = 0.10  # relative relations need this fraction of the canvas

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.palette is not None:
            object.__setattr__(self, "palette", tuple(self.palette))
        if min(self.canvas) < 16:
            raise InputError("canvas too small")
        if self.num_objects < 1:
            raise InputError("need at least one object")
        if self.duplicates == 1 or self.duplicates < 0 or self.duplicates > min(3, self.num_objects):
            raise InputError(f"duplicates must be 0 or 2..3 (and <= num_objects), got {self.duplicates}")
        if not self.kinds or any(k not in TEMPLATE_KINDS for k in self.kinds):
            raise InputError(f"template kinds must be drawn from {TEMPLATE_KINDS}")
        for name in self.palette or ():
            if name not in KINDS_BY_NAME:
                raise InputError(f"unknown object kind {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SceneObject:
    kind: str
    color: str
    shape: str
    cx: float
    cy: float
    angle: float
    length: float
    breadth: float
    height: float
    grasp_width: Optional[float] = None  # overrides the footprint-derived opening

    @property
    def descriptor(self) -> tuple[str, str]:
        return self.color, self.kind

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- geometry

def _local_coords(obj: SceneObject, shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - obj.cx, ys - obj.cy
    c, s = math.cos(obj.angle), math.sin(obj.angle)
    return dx * c + dy * s, -dx * s + dy * c


def _thickness(obj):
    return 0.38 * obj.breadth


def object_mask(obj: SceneObject, shape) -> np.ndarray:
    a, b = _local_coords(obj, shape)
    L, B = obj.length, obj.breadth
    if obj.shape == "disk":
        return a * a + b * b <= (L / 2) ** 2
    if obj.shape == "box":
        return (np.abs(a) <= L / 2) & (np.abs(b) <= B / 2)
    if obj.shape == "bottle":
        neck = 0.25 * L
        body = (a >= -L / 2) & (a <= L / 2 - neck) & (np.abs(b) <= B / 2)
        top = (a >= L / 2 - neck) & (a <= L / 2) & (np.abs(b) <= B / 4)
        return body | top
    t = _thickness(obj)
    if obj.shape == "tee":
        bar = (np.abs(a) <= L / 2) & (b >= -B / 2) & (b <= -B / 2 + t)
        stem = (np.abs(a) <= t / 2) & (np.abs(b) <= B / 2)
        return bar | stem
    if obj.shape == "ell":
        arm = (np.abs(a) <= L / 2) & (b >= -B / 2) & (b <= -B / 2 + t)
        leg = (a >= -L / 2) & (a <= -L / 2 + t) & (np.abs(b) <= B / 2)
        return arm | leg
    raise InputError(f"unknown shape {obj.shape!r}")


@dataclass(frozen=True)
class GraspSite:
    """A ground-truth grasp plus the region where sliding it still succeeds."""

    rect: GraspRectangle
    tolerance: float  # allowed offset along the opening axis
    slide: float  # allowed offset along the jaws


def object_grasps(obj: SceneObject, margin: float = 4.0) -> list[GraspSite]:
    """Ground-truth grasps in image coordinates; every center lies on the object."""
    L, B, phi = obj.length, obj.breadth, obj.angle
    c, s = math.cos(phi), math.sin(phi)

    def at(a, b):  # local -> image
        return obj.cx + a * c - b * s, obj.cy + a * s + b * c

    def make(a, b, rel_angle, opening, tol, slide):
        x, y = at(a, b)
        width = obj.grasp_width if obj.grasp_width is not None else opening + margin
        return GraspSite(GraspRectangle(x, y, wrap_angle(phi + rel_angle), width), tol, slide)

    half = math.pi / 2
    if obj.shape == "disk":
        return [make(0, 0, k * math.pi / 3, L, L / 4, L / 4) for k in range(3)]
    if obj.shape == "box":
        if L < 1.2 * B:
            return [make(0, 0, half, B, B / 4, L / 2 - 1), make(0, 0, 0.0, L, L / 4, B / 2 - 1)]
        if L >= 1.8 * B:
            return [make(-L / 4, 0, half, B, B / 4, L / 4 - 1), make(L / 4, 0, half, B, B / 4, L / 4 - 1)]
        return [make(0, 0, half, B, B / 4, L / 2 - 1)]
    if obj.shape == "bottle":
        neck = 0.25 * L
        body = L - neck
        return [make(-neck / 2, 0, half, B, B / 4, body / 2 - 1)]
    t = _thickness(obj)
    if obj.shape == "tee":
        return [make(0, -B / 2 + t / 2, half, t, t / 4, L / 2 - 1),
                make(0, t / 2, 0.0, t, t / 4, (B - t) / 2 - 1)]
    if obj.shape == "ell":
        return [make(0, -B / 2 + t / 2, half, t, t / 4, L / 2 - 1),
                make(-L / 2 + t / 2, t / 2, 0.0, t, t / 4, (B - t) / 2 - 1)]
    raise InputError(f"unknown shape {obj.shape!r}")


def affordance_labels(obj: SceneObject, shape, margin: float = 4.0, rotations: int = NUM_ROTATIONS) -> np.ndarray:
    """(H, W, N) bool: grasping at this pixel with orientation k*180/N succeeds on ``obj``."""
    h, w = shape
    mask = object_mask(obj, shape)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, rotations), dtype=bool)
    for site in object_grasps(obj, margin):
        r = site.rect
        c, s = math.cos(r.theta), math.sin(r.theta)
        dx, dy = xs - r.x, ys - r.y
        along = dx * c + dy * s
        across = -dx * s + dy * c
        region = mask & (np.abs(along) <= site.tolerance) & (np.abs(across) <= site.slide)
        for k in range(rotations):
            if angle_difference(k * math.pi / rotations, r.theta) < math.radians(30):
                out[..., k] |= region
    return out


def centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def region_of(point, canvas) -> tuple[str, str]:
    """3x3 workspace cell (row name, column name) of an (x, y) point."""
    x, y = point
    h, w = canvas
    col = min(int(3 * x / w), 2)
    row = min(int(3 * y / h), 2)
    return ROW_NAMES[row], COL_NAMES[col]


def region_phrase(region) -> str:
    row, col = region
    return "center" if (row, col) == ("middle", "center") else f"{row} {col}"


def relation_between(p, q, canvas, separation=0.10) -> tuple[Optional[str], Optional[str]]:
    """Direction of point ``p`` as seen from ``q``: (vertical, horizontal) components.

    A component is None when the centroid offset along that axis is within
    ``separation`` of the canvas size.
    """
    h, w = canvas
    dx, dy = p[0] - q[0], p[1] - q[1]
    horiz = "right" if dx > separation * w else "left" if dx < -separation * w else None
    vert = "upper" if dy < -separation * h else "lower" if dy > separation * h else None
    return vert, horiz


def relation_phrase(rel) -> str:
    vert, horiz = rel
    if vert and horiz:
        return f"to the {vert} {horiz} of"
    if horiz:
        return f"to the {horiz} of"
    if vert:
        return "above" if vert == "upper" else "below"
    raise TemplateError("objects are too close for a relation")


# --------------------------------------------------------------------------- referee

_CATEGORY_WORDS = sorted((tuple(k.name.split()) for k in PALETTE), key=len, reverse=True)
_REGION_WORDS = set(ROW_NAMES) | set(COL_NAMES)


@dataclass
class ParsedExpression:
    category: str
    color: Optional[str] = None
    region: Optional[tuple] = None
    relation: Optional[tuple] = None
    ref_category: Optional[str] = None
    ref_color: Optional[str] = None


def parse_expression(text: str) -> ParsedExpression:
    words = text.lower().replace(",", " ").split()
    spans, i = [], 0
    while i < len(words):
        for cat in _CATEGORY_WORDS:
            if tuple(words[i: i + len(cat)]) == cat:
                spans.append((i, i + len(cat), " ".join(cat)))
                i += len(cat)
                break
        else:
            i += 1
    if not spans:
        raise TemplateError(f"no object category in {text!r}")

    def color_before(start):
        return words[start - 1] if start > 0 and words[start - 1] in COLORS else None

    start, end, cat = spans[0]
    parsed = ParsedExpression(cat, color_before(start))
    if len(spans) > 1:
        rstart, _, rcat = spans[1]
        rcolor = color_before(rstart)
        stop = rstart - (1 if rcolor else 0)
        between = words[end:stop]
        vert = "upper" if ("upper" in between or "above" in between) else "lower" if ("lower" in between or "below" in between) else None
        horiz = "left" if "left" in between else "right" if "right" in between else None
        if vert is None and horiz is None:
            raise TemplateError(f"no relation in {text!r}")
        parsed.relation = (vert, horiz)
        parsed.ref_category, parsed.ref_color = rcat, rcolor
        return parsed

    skip = set(range(start - (1 if parsed.color else 0), end))
    region_words = [w for j, w in enumerate(words) if j not in skip and w in _REGION_WORDS]
    if region_words:
        if region_words == ["center"]:
            parsed.region = ("middle", "center")
        else:
            row = next((w for w in region_words if w in ROW_NAMES), None)
            col = next((w for w in region_words if w in COL_NAMES), None)
            if row is None or col is None:
                raise TemplateError(f"incomplete region in {text!r}")
            parsed.region = (row, col)
    return parsed


def _matches(obj: SceneObject, category, color):
    return obj.kind == category and (color is None or obj.color == color)


def resolve(text: str, objects: Sequence[SceneObject], centroids, canvas, separation=0.10) -> list[int]:
    """Indices of every object the expression describes."""
    p = parse_expression(text)
    cands = [i for i, o in enumerate(objects) if _matches(o, p.category, p.color)]
    if p.region is not None:
        cands = [i for i in cands if region_of(centroids[i], canvas) == p.region]
    if p.relation is not None:
        refs = [i for i, o in enumerate(objects) if _matches(o, p.ref_category, p.ref_color)]
        if len(refs) != 1:
            return []
        r = refs[0]
        cands = [i for i in cands if i != r and relation_between(centroids[i], centroids[r], canvas, separation) == p.relation]
    return cands


# --------------------------------------------------------------------------- language

def _descriptors(objects, target):
    """Target descriptors from least to most specific: (color or None, category)."""
    o = objects[target]
    return [(None, o.kind), (o.color, o.kind)]


def _desc_text(color, kind):
    return f"{color} {kind}" if color else kind


def render_language(objects: Sequence[SceneObject], centroids, target: int, kind: str, canvas,
                    rng: np.random.Generator, separation=0.10) -> str:
    """Instantiate a template of ``kind`` that picks out exactly ``target``.

    Raises :class:`TemplateError` when no unambiguous expression of that kind exists.
    """
    options = []
    if kind == "attribute":
        for color, cat in _descriptors(objects, target):
            d = _desc_text(color, cat)
            options += [f"the {d}", f"pick up the {d}"]
    elif kind == "absolute":
        phrase = region_phrase(region_of(centroids[target], canvas))
        for color, cat in _descriptors(objects, target):
            d = _desc_text(color, cat)
            if phrase == "center":
                options += [f"the {d} that is in the center of the workspace", f"the {d} in the center"]
            else:
                options += [f"the {d} that is to the {phrase} of the workspace", f"{phrase} {d}",
                            f"the {d} in the {phrase}"]
    elif kind == "relative":
        for ref in rng.permutation(len(objects)):
            ref = int(ref)
            if ref == target:
                continue
            rel = relation_between(centroids[target], centroids[ref], canvas, separation)
            if rel == (None, None):
                continue
            for rcolor, rcat in _descriptors(objects, ref):
                if objects[ref].kind == objects[target].kind:
                    continue
                rd = _desc_text(rcolor, rcat)
                for color, cat in _descriptors(objects, target):
                    d = _desc_text(color, cat)
                    options += [f"the {d} that is {relation_phrase(rel)} the {rd}",
                                f"{d} that is {relation_phrase(rel)} the {rd}"]
    else:
        raise TemplateError(f"unknown template kind {kind!r}")

    valid = [t for t in options if resolve(t, objects, centroids, canvas, separation) == [target]]
    if not valid:
        raise TemplateError(f"no unambiguous {kind} expression for object {target}")
    return valid[int(rng.integers(len(valid)))]


# --------------------------------------------------------------------------- samples

@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, table plane plus object heights
    expression: str
    mask: np.ndarray  # (H, W) bool
    grasps: list  # GraspRectangle on the target
    affordance: Optional[np.ndarray] = None  # (H, W, 6) bool, target only
    instances: Optional[np.ndarray] = None  # (H, W) int16, 0 = table, i + 1 = objects[i]
    objects: list = field(default_factory=list)
    target: int = -1
    relation: str = "attribute"
    sample_id: str = ""
    split: str = "train"
    grasp_sites: list = field(default_factory=list)  # slide/tolerance per grasp (synthetic only)

    def validate(self) -> "SceneSample":
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise InputError("image/depth/mask shapes disagree")
        if not self.mask.any():
            raise InputError("empty target mask")
        if not (self.depth > 0).all():
            raise InputError("depth must be positive")
        for g in self.grasps:
            r, c = int(round(g.y)), int(round(g.x))
            if not (0 <= r < h and 0 <= c < w and self.mask[r, c]):
                raise InputError(f"grasp center {g.x:.1f},{g.y:.1f} is off the target mask")
        return self

    @property
    def canvas(self) -> tuple[int, int]:
        return self.mask.shape


def _place(spec: SceneSpec, rng, kinds_pool, dup_kind=None, dup_color=None):
    h, w = spec.canvas
    scale = min(h, w)
    objects, occupied = [], np.zeros((h, w), dtype=np.int32)
    n_dup = spec.duplicates
    plan = []
    for i in range(spec.num_objects):
        if i < n_dup:
            plan.append((dup_kind, dup_color))
        else:
            k = kinds_pool[int(rng.integers(len(kinds_pool)))]
            color = k.colors[int(rng.integers(len(k.colors)))]
            # avoid accidental extra copies of the duplicated kind
            while n_dup and (k.name, color) == (dup_kind.name, dup_color):
                k = kinds_pool[int(rng.integers(len(kinds_pool)))]
                color = k.colors[int(rng.integers(len(k.colors)))]
            plan.append((k, color))
    for kind, color in plan:
        L = rng.uniform(*kind.length) * scale
        B = L if kind.shape == "disk" else rng.uniform(*kind.breadth) * scale
        if kind.shape == "box" and kind.length == kind.breadth:
            B = L
        height = float(rng.uniform(*kind.height))
        if spec.width_from_height:
            height = float(rng.uniform(*spec.height_range))
        for _ in range(100):
            angle = float(rng.uniform(-math.pi / 2, math.pi / 2))
            r = 0.5 * math.hypot(L, B) + spec.gap
            cx = float(rng.uniform(r, w - 1 - r))
            cy = float(rng.uniform(r, h - 1 - r))
            obj = SceneObject(kind.name, color, kind.shape, cx, cy, angle, L, B, height)
            m = object_mask(obj, (h, w))
            if m.sum() < 8:
                continue
            grown = _dilate(m, spec.gap)
            if np.count_nonzero(grown & (occupied > 0)) <= spec.overlap_tolerance:
                break
        else:
            return None
        if spec.width_from_height:
            lo, hi = spec.height_range
            wl, wh = spec.width_range
            obj.grasp_width = wl + (height - lo) / (hi - lo) * (wh - wl)
        occupied[m] = len(objects) + 1
        objects.append(obj)
    return objects, occupied


def _dilate(m, r):
    if r <= 0:
        return m
    from scipy import ndimage
    return ndimage.binary_dilation(m, iterations=r)


def generate_scene(spec: SceneSpec, seed: Optional[int] = None, sample_id: str = "") -> SceneSample:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    h, w = spec.canvas
    pool = [KINDS_BY_NAME[n] for n in spec.palette] if spec.palette else list(PALETTE)
    for _ in range(spec.max_attempts):
        dup_kind = dup_color = None
        if spec.duplicates:
            dup_kind = pool[int(rng.integers(len(pool)))]
            dup_color = dup_kind.colors[int(rng.integers(len(dup_kind.colors)))]
            if len(pool) == 1 and len(dup_kind.colors) == 1 and spec.num_objects > spec.duplicates:
                raise GenerationError("palette too small to add distinct objects next to the duplicates")
        placed = _place(spec, rng, pool, dup_kind, dup_color)
        if placed is None:
            continue
        objects, instances = placed
        masks = [instances == i + 1 for i in range(len(objects))]
        cents = [centroid(m) for m in masks]
        target = int(rng.integers(spec.duplicates)) if spec.duplicates else int(rng.integers(len(objects)))
        text = relation = None
        for kind in rng.permutation(list(spec.kinds)):
            try:
                text = render_language(objects, cents, target, str(kind), spec.canvas, rng, spec.separation)
                relation = str(kind)
                break
            except TemplateError:
                continue
        if text is None or resolve(text, objects, cents, spec.canvas, spec.separation) != [target]:
            continue
        return _assemble(spec, rng, objects, instances, masks, target, text, relation, sample_id)
    raise GenerationError(f"no valid scene after {spec.max_attempts} attempts")


def _assemble(spec, rng, objects, instances, masks, target, text, relation, sample_id):
    h, w = spec.canvas
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = TABLE_COLOR
    depth = np.full((h, w), spec.table_depth, dtype=np.float64)
    for obj, m in zip(objects, masks):
        image[m] = COLORS[obj.color]
        depth[m] += obj.height
    image += rng.normal(0.0, spec.color_noise, image.shape)
    depth += rng.normal(0.0, spec.depth_noise, depth.shape)
    sites = object_grasps(objects[target], spec.grasp_margin)
    sample = SceneSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        depth=depth.astype(np.float32),
        expression=text,
        mask=masks[target].copy(),
        grasps=[s.rect for s in sites],
        affordance=affordance_labels(objects[target], (h, w), spec.grasp_margin),
        instances=instances.astype(np.int16),
        objects=objects,
        target=target,
        relation=relation,
        sample_id=sample_id,
        grasp_sites=sites,
    )
    return sample.validate()


def generate_dataset(spec: SceneSpec, count: int, seed: Optional[int] = None,
                     split_fractions=(0.8, 0.1, 0.1)) -> list[SceneSample]:
    """``count`` samples with per-sample seeds drawn from ``seed`` and split assignment."""
    base = spec.seed if seed is None else seed
    seeds = np.random.SeedSequence(base).generate_state(count, dtype=np.uint32)
    samples = [generate_scene(spec, int(s), sample_id=f"{base}-{i:05d}") for i, s in enumerate(seeds)]
    n_train = int(round(split_fractions[0] * count))
    n_val = int(round(split_fractions[1] * count))
    for i, s in enumerate(samples):
        s.split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return samples


# --------------------------------------------------------------------------- targets for training

def gt_grasp_maps(sample: SceneSample, spread: float = 6.0) -> tuple[GraspMaps, np.ndarray]:
    """Rasterized quality / angle / width targets and the angle-width valid mask.

    Each rectangle supports its own footprint clipped to the target mask (the
    pixel nearest its center is always included). Quality is a bump
    ``exp(-(a^2 / (2 sa^2) + b^2 / (2 sb^2)))`` over that support with
    ``sa = width / spread`` and ``sb = height / spread``, so it is 1 at the
    center and falls off toward the jaws; angle and width are constant on it.
    Overlapping supports keep the highest quality, and angle and width follow
    the last rectangle drawn.
    """
    h, w = sample.mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.zeros((h, w), dtype=np.float64)
    ang = np.zeros((h, w), dtype=np.float32)
    wid = np.zeros((h, w), dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    for g in sample.grasps:
        c, s = math.cos(g.theta), math.sin(g.theta)
        dx, dy = xs - g.x, ys - g.y
        a, b = dx * c + dy * s, -dx * s + dy * c
        region = (rasterize_rectangle(g, (h, w)) > 0) & sample.mask
        region[min(max(int(round(g.y)), 0), h - 1), min(max(int(round(g.x)), 0), w - 1)] = True
        bump = np.exp(-0.5 * ((a * spread / g.width) ** 2 + (b * spread / g.h) ** 2))
        q[region] = np.maximum(q[region], bump[region])
        ang[region] = g.theta
        wid[region] = g.width
        valid |= region
    return GraspMaps(q.astype(np.float32), ang, wid), valid


# --------------------------------------------------------------------------- persistence

def _rect_from_list(v):
    return GraspRectangle(*v)


def _sample_meta(s: SceneSample) -> dict:
    return {
        "sample_id": s.sample_id,
        "expression": s.expression,
        "grasps": [[g.x, g.y, g.theta, g.width, g.height] for g in s.grasps],
        "grasp_sites": [[st.tolerance, st.slide] for st in s.grasp_sites],
        "objects": [o.to_dict() for o in s.objects],
        "target": s.target,
        "relation": s.relation,
        "split": s.split,
    }


def save_dataset(samples: Sequence[SceneSample], path, spec: Optional[SceneSpec] = None) -> Path:
    """Directory layout: ``manifest.json`` plus one ``.npz`` record per sample."""
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    splits: dict[str, list[str]] = {}
    for i, s in enumerate(samples):
        sid = s.sample_id or f"{i:05d}"
        fname = f"samples/{i:05d}.npz"
        arrays = {"image": s.image, "depth": s.depth, "mask": s.mask.astype(np.uint8)}
        if s.affordance is not None:
            arrays["affordance"] = s.affordance.astype(np.uint8)
        if s.instances is not None:
            arrays["instances"] = s.instances.astype(np.int16)
        save_arrays(root / fname, arrays, {"kind": "scene_sample", **_sample_meta(s), "sample_id": sid})
        entries.append({"id": sid, "file": fname, "split": s.split, "template": s.relation})
        splits.setdefault(s.split, []).append(sid)
    manifest = {
        "format": "vlgrasp-dataset",
        "version": DATASET_VERSION,
        "byte_order": "little",
        "count": len(entries),
        "splits": {k: len(v) for k, v in splits.items()},
        "samples": entries,
        "spec": spec.to_dict() if spec is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}: corrupt manifest ({exc})") from exc
    version = manifest.get("version")
    if manifest.get("format") != "vlgrasp-dataset" or version != DATASET_VERSION:
        raise DatasetError(f"{root}: dataset version {version!r}, this build reads version {DATASET_VERSION}")
    return manifest


def load_dataset(path, split: Optional[str] = None) -> list[SceneSample]:
    root = Path(path)
    manifest = read_manifest(root)
    out = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        arrays, meta = load_arrays(root / entry["file"])
        try:
            objects = [SceneObject(**o) for o in meta["objects"]]
            grasps = [GraspRectangle(*g) for g in meta["grasps"]]
            sites = [GraspSite(g, t, sl) for g, (t, sl) in zip(grasps, meta.get("grasp_sites", []))]
            sample = SceneSample(
                image=arrays["image"], depth=arrays["depth"], expression=meta["expression"],
                mask=arrays["mask"].astype(bool), grasps=grasps,
                affordance=arrays["affordance"].astype(bool) if "affordance" in arrays else None,
                instances=arrays.get("instances"), objects=objects, target=meta["target"],
                relation=meta["relation"], sample_id=meta["sample_id"], split=meta["split"], grasp_sites=sites,
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{entry['file']}: malformed record ({exc})") from exc
        out.append(sample)
    return out


def object_masks(sample: SceneSample) -> list[np.ndarray]:
    if sample.instances is None:
        raise InputError("sample has no instance map")
    return [sample.instances == i + 1 for i in range(len(sample.objects))]


def grasp_outcome(sample: SceneSample, x: int, y: int, k: int, margin: float = 4.0) -> tuple[Optional[int], bool]:
    """Simulated execution: (object index under the gripper or None, physical success)."""
    if sample.instances is None:
        raise InputError("sample has no instance map")
    idx = int(sample.instances[y, x]) - 1
    if idx < 0:
        return None, False
    labels = affordance_labels(sample.objects[idx], sample.canvas, margin)
    return idx, bool(labels[y, x, k])


def relabel(sample: SceneSample, grasped: int, rng: np.random.Generator, kinds=TEMPLATE_KINDS,
            separation: float = 0.10) -> Optional[str]:
    """An expression that uniquely names ``grasped`` (used when the wrong object was picked)."""
    masks = object_masks(sample)
    cents = [centroid(m) for m in masks]
    for kind in rng.permutation(list(kinds)):
        try:
            return render_language(sample.objects, cents, grasped, str(kind), sample.canvas, rng, separation)
        except TemplateError:
            continue
    return None


def with_expression(sample: SceneSample, text: str, target: int) -> SceneSample:
    masks = object_masks(sample)
    obj = sample.objects[target]
    sites = object_grasps(obj)
    return replace(sample, expression=text, target=target, mask=masks[target], grasps=[s.rect for s in sites],
                   grasp_sites=sites, affordance=affordance_labels(obj, sample.canvas))
