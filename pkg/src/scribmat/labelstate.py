"""Scribble strokes, hard labels, per-superpixel probabilities and trimaps.

A stroke hard-labels every superpixel its rasterized footprint touches;
hard labels are one-hot, immutable within a session, and dominate the
trimap. Soft probabilities live on the simplex and are updated by the
propagation stages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class LabelClass(Enum):
    FOREGROUND = "F"
    BACKGROUND = "B"
    UNKNOWN = "U"


# Stroke rendering colors (RGB) and trimap gray levels.
STROKE_COLORS = {
    LabelClass.FOREGROUND: (255, 0, 0),
    LabelClass.BACKGROUND: (0, 0, 255),
    LabelClass.UNKNOWN: (0, 255, 0),
}
TRIMAP_VALUES = {
    LabelClass.FOREGROUND: 255,
    LabelClass.BACKGROUND: 0,
    LabelClass.UNKNOWN: 128,
}
TRIMAP_THRESHOLD = 0.65


class ScribbleConflictError(Exception):
    """Two strokes of different classes hit the same superpixel in one batch."""

    def __init__(self, superpixel, classes):
        self.superpixel = int(superpixel)
        self.classes = classes
        names = " vs ".join(c.value for c in classes)
        super().__init__(f"conflicting scribbles on superpixel {self.superpixel}: {names}")


@dataclass
class ScribbleStroke:
    points: list  # [(x, y), ...] pixel coordinates, at least one
    radius: int
    label: LabelClass
    region: int = -1
    iteration: int = 0

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("stroke needs at least one point")


@dataclass
class ProbabilityState:
    """(pf, pb, pu) rows on the simplex plus the hard-label partition L/U."""

    probs: np.ndarray  # (n, 3) columns = (pf, pb, pu)
    hard: dict = field(default_factory=dict)  # superpixel id -> LabelClass

    @classmethod
    def uniform(cls, n):
        return cls(probs=np.full((n, 3), 1.0 / 3.0))

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def labeled(self):
        return sorted(self.hard)

    @property
    def unlabeled(self):
        return [i for i in range(self.n) if i not in self.hard]

    def copy(self):
        return ProbabilityState(probs=self.probs.copy(), hard=dict(self.hard))

    def check_simplex(self, tol=1e-9):
        s = self.probs.sum(axis=1)
        if np.any(self.probs < -tol) or np.any(np.abs(s - 1.0) > tol):
            raise AssertionError("probability rows left the simplex")


_ONE_HOT = {
    LabelClass.FOREGROUND: np.array([1.0, 0.0, 0.0]),
    LabelClass.BACKGROUND: np.array([0.0, 1.0, 0.0]),
    LabelClass.UNKNOWN: np.array([0.0, 0.0, 1.0]),
}


def rasterize_stroke(stroke, width, height):
    """Boolean (H, W) mask of a disk of the stroke radius swept along the
    polyline. Radius 0 marks only the line's own pixels."""
    mask = np.zeros((height, width), dtype=bool)
    pts = [(float(x), float(y)) for x, y in stroke.points]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] or pts):
        steps = int(max(abs(x1 - x0), abs(y1 - y0), 1) * 2) + 1
        for t in np.linspace(0.0, 1.0, steps):
            cx, cy = x0 + (x1 - x0) * t, y0 + (y1 - y0) * t
            _stamp_disk(mask, cx, cy, stroke.radius)
    return mask


def _stamp_disk(mask, cx, cy, r):
    h, w = mask.shape
    x0 = max(0, int(np.floor(cx - r)))
    x1 = min(w - 1, int(np.ceil(cx + r)))
    y0 = max(0, int(np.floor(cy - r)))
    y1 = min(h - 1, int(np.ceil(cy + r)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    mask[ys, xs] |= (xs - round(cx)) ** 2 + (ys - round(cy)) ** 2 <= r * r


def stroke_footprint(stroke, sp):
    """Superpixel ids touched by the stroke's rasterized mask."""
    mask = rasterize_stroke(stroke, sp.width, sp.height)
    return set(np.unique(sp.labels[mask]).tolist())


def apply_scribbles(ps, sp, strokes):
    """Hard-label every superpixel touched by each stroke. A batch whose
    strokes disagree on a superpixel is rejected atomically; superpixels
    already hard-labeled keep their original class. Returns a new state
    and the set of superpixels that changed."""
    for stroke in strokes:
        for x, y in stroke.points:
            if not (0 <= x < sp.width and 0 <= y < sp.height):
                raise ValueError(f"stroke point ({x},{y}) outside image bounds")

    claims = {}
    for stroke in strokes:
        for spx in stroke_footprint(stroke, sp):
            prev = claims.get(spx)
            if prev is not None and prev != stroke.label:
                raise ScribbleConflictError(spx, (prev, stroke.label))
            claims[spx] = stroke.label

    out = ps.copy()
    touched = set()
    for spx, label in claims.items():
        if spx in out.hard:
            continue  # hard labels are immutable within a session
        out.hard[spx] = label
        out.probs[spx] = _ONE_HOT[label]
        touched.add(spx)
    return out, touched


def synthesize_trimap(ps, sp, tau=TRIMAP_THRESHOLD):
    """Per-pixel trimap: foreground (255) where pf > tau, else background
    (0) where pb > tau, else the hard label where one exists, else gray."""
    per_sp = np.full(ps.n, TRIMAP_VALUES[LabelClass.UNKNOWN], dtype=np.uint8)
    pf, pb = ps.probs[:, 0], ps.probs[:, 1]
    per_sp[pb > tau] = TRIMAP_VALUES[LabelClass.BACKGROUND]
    per_sp[pf > tau] = TRIMAP_VALUES[LabelClass.FOREGROUND]
    for spx, label in ps.hard.items():
        if pf[spx] > tau or pb[spx] > tau:
            continue
        per_sp[spx] = TRIMAP_VALUES[label]
    return per_sp[sp.labels]


def trimap_classes(trimap):
    """Decode a {0,128,255} trimap into a LabelClass array."""
    out = np.empty(trimap.shape, dtype=object)
    out[trimap == 255] = LabelClass.FOREGROUND
    out[trimap == 0] = LabelClass.BACKGROUND
    out[trimap == 128] = LabelClass.UNKNOWN
    if (trimap[(trimap != 0) & (trimap != 128) & (trimap != 255)]).size:
        raise ValueError("trimap contains values outside {0,128,255}")
    return out


def rmse(a, gt):
    if a.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((np.asarray(a, float) - np.asarray(gt, float)) ** 2)))


def coverage_percentage(strokes, width, height):
    """Percent of image pixels under any rasterized stroke (union)."""
    if not strokes:
        return 0.0
    mask = np.zeros((height, width), dtype=bool)
    for stroke in strokes:
        mask |= rasterize_stroke(stroke, width, height)
    return 100.0 * float(mask.sum()) / (width * height)


def strokes_to_wire(strokes):
    return [
        {
            "class": s.label.value,
            "radius": int(s.radius),
            "points": [[int(x), int(y)] for x, y in s.points],
            "region": int(s.region),
            "iteration": int(s.iteration),
        }
        for s in strokes
    ]


def strokes_from_wire(doc):
    """Parse the stroke wire format (a list of objects or its JSON text)."""
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if not isinstance(doc, list):
        raise ValueError("stroke document must be a list")
    strokes = []
    for item in doc:
        try:
            label = LabelClass(item["class"])
            points = [(int(p[0]), int(p[1])) for p in item["points"]]
            radius = int(item.get("radius", 3))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"malformed stroke entry: {exc}")
        strokes.append(
            ScribbleStroke(
                points=points,
                radius=radius,
                label=label,
                region=int(item.get("region", -1)),
                iteration=int(item.get("iteration", 0)),
            )
        )
    return strokes
