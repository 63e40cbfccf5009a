"""Procedural composites with known alpha for unattended evaluation.

Each case blends a textured foreground over a textured background through
a soft-edged alpha layer (disks, rings, wobbled blobs, gradient bands,
two-component shapes). Cases are generated, never shipped as data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .mattesolver import composite_image

CASE_KINDS = ("disk", "ring", "blob", "band", "twodisks", "bigblob")


def suite_superpixel_target(size):
    """Superpixel count for suite images: structures in the miniature
    composites span only a few tens of pixels, so the graph needs finer
    granularity (one superpixel per ~8x8 px) than the photo-scale default."""
    return int(np.clip(size * size // 64, 100, 2000))


@dataclass
class SyntheticCase:
    name: str
    image: np.ndarray  # (H, W, 3) in [0,1]
    alpha: np.ndarray  # (H, W) in [0,1]
    trimap: np.ndarray  # (H, W) uint8 in {0,128,255}


def textured_layer(rng, size, tones, angle=0.0, tone_split=None):
    """Color field mixing one or two base tones in large smooth patches,
    overlaid with an oriented fine weave, low-frequency drift and noise.

    Multi-tone layers make each class's appearance heterogeneous, as in
    real photographs; distinct weave orientations keep the two layers of a
    composite separable by texture statistics. `tone_split="diagonal"`
    places the two tones on opposite sides of a diagonal instead of in
    random patches."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    tones = np.atleast_2d(np.asarray(tones, dtype=np.float64))
    if len(tones) == 1:
        base = np.broadcast_to(tones[0], (h, w, 3)).copy()
    else:
        if tone_split == "diagonal":
            mix = ((xx + yy) > 1.0).astype(np.float64)[..., None]
        else:
            field = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=12.0)
            mix = (field > np.median(field)).astype(np.float64)[..., None]
        base = tones[0] * (1.0 - mix) + tones[1] * mix
    u = xx * np.cos(angle) + yy * np.sin(angle)
    weave = 0.03 * np.sin(2 * np.pi * rng.uniform(6.0, 9.0) * u + rng.uniform(0, 2 * np.pi))
    layer = np.empty((h, w, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.3, 1.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        drift = 0.025 * np.sin(2 * np.pi * fx * xx + phase[0]) * np.cos(2 * np.pi * fy * yy + phase[1])
        noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=2.0) * 0.015
        layer[..., c] = base[..., c] + weave + drift + noise
    return np.clip(layer, 0.0, 1.0)


def _dist(size, cx, cy):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(xx - cx, yy - cy)


def _soft_inside(signed, soft):
    # signed > 0 inside; linear ramp of width `soft` across the boundary.
    return np.clip(signed / max(soft, 1e-6) + 0.5, 0.0, 1.0)


def alpha_disk(size, cx, cy, radius, soft):
    return _soft_inside(radius - _dist(size, cx, cy), soft)


def alpha_ring(size, cx, cy, r_outer, r_inner, soft):
    d = _dist(size, cx, cy)
    return np.clip(_soft_inside(r_outer - d, soft) - _soft_inside(r_inner - d, soft), 0.0, 1.0)


def alpha_blob(rng, size, cx, cy, radius, soft, lobes=3):
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.arctan2(yy - cy, xx - cx)
    wobble = np.zeros_like(theta)
    for k in range(2, 2 + lobes):
        wobble += rng.uniform(0.04, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    r = radius * (1.0 + wobble)
    return _soft_inside(r - _dist(size, cx, cy), soft)


def alpha_band(size, angle, center_offset, half_width, soft):
    yy, xx = np.mgrid[0:size, 0:size]
    d = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle) - center_offset
    return _soft_inside(half_width - np.abs(d), soft)


def band_trimap(alpha, dilate=6, tol=1e-3):
    """Ground-truth style trimap: the soft transition zone dilated by
    `dilate` pixels becomes unknown; the rest keeps its hard class."""
    kf = alpha >= 1.0 - tol
    kb = alpha <= tol
    unknown = ~(kf | kb)
    if dilate > 0:
        unknown = ndimage.binary_dilation(unknown, iterations=dilate)
    tri = np.full(alpha.shape, 128, dtype=np.uint8)
    tri[kf & ~unknown] = 255
    tri[kb & ~unknown] = 0
    return tri


# Strongly separated palette in the spirit of classic matting test imagery:
# tones sit at coarse color-cube cells so region appearance stays coherent.
_PALETTE = (0.125, 0.375, 0.625, 0.875)


def _pick_tones(rng, tries=200):
    """Two tones per layer, all four mutually distinct and every
    foreground/background pair strongly separated."""
    for _ in range(tries):
        tones = rng.choice(_PALETTE, size=(4, 3))
        fg, bg = tones[:2], tones[2:]
        cross_ok = all(
            np.linalg.norm(f - b) >= 0.5 and np.max(np.abs(f - b)) >= 0.5 for f in fg for b in bg
        )
        intra_ok = (
            np.max(np.abs(fg[0] - fg[1])) >= 0.25 and np.max(np.abs(bg[0] - bg[1])) >= 0.25
        )
        if cross_ok and intra_ok:
            return fg, bg
    raise RuntimeError("could not sample separated tone sets")


def make_case(kind, seed, size=128, trimap_dilate=6):
    rng = np.random.default_rng(seed)
    fg_tones, bg_tones = _pick_tones(rng)
    bg_angle = rng.uniform(0, np.pi)
    fg_angle = bg_angle + np.pi / 2 + rng.uniform(-np.pi / 12, np.pi / 12)
    fg = textured_layer(rng, size, fg_tones, angle=fg_angle)
    # bigblob exposes background only in corner pockets; a diagonal tone
    # split makes opposite pockets carry different appearances, so finding
    # them all takes more than appearance cues.
    bg_split = "diagonal" if kind == "bigblob" else None
    bg = textured_layer(rng, size, bg_tones, angle=bg_angle, tone_split=bg_split)
    c = size / 2
    jitter = lambda: rng.uniform(-size * 0.08, size * 0.08)

    if kind == "disk":
        alpha = alpha_disk(size, c + jitter(), c + jitter(), size * rng.uniform(0.24, 0.3), rng.uniform(2.0, 4.0))
    elif kind == "ring":
        r_out = size * rng.uniform(0.34, 0.4)
        alpha = alpha_ring(size, c + jitter() * 0.5, c + jitter() * 0.5, r_out, r_out * rng.uniform(0.42, 0.52), rng.uniform(2.0, 3.5))
    elif kind == "blob":
        alpha = alpha_blob(rng, size, c + jitter(), c + jitter(), size * rng.uniform(0.22, 0.28), rng.uniform(2.0, 4.0))
    elif kind == "band":
        alpha = alpha_band(size, rng.uniform(0, np.pi), rng.uniform(-size * 0.1, size * 0.1), size * rng.uniform(0.14, 0.2), rng.uniform(4.0, 8.0))
    elif kind == "twodisks":
        r = size * rng.uniform(0.16, 0.2)
        soft = rng.uniform(2.0, 3.5)
        a1 = alpha_disk(size, size * 0.28 + jitter() * 0.5, size * 0.3 + jitter() * 0.5, r, soft)
        a2 = alpha_disk(size, size * 0.72 + jitter() * 0.5, size * 0.7 + jitter() * 0.5, r, soft)
        alpha = np.clip(a1 + a2, 0.0, 1.0)
    elif kind == "bigblob":
        # Foreground fills most of the frame; background survives only in
        # corner pockets, so useful background strokes depend on steering
        # the selection toward otherwise unremarkable regions.
        alpha = alpha_blob(rng, size, c + jitter() * 0.4, c + jitter() * 0.4, size * rng.uniform(0.42, 0.48), rng.uniform(2.0, 4.0), lobes=2)
    else:
        raise ValueError(f"unknown case kind: {kind}")

    image = composite_image(fg, bg, alpha)
    trimap = band_trimap(alpha, dilate=trimap_dilate)
    return SyntheticCase(name=f"{kind}-{seed}", image=image, alpha=alpha, trimap=trimap)


def generate_suite(count, seed=0, size=128, trimap_dilate=2):
    """Deterministic list of cases cycling through the shape kinds.

    Suite trimaps use a tight unknown band (dilate=2) so the oracle
    scribbler finds class-pure superpixels even in thin structures.
    """
    cases = []
    for i in range(count):
        kind = CASE_KINDS[i % len(CASE_KINDS)]
        cases.append(make_case(kind, seed=seed * 10_000 + i, size=size, trimap_dilate=trimap_dilate))
    return cases


def write_case(case, out_dir):
    """Write image/alpha/trimap PNGs for one case; returns the directory."""
    from pathlib import Path
    from PIL import Image as PILImage

    d = Path(out_dir) / case.name
    d.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((case.image * 255).round().astype(np.uint8)).save(d / "image.png")
    PILImage.fromarray((case.alpha * 255).round().astype(np.uint8), mode="L").save(d / "alpha.png")
    PILImage.fromarray(case.trimap, mode="L").save(d / "trimap.png")
    return d


def load_case(case_dir):
    from pathlib import Path
    from PIL import Image as PILImage

    d = Path(case_dir)
    with PILImage.open(d / "image.png") as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    with PILImage.open(d / "alpha.png") as im:
        alpha = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    with PILImage.open(d / "trimap.png") as im:
        trimap = np.asarray(im.convert("L"), dtype=np.uint8)
    return SyntheticCase(name=d.name, image=image, alpha=alpha, trimap=trimap)
