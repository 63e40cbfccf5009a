"""Image loading, superpixel over-segmentation and the superpixel graph.

Everything downstream (region scoring, label propagation, trimap synthesis)
operates on the superpixel graph built here: a connection matrix CoM over
pixel-level adjacency and an affinity matrix AfM over color/texture features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage


class ImageLoadError(Exception):
    """Raised when an input image cannot be read or decoded."""


# Gaussian color-similarity bandwidth (RGB in [0,1]).
SIGMA_COLOR = 0.2
# Bias keeping chi-square denominators away from zero.
CHI2_BIAS = 1e-6
# Affinity mix: color mean, color histogram, texture histogram.
LAMBDA_CM, LAMBDA_CH, LAMBDA_TH = 0.4, 0.35, 0.25
# Edge-score exponent: e_i = mean_k exp(em_k * EDGE_DELTA).
EDGE_DELTA = 2.0


@dataclass
class SuperpixelMap:
    """Per-pixel superpixel labels plus per-superpixel geometry.

    labels:    (H, W) int array, values in [0, n)
    centroids: (n, 2) normalized (x, y) in [0, 1]
    bboxes:    (n, 4) inclusive (x0, y0, x1, y1) pixel bounds
    sizes:     (n,) pixel counts, all > 0
    """

    labels: np.ndarray
    n: int
    centroids: np.ndarray
    bboxes: np.ndarray
    sizes: np.ndarray

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def pixels_of(self, i):
        """(ys, xs) arrays of the pixels in superpixel i."""
        ys, xs = np.nonzero(self.labels == i)
        return ys, xs


@dataclass
class FeatureTable:
    """Per-superpixel mid-level features.

    cm: (n, 3) RGB means; ch: (n, bins^3) color histograms; th: (n, 8)
    gradient-orientation histograms; e: (n,) edge scores. Histograms are
    L1-normalized.
    """

    cm: np.ndarray
    ch: np.ndarray
    th: np.ndarray
    e: np.ndarray


@dataclass
class GraphMatrices:
    """Superpixel graph: binary adjacency CoM and affinity AfM, both n x n."""

    com: np.ndarray
    afm: np.ndarray


def load_image(path):
    """Load a raster image as float RGB in [0,1], shape (H, W, 3).

    Grayscale inputs are replicated to three channels.
    """
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except FileNotFoundError:
        raise ImageLoadError(f"file not found: {path}")
    except Exception as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}")
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageLoadError(f"zero-dimension image: {path}")
    return arr / 255.0


def save_gray_png(path, values):
    """Write a (H, W) uint8 array as an 8-bit grayscale PNG."""
    PILImage.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


def rgb_to_lab(rgb):
    """sRGB in [0,1] -> CIELAB (D65), vectorized over trailing channel axis."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = lin @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def default_superpixel_target(width, height):
    """Superpixel count adapted to image size: one per ~400 px, clamped."""
    return int(np.clip(width * height // 400, 100, 2000))


def oversegment(img, target_n, compactness=10.0, iterations=10):
    """SLIC-style over-segmentation into roughly `target_n` superpixels.

    Local k-means in (lab, xy) space on a regular seed grid, followed by
    connectivity enforcement: each label keeps its largest 4-connected
    component and orphan fragments are merged into the largest adjacent
    superpixel. Labels are compacted to [0, n) with no empty ids.
    """
    h, w = img.shape[:2]
    if not (1 <= target_n <= w * h):
        raise ValueError(f"target_n out of range: {target_n} not in [1, {w * h}]")

    if target_n == w * h:
        labels = np.arange(w * h).reshape(h, w)
        return _finalize_map(labels, w * h)

    lab = rgb_to_lab(img)
    step = np.sqrt(h * w / target_n)
    nx = max(1, int(round(w / step)))
    ny = max(1, int(round(h / step)))

    # Seed centers on the grid, nudged to the lowest-gradient 3x3 position.
    grad = _lab_gradient(lab)
    cx = (np.arange(nx) + 0.5) * (w / nx)
    cy = (np.arange(ny) + 0.5) * (h / ny)
    centers = []
    for yy in cy:
        for xx in cx:
            px, py = int(xx), int(yy)
            px, py = _perturb_seed(grad, px, py)
            centers.append((lab[py, px, 0], lab[py, px, 1], lab[py, px, 2], px, py))
    centers = np.array(centers, dtype=np.float64)

    yy, xx = np.mgrid[0:h, 0:w]
    inv_s2 = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for k in range(len(centers)):
            lk = centers[k, :3]
            pxk, pyk = centers[k, 3], centers[k, 4]
            x0 = max(0, int(pxk - 2 * step))
            x1 = min(w, int(pxk + 2 * step) + 1)
            y0 = max(0, int(pyk - 2 * step))
            y1 = min(h, int(pyk + 2 * step) + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            dl = lab[y0:y1, x0:x1] - lk
            dc = np.einsum("ijk,ijk->ij", dl, dl)
            ds = (xx[y0:y1, x0:x1] - pxk) ** 2 + (yy[y0:y1, x0:x1] - pyk) ** 2
            d = dc + ds * inv_s2
            win = dist[y0:y1, x0:x1]
            mask = d < win
            win[mask] = d[mask]
            labels[y0:y1, x0:x1][mask] = k

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        occupied = counts > 0
        sums = np.zeros((len(centers), 5))
        for c in range(3):
            sums[:, c] = np.bincount(flat, weights=lab[..., c].ravel(), minlength=len(centers))
        sums[:, 3] = np.bincount(flat, weights=xx.ravel(), minlength=len(centers))
        sums[:, 4] = np.bincount(flat, weights=yy.ravel(), minlength=len(centers))
        centers[occupied] = sums[occupied] / counts[occupied, None]

    labels = _enforce_connectivity(labels)
    n = int(labels.max()) + 1
    return _finalize_map(labels, n)


def _lab_gradient(lab):
    gx = np.zeros(lab.shape[:2])
    gy = np.zeros(lab.shape[:2])
    gx[:, 1:-1] = np.sum((lab[:, 2:] - lab[:, :-2]) ** 2, axis=-1)
    gy[1:-1, :] = np.sum((lab[2:, :] - lab[:-2, :]) ** 2, axis=-1)
    return gx + gy


def _perturb_seed(grad, px, py):
    h, w = grad.shape
    px = min(max(px, 1), w - 2)
    py = min(max(py, 1), h - 2)
    win = grad[py - 1 : py + 2, px - 1 : px + 2]
    dy, dx = np.unravel_index(np.argmin(win), win.shape)
    return px + dx - 1, py + dy - 1


def _enforce_connectivity(labels):
    """Keep each label's largest 4-connected component; merge fragments
    into the largest adjacent superpixel. Returns compacted labels."""
    h, w = labels.shape
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    sizes = np.bincount(labels.ravel())

    # Component ids over the whole map, per label, restricted to bboxes.
    comp = np.full((h, w), -1, dtype=np.int64)
    comp_label = []
    comp_size = []
    next_comp = 0
    keeper_of = {}
    for sp in range(len(sizes)):
        if sizes[sp] == 0:
            continue
        ys, xs = np.nonzero(labels == sp)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        sub = labels[y0:y1, x0:x1] == sp
        cc, ncc = ndimage.label(sub, structure=structure)
        best_c, best_sz = -1, -1
        for c in range(1, ncc + 1):
            mask = cc == c
            sz = int(mask.sum())
            comp[y0:y1, x0:x1][mask] = next_comp
            comp_label.append(sp)
            comp_size.append(sz)
            if sz > best_sz:
                best_c, best_sz = next_comp, sz
            next_comp += 1
        keeper_of[sp] = best_c

    keepers = set(keeper_of.values())
    pending = [c for c in range(next_comp) if c not in keepers]
    # Merge fragments into the largest adjacent superpixel; fragments whose
    # neighbors are all still pending wait for a later pass.
    while pending:
        deferred = []
        progressed = False
        for c in pending:
            ys, xs = np.nonzero(comp == c)
            neigh = set()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx_ = ys + dy, xs + dx
                ok = (ny >= 0) & (ny < h) & (nx_ >= 0) & (nx_ < w)
                neigh.update(np.unique(comp[ny[ok], nx_[ok]]))
            neigh.discard(c)
            resolved = [nc for nc in neigh if nc in keepers]
            if not resolved:
                deferred.append(c)
                continue
            target = max(resolved, key=lambda nc: sizes[comp_label[nc]])
            tlabel = comp_label[target]
            labels[ys, xs] = tlabel
            comp[ys, xs] = target
            progressed = True
        if not progressed:
            # Isolated ring of fragments with no keeper contact: promote one.
            keepers.add(deferred[0])
            keeper_of[comp_label[deferred[0]]] = deferred[0]
            deferred = deferred[1:]
        pending = deferred

    # Compact ids.
    used = np.unique(labels)
    remap = np.full(used.max() + 1, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return remap[labels]


def _finalize_map(labels, n):
    h, w = labels.shape
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n)
    if np.any(sizes == 0):
        raise AssertionError("empty superpixel id after segmentation")
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.bincount(flat, weights=xx.ravel(), minlength=n)
    sy = np.bincount(flat, weights=yy.ravel(), minlength=n)
    centroids = np.stack([sx / sizes / max(w - 1, 1), sy / sizes / max(h - 1, 1)], axis=1)
    centroids = np.clip(centroids, 0.0, 1.0)
    bboxes = np.zeros((n, 4), dtype=np.int64)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 1))
    for i in range(n):
        idx = order[bounds[i] : bounds[i + 1]]
        ys, xs = idx // w, idx % w
        bboxes[i] = (xs.min(), ys.min(), xs.max(), ys.max())
    return SuperpixelMap(labels=labels, n=n, centroids=centroids, bboxes=bboxes, sizes=sizes)


def extract_features(img, sp, bins=4, em=None):
    """Per-superpixel color mean, joint RGB histogram, texture histogram
    and edge score. `em` defaults to edge_map(img)."""
    h, w = img.shape[:2]
    if sp.labels.shape != (h, w):
        raise ValueError("superpixel map does not match image dimensions")
    flat = sp.labels.ravel()
    n = sp.n

    sizes = sp.sizes.astype(np.float64)
    cm = np.stack(
        [np.bincount(flat, weights=img[..., c].ravel(), minlength=n) / sizes for c in range(3)],
        axis=1,
    )

    q = np.minimum((img * bins).astype(np.int64), bins - 1)
    cell = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
    ch = np.zeros((n, bins**3))
    np.add.at(ch, (flat, cell.ravel()), 1.0)
    ch /= sizes[:, None]

    th = _texture_histograms(img, flat, n)

    if em is None:
        em = edge_map(img)
    e = edge_scores(sp, em)
    return FeatureTable(cm=cm, ch=ch, th=th, e=e)


def _texture_histograms(img, flat, n, nbins=8):
    lum = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    mag = np.hypot(gx, gy).ravel()
    # Unsigned orientation in [0, pi).
    ori = np.mod(np.arctan2(gy, gx).ravel(), np.pi)
    b = np.minimum((ori / np.pi * nbins).astype(np.int64), nbins - 1)
    th = np.zeros((n, nbins))
    np.add.at(th, (flat, b), mag)
    total = th.sum(axis=1)
    zero = total <= 1e-12
    th[~zero] /= total[~zero, None]
    th[zero] = 1.0 / nbins
    return th


def chi2_distance(a, b, bias=CHI2_BIAS):
    """Chi-square histogram distance: sum_k 2(a_k-b_k)^2 / (a_k+b_k+bias)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sum(2.0 * (a - b) ** 2 / (a + b + bias), axis=-1)


def chi2_matrix(h, bias=CHI2_BIAS):
    """All-pairs chi-square distances for rows of h, accumulated per bin."""
    n, k = h.shape
    out = np.zeros((n, n))
    for c in range(k):
        col = h[:, c]
        diff = col[:, None] - col[None, :]
        out += 2.0 * diff**2 / (col[:, None] + col[None, :] + bias)
    return out


def build_graph(sp, ft, sigma=SIGMA_COLOR):
    """Connection matrix from 8-adjacency at pixel level; affinity matrix
    mixing Gaussian color-mean similarity with exp(-chi2) histogram terms."""
    labels = sp.labels
    n = sp.n
    com = np.zeros((n, n), dtype=np.float64)
    pairs = [
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, :], labels[1:, :]),
        (labels[:-1, :-1], labels[1:, 1:]),
        (labels[:-1, 1:], labels[1:, :-1]),
    ]
    for a, b in pairs:
        neq = a != b
        com[a[neq], b[neq]] = 1.0
        com[b[neq], a[neq]] = 1.0
    np.fill_diagonal(com, 0.0)

    d2 = np.sum((ft.cm[:, None, :] - ft.cm[None, :, :]) ** 2, axis=-1)
    afm = (
        LAMBDA_CM * np.exp(-d2 / (2.0 * sigma**2))
        + LAMBDA_CH * np.exp(-chi2_matrix(ft.ch))
        + LAMBDA_TH * np.exp(-chi2_matrix(ft.th))
    )
    afm = 0.5 * (afm + afm.T)
    return GraphMatrices(com=com, afm=afm)


def edge_map(img, sigma=1.0):
    """Smoothed Sobel gradient magnitude of luminance, min-max scaled to
    [0,1] per image; a constant image maps to all zeros."""
    lum = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    mag = ndimage.gaussian_filter(np.hypot(gx, gy), sigma=sigma, mode="reflect")
    lo, hi = mag.min(), mag.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(mag)
    return (mag - lo) / (hi - lo)


def edge_scores(sp, em, delta=EDGE_DELTA):
    """Per-superpixel mean of exp(em * delta) over the superpixel's pixels."""
    flat = sp.labels.ravel()
    acc = np.bincount(flat, weights=np.exp(em.ravel() * delta), minlength=sp.n)
    return acc / sp.sizes
