"""Region grid and information-content scoring for scribble guidance.

The image is divided into an M x M grid. Each region is scored by four
terms over the superpixels whose centroids fall inside it: similarity to
the rest of the image, internal diversity, label entropy and edge score.
Each raw term is divided by its pair/element count and min-max rescaled
across the unvisited regions before summing, so no term dominates by scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagegraph import LAMBDA_CM, LAMBDA_CH, LAMBDA_TH, SIGMA_COLOR, chi2_distance


@dataclass
class RegionGrid:
    """M x M rectangle tiling with superpixel membership by centroid.

    rects:   (M*M, 4) pixel rectangles (x0, y0, x1, y1), exclusive upper.
    members: list of index arrays, members[r] = superpixels inside region r.
    visited: boolean flags; a visited region is never re-selected.
    """

    m: int
    width: int
    height: int
    rects: np.ndarray
    members: list = field(default_factory=list)
    visited: np.ndarray = None

    def __post_init__(self):
        if self.visited is None:
            self.visited = np.zeros(len(self.rects), dtype=bool)

    @property
    def n_regions(self):
        return len(self.rects)


@dataclass
class InfoScores:
    """Per-region raw and normalized information terms plus the combined
    Info value. Regions with no member superpixels are marked unusable."""

    similarity: np.ndarray
    diversity: np.ndarray
    entropy: np.ndarray
    edge: np.ndarray
    similarity_n: np.ndarray
    diversity_n: np.ndarray
    entropy_n: np.ndarray
    edge_n: np.ndarray
    info: np.ndarray
    usable: np.ndarray


def divide_regions(width, height, m):
    """Tile the image into M x M rectangles; the first M-1 rows/columns get
    the floor size and the last row/column absorbs the remainder."""
    if not (1 <= m <= min(width, height)):
        raise ValueError(f"grid order out of range: {m}")
    bw, bh = width // m, height // m
    rects = []
    for r in range(m):
        y0 = r * bh
        y1 = (r + 1) * bh if r < m - 1 else height
        for c in range(m):
            x0 = c * bw
            x1 = (c + 1) * bw if c < m - 1 else width
            rects.append((x0, y0, x1, y1))
    return RegionGrid(m=m, width=width, height=height, rects=np.array(rects, dtype=np.int64))


def assign_members(grid, sp):
    """Assign each superpixel to the region containing its centroid."""
    px = sp.centroids[:, 0] * (sp.width - 1 if sp.width > 1 else 1)
    py = sp.centroids[:, 1] * (sp.height - 1 if sp.height > 1 else 1)
    grid.members = []
    col = np.minimum((px // max(grid.width // grid.m, 1)).astype(np.int64), grid.m - 1)
    row = np.minimum((py // max(grid.height // grid.m, 1)).astype(np.int64), grid.m - 1)
    region = row * grid.m + col
    for r in range(grid.n_regions):
        grid.members.append(np.nonzero(region == r)[0])
    return grid


def _pair_terms(ft, idx_i, idx_j):
    """Three double sums over idx_i x idx_j: Gaussian color-mean similarity
    and chi-square distances of the color and texture histograms."""
    if len(idx_i) == 0 or len(idx_j) == 0:
        return 0.0, 0.0, 0.0
    cm_i, cm_j = ft.cm[idx_i], ft.cm[idx_j]
    d2 = np.sum((cm_i[:, None, :] - cm_j[None, :, :]) ** 2, axis=-1)
    g = np.sum(np.exp(-d2 / (2.0 * SIGMA_COLOR**2)))
    c = np.sum(chi2_distance(ft.ch[idx_i][:, None, :], ft.ch[idx_j][None, :, :]))
    t = np.sum(chi2_distance(ft.th[idx_i][:, None, :], ft.th[idx_j][None, :, :]))
    return g, c, t


def similarity_term(members_in, members_out, ft):
    """Similarity of a region to its complement: weighted double sum of the
    Gaussian color term and chi-square histogram terms over in x out pairs.
    Zero when the complement is empty (single-region grid)."""
    if len(members_out) == 0:
        return 0.0
    g, c, t = _pair_terms(ft, members_in, members_out)
    return LAMBDA_CM * g + LAMBDA_CH * c + LAMBDA_TH * t


def diversity_term(members_in, ft):
    """Internal diversity: the same form as the similarity term with both
    sums over the region's own superpixels, negated."""
    g, c, t = _pair_terms(ft, members_in, members_in)
    return -(LAMBDA_CM * g + LAMBDA_CH * c + LAMBDA_TH * t)


def entropy_term(members_in, probs):
    """Label entropy of the region: -sum_i sum_c p_ic ln p_ic with the
    0*ln(0) := 0 convention. probs is (n, 3) rows on the simplex."""
    p = probs[members_in]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-np.sum(t))


def edge_term(members_in, ft):
    """Sum of the member superpixels' edge scores."""
    return float(np.sum(ft.e[members_in]))


def info_content(grid, ft, probs, drop=()):
    """Score every region. Raw terms are count-normalized (similarity by
    |in|*|out|, diversity by |in|^2, entropy and edge by |in|), then each
    term is min-max rescaled to [0,1] across usable unvisited regions and
    summed. Terms named in `drop` contribute zero."""
    nr = grid.n_regions
    n_sp = ft.cm.shape[0]
    raw = {k: np.zeros(nr) for k in ("similarity", "diversity", "entropy", "edge")}
    norm = {k: np.zeros(nr) for k in raw}
    usable = np.zeros(nr, dtype=bool)
    all_idx = np.arange(n_sp)

    for r in range(nr):
        inside = grid.members[r]
        k = len(inside)
        if k == 0:
            continue
        usable[r] = True
        outside = np.setdiff1d(all_idx, inside, assume_unique=True)
        raw["similarity"][r] = similarity_term(inside, outside, ft)
        raw["diversity"][r] = diversity_term(inside, ft)
        raw["entropy"][r] = entropy_term(inside, probs)
        raw["edge"][r] = edge_term(inside, ft)
        norm["similarity"][r] = raw["similarity"][r] / (k * max(len(outside), 1))
        norm["diversity"][r] = raw["diversity"][r] / (k * k)
        norm["entropy"][r] = raw["entropy"][r] / k
        norm["edge"][r] = raw["edge"][r] / k

    live = usable & ~grid.visited
    for key in norm:
        if key in drop:
            norm[key] = np.zeros(nr)
            continue
        norm[key] = _minmax_over(norm[key], live)

    info = norm["similarity"] + norm["diversity"] + norm["entropy"] + norm["edge"]
    info[~usable] = -np.inf
    return InfoScores(
        similarity=raw["similarity"],
        diversity=raw["diversity"],
        entropy=raw["entropy"],
        edge=raw["edge"],
        similarity_n=norm["similarity"],
        diversity_n=norm["diversity"],
        entropy_n=norm["entropy"],
        edge_n=norm["edge"],
        info=info,
        usable=usable,
    )


def _minmax_over(values, mask):
    out = np.zeros_like(values)
    if not np.any(mask):
        return out
    lo = values[mask].min()
    hi = values[mask].max()
    if hi - lo <= 1e-12:
        return out
    out[mask] = (values[mask] - lo) / (hi - lo)
    return out


def select_region(scores, grid, mode="argmax", rng=None):
    """Pick the next region among usable unvisited ones and mark it visited.

    argmax: highest Info, ties to the lowest region index. random-top6:
    uniform seeded draw from the six highest-Info candidates.
    """
    candidates = np.nonzero(scores.usable & ~grid.visited)[0]
    if len(candidates) == 0:
        raise ValueError("all regions visited")
    if mode == "argmax":
        best = candidates[np.argmax(scores.info[candidates])]
    elif mode == "random-top6":
        if rng is None:
            rng = np.random.default_rng(0)
        order = candidates[np.argsort(-scores.info[candidates], kind="stable")]
        top = order[: min(6, len(order))]
        best = int(rng.choice(top))
    else:
        raise ValueError(f"unknown selection mode: {mode}")
    grid.visited[best] = True
    return int(best)


def scores_table(scores):
    """Rows (region, similarity_n, diversity_n, entropy_n, edge_n, info)
    for the diagnostic dump."""
    rows = []
    for r in range(len(scores.info)):
        info = scores.info[r] if np.isfinite(scores.info[r]) else float("nan")
        rows.append(
            (
                r,
                scores.similarity_n[r],
                scores.diversity_n[r],
                scores.entropy_n[r],
                scores.edge_n[r],
                info,
            )
        )
    return rows
