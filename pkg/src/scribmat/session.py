"""Session orchestration and the unattended evaluation harness.

A session iterates N rounds of (select region -> collect scribbles ->
absorbing-chain propagation), then finalizes with CNN propagation, trimap
synthesis and the alpha solve. The oracle scribbler answers region
suggestions from a ground-truth trimap so whole sessions run unattended;
the evaluation harness sweeps ablations, iteration counts and selection
modes over generated composites.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import cnnprop, infoselect, labelstate, markovprop, mattesolver
from .imagegraph import (
    SuperpixelMap,
    build_graph,
    default_superpixel_target,
    extract_features,
    oversegment,
)
from .labelstate import LabelClass, ProbabilityState, ScribbleStroke


class Phase(Enum):
    SELECTING = "selecting"
    AWAITING_SCRIBBLES = "awaiting_scribbles"
    PROPAGATING = "propagating"
    FINALIZED = "finalized"


class PhaseError(Exception):
    pass


INFO_TERMS = ("similarity", "diversity", "entropy", "edge")


@dataclass
class SessionConfig:
    grid_order: int = 4
    rounds: int = 6
    superpixel_target: int | None = None
    tau: float = labelstate.TRIMAP_THRESHOLD
    selection_mode: str = "argmax"
    no_markov: bool = False
    no_cnn: bool = False
    drop_similarity: bool = False
    drop_diversity: bool = False
    drop_entropy: bool = False
    drop_edge: bool = False
    seed: int = 0
    external_cmd: str | None = None
    allow_downsample: bool = True
    # None trains the net on scribbled superpixels only. Chain confidence is
    # systematically misplaced on shapes with a long boundary (background
    # mass leaks into densely absorbed foreground), so confidence-harvested
    # samples can poison the net with inverted labels.
    harvest_confidence: float | None = None

    def __post_init__(self):
        if self.grid_order < 1:
            raise ValueError("grid order must be >= 1")
        if not (1 <= self.rounds <= self.grid_order**2):
            raise ValueError("rounds must be in [1, grid_order^2]")
        if not (1.0 / 3.0 < self.tau <= 1.0):
            raise ValueError("trimap threshold must lie in (1/3, 1]")

    def dropped_terms(self):
        return tuple(t for t in INFO_TERMS if getattr(self, f"drop_{t}"))

    @classmethod
    def from_dict(cls, doc):
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        unknown = set(doc) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SessionResult:
    trimap: np.ndarray
    alpha: np.ndarray
    cnn_skipped: str | None = None


@dataclass
class Session:
    image: np.ndarray
    cfg: SessionConfig
    sp: SuperpixelMap
    ft: object
    graph: object
    grid: infoselect.RegionGrid
    ps: ProbabilityState
    phase: Phase = Phase.SELECTING
    iteration: int = 0
    current_region: int | None = None
    strokes: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    result: SessionResult | None = None
    rng_select: np.random.Generator = None
    session_id: str | None = None
    last_scores: infoselect.InfoScores | None = None

    @property
    def ready_to_finalize(self):
        return self.phase == Phase.PROPAGATING and self.iteration >= self.cfg.rounds


def create_session(image, cfg=None, session_id=None):
    """Build the graph artifacts, score the grid with uniform label
    probabilities and suggest the first region."""
    cfg = cfg or SessionConfig()
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("zero-size image")
    target = cfg.superpixel_target or default_superpixel_target(w, h)
    sp = oversegment(image, target)
    ft = extract_features(image, sp)
    graph = build_graph(sp, ft)
    grid = infoselect.divide_regions(w, h, cfg.grid_order)
    infoselect.assign_members(grid, sp)
    ps = ProbabilityState.uniform(sp.n)
    session = Session(
        image=image,
        cfg=cfg,
        sp=sp,
        ft=ft,
        graph=graph,
        grid=grid,
        ps=ps,
        rng_select=np.random.default_rng(cfg.seed),
        session_id=session_id,
    )
    _select_next(session)
    session.phase = Phase.AWAITING_SCRIBBLES
    return session


def _select_next(session):
    scores = infoselect.info_content(
        session.grid, session.ft, session.ps.probs, drop=session.cfg.dropped_terms()
    )
    session.current_region = infoselect.select_region(
        scores, session.grid, mode=session.cfg.selection_mode, rng=session.rng_select
    )
    session.last_scores = scores
    return session.current_region


def submit_scribbles(session, strokes):
    """Apply one round of scribbles, propagate, and either suggest the next
    region or leave the session ready to finalize. An empty stroke list is
    accepted and still advances the round."""
    if session.phase != Phase.AWAITING_SCRIBBLES:
        raise PhaseError(f"cannot accept scribbles in phase {session.phase.value}")

    rect = session.grid.rects[session.current_region]
    for stroke in strokes:
        if any(not (rect[0] <= x < rect[2] and rect[1] <= y < rect[3]) for x, y in stroke.points):
            session.warnings.append(
                f"round {session.iteration + 1}: stroke strays outside suggested region {session.current_region}"
            )
            break

    session.ps, _ = labelstate.apply_scribbles(session.ps, session.sp, strokes)
    session.strokes.extend(strokes)
    session.phase = Phase.PROPAGATING

    if not session.cfg.no_markov and session.ps.hard:
        tm = markovprop.build_transition_matrix(
            session.graph, session.ps.labeled, session.ps.unlabeled
        )
        session.ps = markovprop.propagate_labels(tm, session.ps)

    session.iteration += 1
    if session.iteration < session.cfg.rounds:
        session.phase = Phase.SELECTING
        _select_next(session)
        session.phase = Phase.AWAITING_SCRIBBLES
    else:
        session.current_region = None
    return session


def finalize(session, early=False):
    """CNN propagation (unless disabled or the harvest fails), trimap
    synthesis and the alpha solve. Idempotent: repeated calls return the
    cached result."""
    if session.phase == Phase.FINALIZED:
        return session.result
    complete = session.iteration >= session.cfg.rounds
    if not complete and not (early and session.iteration >= 1):
        raise PhaseError(
            f"session has completed {session.iteration}/{session.cfg.rounds} rounds; "
            "pass early=True to finalize anyway"
        )

    cnn_skipped = None
    if session.cfg.no_cnn:
        cnn_skipped = "disabled by configuration"
    else:
        try:
            samples = cnnprop.harvest_training_set(
                session.ps, session.sp, session.image, confidence=session.cfg.harvest_confidence
            )
            net = cnnprop.PropNet(seed=session.cfg.seed)
            cnnprop.train(net, samples, cnnprop.TrainConfig(seed=session.cfg.seed))
            session.ps = cnnprop.predict_and_update(net, session.ps, session.sp, session.image)
        except cnnprop.HarvestError as exc:
            cnn_skipped = str(exc)

    trimap = labelstate.synthesize_trimap(session.ps, session.sp, tau=session.cfg.tau)
    if session.cfg.external_cmd:
        alpha = mattesolver.external_solver(session.cfg.external_cmd, session.image, trimap)
    else:
        alpha = mattesolver.estimate_alpha(
            session.image, trimap, allow_downsample=session.cfg.allow_downsample
        )
    session.result = SessionResult(trimap=trimap, alpha=alpha, cnn_skipped=cnn_skipped)
    session.phase = Phase.FINALIZED
    return session.result


# ---------------------------------------------------------------------------
# Oracle scribbler
# ---------------------------------------------------------------------------

_CLASS_VALUES = (
    (LabelClass.FOREGROUND, 255),
    (LabelClass.BACKGROUND, 0),
    (LabelClass.UNKNOWN, 128),
)


def class_purities(gt_trimap, sp):
    """(3, n) fractions of each superpixel's pixels per trimap class,
    rows ordered (foreground, background, unknown)."""
    flat = sp.labels.ravel()
    out = np.zeros((3, sp.n))
    for row, (_, value) in enumerate(_CLASS_VALUES):
        hits = np.bincount(flat[gt_trimap.ravel() == value], minlength=sp.n)
        out[row] = hits / sp.sizes
    return out


def oracle_scribbles(
    grid,
    region_id,
    gt_trimap,
    sp,
    seed,
    iteration=0,
    radius=3,
    purity_threshold=0.9,
    max_points=5,
):
    """One stroke per class present in the region: a polyline through up to
    `max_points` superpixels at least 90% pure in that class.

    Stroke points sit at each superpixel's centroid when the brush disk
    fits there, otherwise at the deepest interior pixel; superpixels too
    thin for the brush are skipped. Strokes are trimmed from the tail
    whenever their footprint crosses a majority-foreign superpixel or
    collides with another class in the batch, mimicking a careful user.
    """
    rng = np.random.default_rng(seed)
    members = grid.members[region_id]
    if len(members) == 0:
        return []
    purities = class_purities(gt_trimap, sp)

    strokes = []
    claimed = {}
    for row, (cls, _) in enumerate(_CLASS_VALUES):
        pur = purities[row, members]
        candidates = members[pur >= purity_threshold]
        if len(candidates) == 0:
            continue
        shuffled = rng.permutation(candidates)
        order = shuffled[np.argsort(-purities[row, shuffled], kind="stable")]
        anchors = []
        for i in order:
            pt = _brush_anchor(i, sp, radius)
            if pt is not None:
                anchors.append(pt)
            if len(anchors) == max_points * 2:
                break
        if not anchors:
            # Too thin for the brush anywhere: dot the centroids and let the
            # cleanliness trim reject any that bleed across classes.
            anchors = [_centroid_pixel(i, sp) for i in order[:max_points]]
        # Keep the polyline to mutually close anchors: a careful user does
        # not connect separate same-class areas with one stroke across
        # foreign territory (e.g. hole and surround of an annulus).
        anchors = _proximate_group(anchors, sp, max_points)

        def accept(points):
            trial = ScribbleStroke(
                points=points, radius=radius, label=cls, region=int(region_id), iteration=iteration
            )
            footprint = labelstate.stroke_footprint(trial, sp)
            clean = all(purities[row, s] >= 0.5 for s in footprint)
            free = all(claimed.get(s, cls) == cls for s in footprint)
            if clean and free:
                claimed.update({s: cls for s in footprint})
                return trial
            return None

        stroke = None
        points = _chain_points(anchors)
        while points and stroke is None:
            stroke = accept(points)
            points = points[:-1]
        if stroke is None:
            for pt in anchors:
                stroke = accept([pt])
                if stroke is not None:
                    break
        if stroke is not None:
            strokes.append(stroke)
    return strokes


def _centroid_pixel(i, sp):
    return (
        int(round(sp.centroids[i, 0] * (sp.width - 1))),
        int(round(sp.centroids[i, 1] * (sp.height - 1))),
    )


def _proximate_group(points, sp, max_points):
    """Cluster of points around the first (highest-purity) anchor under
    single-linkage with a hop budget of about two superpixel widths,
    truncated to `max_points`."""
    if len(points) <= 1:
        return points[:max_points]
    hop = 2.5 * np.sqrt(sp.width * sp.height / sp.n)
    pts = np.asarray(points, dtype=float)
    parent = list(range(len(pts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if np.hypot(*(pts[i] - pts[j])) <= hop:
                parent[find(i)] = find(j)
    anchor_root = find(0)
    cluster = [i for i in range(len(pts)) if find(i) == anchor_root]
    return [points[i] for i in cluster[:max_points]]


def _brush_anchor(i, sp, radius):
    """A pixel of superpixel i where a disk of the brush radius fits without
    touching neighbors: the centroid when possible, else the deepest interior
    pixel; None when the superpixel is too thin for the brush."""
    from scipy.ndimage import distance_transform_edt

    x0, y0, x1, y1 = sp.bboxes[i]
    pad = 1
    xa, ya = max(0, x0 - pad), max(0, y0 - pad)
    sub = sp.labels[ya : y1 + 1 + pad, xa : x1 + 1 + pad] == i
    edt = distance_transform_edt(sub)
    clearance = radius + 0.5
    cx = int(round(sp.centroids[i, 0] * (sp.width - 1)))
    cy = int(round(sp.centroids[i, 1] * (sp.height - 1)))
    ly, lx = cy - ya, cx - xa
    if 0 <= ly < edt.shape[0] and 0 <= lx < edt.shape[1] and edt[ly, lx] >= clearance:
        return (cx, cy)
    best = np.unravel_index(np.argmax(edt), edt.shape)
    if edt[best] < clearance:
        return None
    return (int(best[1] + xa), int(best[0] + ya))


def _chain_points(pts):
    """Nearest-neighbor chain ordering, shortening the drawn polyline."""
    if len(pts) <= 2:
        return list(pts)
    remaining = list(pts[1:])
    chain = [pts[0]]
    while remaining:
        last = chain[-1]
        j = min(
            range(len(remaining)),
            key=lambda k: (remaining[k][0] - last[0]) ** 2 + (remaining[k][1] - last[1]) ** 2,
        )
        chain.append(remaining.pop(j))
    return chain


def run_auto_session(image, gt_trimap, cfg=None, gt_alpha=None):
    """Full oracle-driven session. Returns a record with the final trimap,
    alpha, coverage percentage and (when gt_alpha is given) the RMSE."""
    cfg = cfg or SessionConfig()
    session = create_session(image, cfg)
    for round_idx in range(cfg.rounds):
        strokes = oracle_scribbles(
            session.grid,
            session.current_region,
            gt_trimap,
            session.sp,
            seed=cfg.seed * 1009 + round_idx,
            iteration=round_idx,
        )
        submit_scribbles(session, strokes)
    result = finalize(session)
    return _session_record(session, result, gt_alpha)


def run_one_shot(image, gt_trimap, cfg=None, gt_alpha=None):
    """Batch baseline: score regions without the entropy term, pick the top
    N at once, scribble them all, run a single propagation round, finalize."""
    cfg = cfg or SessionConfig()
    session = create_session(image, replace(cfg, rounds=1, drop_entropy=True))
    # First region was already selected; extend to the top N in one pass.
    regions = [session.current_region]
    scores = session.last_scores
    for _ in range(cfg.rounds - 1):
        candidates = np.nonzero(scores.usable & ~session.grid.visited)[0]
        if len(candidates) == 0:
            break
        best = candidates[np.argmax(scores.info[candidates])]
        session.grid.visited[best] = True
        regions.append(int(best))

    strokes = []
    for k, region in enumerate(regions):
        strokes.extend(
            oracle_scribbles(
                session.grid, region, gt_trimap, session.sp, seed=cfg.seed * 1009 + k, iteration=0
            )
        )
    # Cross-region footprints can collide; resolve by dropping later strokes.
    kept, claimed = [], {}
    for stroke in strokes:
        footprint = labelstate.stroke_footprint(stroke, session.sp)
        if all(claimed.get(s, stroke.label) == stroke.label for s in footprint):
            claimed.update({s: stroke.label for s in footprint})
            kept.append(stroke)
    session.current_region = regions[0]
    submit_scribbles(session, kept)
    result = finalize(session)
    return _session_record(session, result, gt_alpha)


def _session_record(session, result, gt_alpha):
    h, w = session.image.shape[:2]
    record = {
        "trimap": result.trimap,
        "alpha": result.alpha,
        "strokes": session.strokes,
        "coverage": labelstate.coverage_percentage(session.strokes, w, h),
        "cnn_skipped": result.cnn_skipped,
        "warnings": list(session.warnings),
    }
    if gt_alpha is not None:
        record["rmse"] = labelstate.rmse(result.alpha, gt_alpha)
    return record


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = (
    ("full", {}),
    ("no_markov", {"no_markov": True}),
    ("no_cnn", {"no_cnn": True}),
    ("drop_similarity", {"drop_similarity": True}),
    ("drop_diversity", {"drop_diversity": True}),
    ("drop_entropy", {"drop_entropy": True}),
    ("drop_edge", {"drop_edge": True}),
)


def evaluate(cases, base_cfg=None, sweep="default", iteration_values=None, selection_seeds=10,
             out_dir=None, progress=None):
    """Run the configured sweep over (image, gt_alpha, gt_trimap) cases and
    aggregate per-config RMSE/coverage statistics."""
    if not cases:
        raise ValueError("evaluation needs at least one case")
    base_cfg = base_cfg or SessionConfig()
    rows = []

    def run_row(label, cfg, runner=run_auto_session):
        rmses, coverages = [], []
        for i, case in enumerate(cases):
            rec = runner(case.image, case.trimap, cfg, gt_alpha=case.alpha)
            rmses.append(rec["rmse"])
            coverages.append(rec["coverage"])
            if out_dir is not None:
                _write_artifacts(Path(out_dir) / case.name / label, rec)
            if progress:
                progress(f"{label}: case {i + 1}/{len(cases)} rmse={rec['rmse']:.4f}")
        rows.append(
            {
                "config": label,
                "median_rmse": float(np.median(rmses)),
                "mean_rmse": float(np.mean(rmses)),
                "median_coverage": float(np.median(coverages)),
                "rmses": rmses,
            }
        )

    if sweep == "default":
        run_row("full", base_cfg)
    elif sweep == "ablations":
        for label, flags in ABLATION_CONFIGS:
            run_row(label, replace(base_cfg, **flags))
    elif sweep == "iterations":
        values = iteration_values or tuple(range(1, 11))
        for n in values:
            run_row(f"rounds={n}", replace(base_cfg, rounds=n))
    elif sweep == "selection":
        run_row("argmax", replace(base_cfg, selection_mode="argmax"))
        rmses, coverages = [], []
        for s in range(selection_seeds):
            cfg = replace(base_cfg, selection_mode="random-top6", seed=base_cfg.seed + 7919 * (s + 1))
            for case in cases:
                rec = run_auto_session(case.image, case.trimap, cfg, gt_alpha=case.alpha)
                rmses.append(rec["rmse"])
                coverages.append(rec["coverage"])
                if progress:
                    progress(f"random-top6 seed {s}: rmse={rec['rmse']:.4f}")
        rows.append(
            {
                "config": "random-top6",
                "median_rmse": float(np.median(rmses)),
                "mean_rmse": float(np.mean(rmses)),
                "median_coverage": float(np.median(coverages)),
                "rmses": rmses,
            }
        )
    elif sweep == "oneshot":
        run_row("iterative", base_cfg)
        run_row("one-shot", base_cfg, runner=run_one_shot)
    else:
        raise ValueError(f"unknown sweep: {sweep}")

    return {"sweep": sweep, "cases": len(cases), "rows": rows}


def _write_artifacts(directory, record):
    from PIL import Image as PILImage

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(record["trimap"], mode="L").save(directory / "trimap.png")
    PILImage.fromarray((record["alpha"] * 255).round().astype(np.uint8), mode="L").save(
        directory / "alpha.png"
    )
    (directory / "strokes.json").write_text(
        json.dumps(labelstate.strokes_to_wire(record["strokes"]), indent=2)
    )


def write_report(report, csv_path=None, json_path=None):
    if json_path:
        slim = {
            "sweep": report["sweep"],
            "cases": report["cases"],
            "rows": [{k: v for k, v in row.items() if k != "rmses"} for row in report["rows"]],
        }
        Path(json_path).write_text(json.dumps(slim, indent=2))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config", "median_rmse", "mean_rmse", "median_coverage"])
            for row in report["rows"]:
                writer.writerow(
                    [
                        row["config"],
                        f"{row['median_rmse']:.6f}",
                        f"{row['mean_rmse']:.6f}",
                        f"{row['median_coverage']:.6f}",
                    ]
                )
