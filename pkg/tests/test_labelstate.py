import json

import numpy as np
import pytest

from scribmat.labelstate import (
    LabelClass,
    ProbabilityState,
    ScribbleConflictError,
    ScribbleStroke,
    apply_scribbles,
    coverage_percentage,
    rasterize_stroke,
    rmse,
    stroke_footprint,
    strokes_from_wire,
    strokes_to_wire,
    synthesize_trimap,
    trimap_classes,
)

from conftest import grid_superpixels


def F(points, radius=3, region=-1):
    return ScribbleStroke(points=points, radius=radius, label=LabelClass.FOREGROUND, region=region)


def B(points, radius=3):
    return ScribbleStroke(points=points, radius=radius, label=LabelClass.BACKGROUND)


def U(points, radius=3):
    return ScribbleStroke(points=points, radius=radius, label=LabelClass.UNKNOWN)


class TestApplyScribbles:
    def test_stroke_crossing_three_superpixels(self, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        # Horizontal line through y=4 crossing superpixels 0,1,2 (cells are 8px).
        out, touched = apply_scribbles(ps, sp8, [F([(2, 4), (20, 4)], radius=1)])
        assert {0, 1, 2} <= touched
        for spx in touched:
            assert out.hard[spx] == LabelClass.FOREGROUND
            assert np.array_equal(out.probs[spx], [1.0, 0.0, 0.0])
        # Original state untouched.
        assert not ps.hard

    def test_conflicting_classes_rejected_atomically(self, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        with pytest.raises(ScribbleConflictError) as err:
            apply_scribbles(ps, sp8, [F([(4, 4)]), B([(5, 5)])])
        assert isinstance(err.value.superpixel, int)
        assert not ps.hard  # no partial application

    def test_out_of_bounds_point(self, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        with pytest.raises(ValueError, match="outside image bounds"):
            apply_scribbles(ps, sp8, [F([(70, 4)])])

    def test_idempotent_for_identical_batches(self, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        batch = [F([(4, 4), (20, 4)]), B([(4, 40), (20, 40)])]
        once, _ = apply_scribbles(ps, sp8, batch)
        twice, _ = apply_scribbles(once, sp8, batch)
        assert once.hard == twice.hard
        assert np.array_equal(once.probs, twice.probs)

    def test_hard_labels_immutable(self, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        first, _ = apply_scribbles(ps, sp8, [F([(4, 4)])])
        second, touched = apply_scribbles(first, sp8, [B([(4, 4)])])
        footprint = stroke_footprint(B([(4, 4)]), sp8)
        assert second.hard[sp8.labels[4, 4]] == LabelClass.FOREGROUND
        assert sp8.labels[4, 4] not in touched or footprint

    def test_simplex_maintained(self, rng, sp8):
        ps = ProbabilityState.uniform(sp8.n)
        for k in range(5):
            x, y = int(rng.integers(0, 64)), int(rng.integers(0, 64))
            cls = [F, B, U][k % 3]
            try:
                ps, _ = apply_scribbles(ps, sp8, [cls([(x, y)])])
            except ScribbleConflictError:
                continue
            ps.check_simplex()


class TestRasterize:
    def test_radius_zero_line_pixel_count(self):
        mask = rasterize_stroke(F([(0, 5), (63, 5)], radius=0), 64, 64)
        assert mask.sum() == 64
        assert mask[5, :].all()

    def test_disk_radius_three(self):
        mask = rasterize_stroke(F([(10, 10)], radius=3), 64, 64)
        assert mask.sum() == 29  # |{(dx,dy): dx^2+dy^2 <= 9}|

    def test_clipped_at_border(self):
        mask = rasterize_stroke(F([(0, 0)], radius=3), 64, 64)
        assert 0 < mask.sum() < 29


class TestSynthesizeTrimap:
    def _state(self, n):
        return ProbabilityState.uniform(n)

    def test_pf_above_threshold_is_foreground(self, sp8):
        ps = self._state(sp8.n)
        ps.probs[:] = (0.7, 0.2, 0.1)
        tri = synthesize_trimap(ps, sp8)
        assert np.all(tri == 255)

    def test_uncertain_is_unknown(self, sp8):
        ps = self._state(sp8.n)
        ps.probs[:] = (0.5, 0.4, 0.1)
        assert np.all(synthesize_trimap(ps, sp8) == 128)

    def test_hard_unknown_stays_gray(self, sp8):
        ps = self._state(sp8.n)
        ps.probs[:] = (0.9, 0.05, 0.05)
        ps.hard[0] = LabelClass.UNKNOWN
        ps.probs[0] = (0.0, 0.0, 1.0)
        tri = synthesize_trimap(ps, sp8)
        assert np.all(tri[sp8.labels == 0] == 128)
        assert np.all(tri[sp8.labels != 0] == 255)

    def test_background_threshold(self, sp8):
        ps = self._state(sp8.n)
        ps.probs[:] = (0.1, 0.66, 0.24)
        assert np.all(synthesize_trimap(ps, sp8) == 0)

    def test_only_legal_values_and_round_trip(self, rng, sp8):
        ps = self._state(sp8.n)
        ps.probs = rng.dirichlet(np.ones(3), size=sp8.n)
        tri = synthesize_trimap(ps, sp8)
        assert set(np.unique(tri)) <= {0, 128, 255}
        classes = trimap_classes(tri)
        rebuilt = np.zeros_like(tri)
        rebuilt[classes == LabelClass.FOREGROUND] = 255
        rebuilt[classes == LabelClass.UNKNOWN] = 128
        assert np.array_equal(rebuilt, tri)


class TestMetrics:
    def test_rmse_identical(self, rng):
        a = rng.uniform(size=(16, 16))
        assert rmse(a, a) == 0.0

    def test_rmse_extremes(self):
        assert rmse(np.ones((8, 8)), np.zeros((8, 8))) == 1.0
        assert rmse(np.full((8, 8), 0.5), np.zeros((8, 8))) == 0.5

    def test_rmse_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            rmse(np.zeros((4, 4)), np.zeros((5, 4)))

    def test_coverage_empty(self):
        assert coverage_percentage([], 64, 64) == 0.0

    def test_coverage_exact_64_pixels(self):
        strokes = [F([(0, 9), (63, 9)], radius=0)]
        assert coverage_percentage(strokes, 64, 64) == pytest.approx(1.5625)

    def test_overlapping_strokes_counted_once(self):
        strokes = [F([(10, 10)], radius=3), F([(10, 10)], radius=3)]
        single = coverage_percentage(strokes[:1], 64, 64)
        assert coverage_percentage(strokes, 64, 64) == single


class TestWireFormat:
    def test_round_trip(self):
        strokes = [
            ScribbleStroke(points=[(1, 2), (3, 4)], radius=2, label=LabelClass.BACKGROUND, region=5, iteration=1),
            ScribbleStroke(points=[(9, 9)], radius=3, label=LabelClass.UNKNOWN),
        ]
        doc = strokes_to_wire(strokes)
        back = strokes_from_wire(json.dumps(doc))
        assert [s.label for s in back] == [LabelClass.BACKGROUND, LabelClass.UNKNOWN]
        assert back[0].points == [(1, 2), (3, 4)]
        assert back[0].region == 5 and back[0].iteration == 1

    def test_malformed_entries(self):
        with pytest.raises(ValueError):
            strokes_from_wire([{"class": "X", "points": [[0, 0]]}])
        with pytest.raises(ValueError):
            strokes_from_wire([{"class": "F"}])
        with pytest.raises(ValueError):
            strokes_from_wire({"not": "a list"})

    def test_empty_points_rejected(self):
        with pytest.raises(ValueError):
            strokes_from_wire([{"class": "F", "points": []}])
