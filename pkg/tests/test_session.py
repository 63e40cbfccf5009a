import numpy as np
import pytest

from scribmat.labelstate import LabelClass, ScribbleStroke
from scribmat.session import (
    Phase,
    PhaseError,
    SessionConfig,
    create_session,
    evaluate,
    finalize,
    oracle_scribbles,
    run_auto_session,
    run_one_shot,
    submit_scribbles,
)
from scribmat.synthetic import make_case, suite_superpixel_target


FAST = dict(superpixel_target=100, seed=1)


@pytest.fixture(scope="module")
def disk_case():
    return make_case("disk", seed=3)


@pytest.fixture(scope="module")
def finished(disk_case):
    cfg = SessionConfig(seed=1, superpixel_target=suite_superpixel_target(128))
    s = create_session(disk_case.image, cfg)
    for r in range(cfg.rounds):
        strokes = oracle_scribbles(
            s.grid, s.current_region, disk_case.trimap, s.sp, seed=1009 + r, iteration=r
        )
        submit_scribbles(s, strokes)
    result = finalize(s)
    return s, result, disk_case


class TestSessionConfig:
    def test_defaults(self):
        cfg = SessionConfig()
        assert cfg.grid_order == 4 and cfg.rounds == 6 and cfg.tau == 0.65

    def test_validation(self):
        with pytest.raises(ValueError):
            SessionConfig(grid_order=0)
        with pytest.raises(ValueError):
            SessionConfig(rounds=17)  # > grid_order^2
        with pytest.raises(ValueError):
            SessionConfig(tau=0.2)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config"):
            SessionConfig.from_dict({"bogus": 1})


class TestCreateSession:
    def test_defaults_build_grid_and_suggest(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        assert s.grid.n_regions == 16
        assert s.phase == Phase.AWAITING_SCRIBBLES
        assert s.current_region is not None
        assert s.grid.visited[s.current_region]
        assert np.allclose(s.ps.probs, 1 / 3)

    def test_single_region_grid(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(grid_order=1, rounds=1, **FAST))
        assert s.grid.n_regions == 1
        assert s.current_region == 0

    def test_zero_size_image(self):
        with pytest.raises(ValueError):
            create_session(np.zeros((0, 10, 3)), SessionConfig())


class TestSubmitScribbles:
    def test_six_rounds_reach_ready(self, disk_case):
        cfg = SessionConfig(**FAST)
        s = create_session(disk_case.image, cfg)
        visited = []
        for r in range(cfg.rounds):
            visited.append(s.current_region)
            submit_scribbles(s, [])
        assert len(set(visited)) == cfg.rounds
        assert s.iteration == cfg.rounds
        assert s.ready_to_finalize
        assert s.current_region is None

    def test_empty_strokes_advance(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        submit_scribbles(s, [])
        assert s.iteration == 1
        assert s.phase == Phase.AWAITING_SCRIBBLES

    def test_wrong_phase_rejected(self, disk_case):
        cfg = SessionConfig(rounds=1, **FAST)
        s = create_session(disk_case.image, cfg)
        submit_scribbles(s, [])
        with pytest.raises(PhaseError):
            submit_scribbles(s, [])

    def test_stray_stroke_sets_warning(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        rect = s.grid.rects[s.current_region]
        outside_x = 0 if rect[0] > 0 else rect[2] + 1
        stroke = ScribbleStroke(points=[(int(outside_x), 0)], radius=1, label=LabelClass.FOREGROUND)
        submit_scribbles(s, [stroke])
        assert any("strays outside" in w for w in s.warnings)

    def test_markov_updates_probabilities(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        stroke = oracle_scribbles(s.grid, s.current_region, disk_case.trimap, s.sp, seed=0)
        submit_scribbles(s, stroke)
        if stroke:
            assert not np.allclose(s.ps.probs, 1 / 3)


class TestFinalize:
    def test_finalize_produces_artifacts(self, finished):
        s, result, case = finished
        assert s.phase == Phase.FINALIZED
        assert set(np.unique(result.trimap)) <= {0, 128, 255}
        assert result.alpha.shape == case.alpha.shape
        assert result.alpha.min() >= 0.0 and result.alpha.max() <= 1.0

    def test_two_tone_quality(self, finished):
        s, result, case = finished
        from scribmat.labelstate import rmse

        assert rmse(result.alpha, case.alpha) < 0.1

    def test_idempotent(self, finished):
        s, result, _ = finished
        again = finalize(s)
        assert again is result

    def test_hard_labels_survive_into_trimap(self, finished):
        s, result, _ = finished
        from scribmat.labelstate import TRIMAP_VALUES

        for spx, cls in s.ps.hard.items():
            mask = s.sp.labels == spx
            values = np.unique(result.trimap[mask])
            assert list(values) == [TRIMAP_VALUES[cls]]

    def test_early_finalize_gate(self, disk_case):
        cfg = SessionConfig(**FAST)
        s = create_session(disk_case.image, cfg)
        with pytest.raises(PhaseError):
            finalize(s)  # zero rounds, not even early
        strokes = oracle_scribbles(s.grid, s.current_region, disk_case.trimap, s.sp, seed=5)
        submit_scribbles(s, strokes)
        with pytest.raises(PhaseError):
            finalize(s, early=False)
        result = finalize(s, early=True)
        assert result.alpha is not None

    def test_no_cnn_completes(self, disk_case):
        cfg = SessionConfig(no_cnn=True, **FAST)
        rec = run_auto_session(disk_case.image, disk_case.trimap, cfg, gt_alpha=disk_case.alpha)
        assert rec["cnn_skipped"] == "disabled by configuration"
        assert "rmse" in rec


class TestOracle:
    def test_pure_foreground_region_single_stroke(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        gt = np.full_like(disk_case.trimap, 255)
        for region in range(16):
            strokes = oracle_scribbles(s.grid, region, gt, s.sp, seed=3)
            if strokes:
                assert len(strokes) == 1
                assert strokes[0].label == LabelClass.FOREGROUND

    def test_mixed_region_gets_both_classes(self, disk_case):
        cfg = SessionConfig(seed=1, superpixel_target=suite_superpixel_target(128))
        s = create_session(disk_case.image, cfg)
        purities = {}
        for region in range(16):
            strokes = oracle_scribbles(s.grid, region, disk_case.trimap, s.sp, seed=3, iteration=0)
            purities[region] = {st.label for st in strokes}
        assert any(
            {LabelClass.FOREGROUND, LabelClass.BACKGROUND} <= classes
            for classes in purities.values()
        )

    def test_deterministic_given_seed(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        a = oracle_scribbles(s.grid, s.current_region, disk_case.trimap, s.sp, seed=42)
        b = oracle_scribbles(s.grid, s.current_region, disk_case.trimap, s.sp, seed=42)
        assert [(st.label, st.points) for st in a] == [(st.label, st.points) for st in b]

    def test_no_pure_superpixels_empty(self, disk_case):
        s = create_session(disk_case.image, SessionConfig(**FAST))
        gt = np.full_like(disk_case.trimap, 128)
        gt[::2, :] = 255  # every superpixel half unknown, half foreground
        strokes = oracle_scribbles(s.grid, 0, gt, s.sp, seed=1)
        assert strokes == []


class TestDeterminism:
    def test_identical_runs_bit_identical(self, disk_case):
        cfg = SessionConfig(**FAST)
        a = run_auto_session(disk_case.image, disk_case.trimap, cfg, gt_alpha=disk_case.alpha)
        b = run_auto_session(disk_case.image, disk_case.trimap, cfg, gt_alpha=disk_case.alpha)
        assert a["rmse"] == b["rmse"]
        assert np.array_equal(a["trimap"], b["trimap"])
        assert np.array_equal(a["alpha"], b["alpha"])


class TestOneShot:
    def test_runs_and_reports(self, disk_case):
        cfg = SessionConfig(**FAST)
        rec = run_one_shot(disk_case.image, disk_case.trimap, cfg, gt_alpha=disk_case.alpha)
        assert "rmse" in rec and rec["coverage"] > 0


class TestEvaluate:
    def test_empty_cases_rejected(self):
        with pytest.raises(ValueError):
            evaluate([], sweep="default")

    def test_default_sweep_report_shape(self, disk_case):
        from scribmat.synthetic import SyntheticCase

        cases = [SyntheticCase("d", disk_case.image, disk_case.alpha, disk_case.trimap)]
        cfg = SessionConfig(**FAST)
        report = evaluate(cases, base_cfg=cfg, sweep="default")
        assert report["cases"] == 1
        row = report["rows"][0]
        assert row["config"] == "full"
        assert 0.0 <= row["median_rmse"] <= 1.0

    def test_deterministic_reports(self, disk_case):
        from scribmat.synthetic import SyntheticCase

        cases = [SyntheticCase("d", disk_case.image, disk_case.alpha, disk_case.trimap)]
        cfg = SessionConfig(**FAST)
        r1 = evaluate(cases, base_cfg=cfg, sweep="default")
        r2 = evaluate(cases, base_cfg=cfg, sweep="default")
        assert r1 == r2

    def test_unknown_sweep(self, disk_case):
        from scribmat.synthetic import SyntheticCase

        cases = [SyntheticCase("d", disk_case.image, disk_case.alpha, disk_case.trimap)]
        with pytest.raises(ValueError, match="unknown sweep"):
            evaluate(cases, sweep="everything")
