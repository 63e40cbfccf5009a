import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from scribmat.cli import main
from scribmat.synthetic import make_case, write_case


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cases")
    write_case(make_case("disk", seed=3), root)
    write_case(make_case("blob", seed=4), root)
    return root


@pytest.fixture()
def runner():
    return CliRunner()


class TestGenSynthetic:
    def test_writes_case_directories(self, runner, tmp_path):
        result = runner.invoke(main, ["gen-synthetic", "--out", str(tmp_path), "--count", "3", "--seed", "5"])
        assert result.exit_code == 0, result.output
        dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
        assert len(dirs) == 3
        for d in dirs:
            assert (d / "image.png").exists()
            assert (d / "alpha.png").exists()
            assert (d / "trimap.png").exists()


class TestAuto:
    def test_prints_rmse_and_coverage(self, runner, case_dir, tmp_path):
        case = next(p for p in case_dir.iterdir() if p.is_dir())
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"superpixel_target": 256, "seed": 1}))
        out = tmp_path / "artifacts"
        result = runner.invoke(
            main,
            [
                "auto",
                "--image", str(case / "image.png"),
                "--gt-trimap", str(case / "trimap.png"),
                "--gt-alpha", str(case / "alpha.png"),
                "--config", str(cfg),
                "--out", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert result.output.startswith("rmse=0.")
        assert "coverage=" in result.output and result.output.rstrip().endswith("%")
        assert (out / "trimap.png").exists()
        assert (out / "alpha.png").exists()
        assert (out / "strokes.json").exists()

    def test_missing_image_fails_cleanly(self, runner, case_dir):
        case = next(p for p in case_dir.iterdir() if p.is_dir())
        result = runner.invoke(
            main,
            ["auto", "--image", "/nope.png", "--gt-trimap", str(case / "trimap.png")],
        )
        assert result.exit_code == 2  # click validates the path


class TestEval:
    def test_default_sweep_on_suite_dir(self, runner, case_dir, tmp_path):
        out = tmp_path / "report"
        result = runner.invoke(
            main,
            ["eval", "--suite", str(case_dir), "--sweep", "default", "--seed", "1", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert "full" in result.output
        report = json.loads((out / "report.json").read_text())
        assert report["cases"] == 2
        assert (out / "report.csv").read_text().startswith("config,")

    def test_requires_exactly_one_source(self, runner, case_dir):
        result = runner.invoke(main, ["eval", "--sweep", "default"])
        assert result.exit_code == 2
        result = runner.invoke(
            main, ["eval", "--suite", str(case_dir), "--synthetic", "3"]
        )
        assert result.exit_code == 2

    def test_unknown_flag_usage_error(self, runner):
        result = runner.invoke(main, ["eval", "--nonsense"])
        assert result.exit_code == 2


class TestInfoTable:
    def test_dumps_scores(self, runner, case_dir, tmp_path):
        case = next(p for p in case_dir.iterdir() if p.is_dir())
        result = runner.invoke(main, ["info-table", "--image", str(case / "image.png")])
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0].split("\t") == ["region", "similarity", "diversity", "entropy", "edge", "info"]
        assert len(lines) == 17
