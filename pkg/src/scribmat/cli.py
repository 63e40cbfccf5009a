"""Command-line entry points: unattended runs, evaluation sweeps,
synthetic-suite generation and serving the HTTP API."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import labelstate, session as sessmod, synthetic
from .imagegraph import load_image


def _load_config(path, **overrides):
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text())
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return sessmod.SessionConfig.from_dict(doc)


def _load_gray(path):
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


@click.group()
def main():
    """Guided-scribble interactive image matting."""


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--gt-trimap", required=True, type=click.Path(exists=True), help="Ground-truth trimap driving the oracle scribbler.")
@click.option("--gt-alpha", type=click.Path(exists=True), help="Ground-truth alpha for RMSE reporting.")
@click.option("--config", "config_path", type=click.Path(exists=True), help="JSON session config.")
@click.option("--out", "out_dir", type=click.Path(), help="Directory for trimap/alpha/stroke artifacts.")
@click.option("--seed", type=int, default=None)
def auto(image_path, gt_trimap, gt_alpha, config_path, out_dir, seed):
    """Oracle-driven full session on one image; prints rmse and coverage."""
    try:
        cfg = _load_config(config_path, seed=seed)
        image = load_image(image_path)
        trimap = _load_gray(gt_trimap)
        alpha = _load_gray(gt_alpha) / 255.0 if gt_alpha else None
        record = sessmod.run_auto_session(image, trimap, cfg, gt_alpha=alpha)
    except Exception as exc:
        raise click.ClickException(str(exc))
    if out_dir:
        sessmod._write_artifacts(Path(out_dir), record)
    rmse = f"{record['rmse']:.6f}" if "rmse" in record else "n/a"
    click.echo(f"rmse={rmse}, coverage={record['coverage']:.4f}%")
    if record["cnn_skipped"]:
        click.echo(f"cnn propagation skipped: {record['cnn_skipped']}")


@main.command()
@click.option("--port", type=int, default=None, help="Defaults to $SCRIBMAT_PORT or 8000.")
@click.option("--host", default="127.0.0.1")
def serve(port, host):
    """Run the HTTP session service."""
    import uvicorn

    from .service import app

    port = port or int(os.environ.get("SCRIBMAT_PORT", "8000"))
    uvicorn.run(app, host=host, port=port)


@main.command("gen-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", type=int, default=20)
@click.option("--seed", type=int, default=0)
@click.option("--size", type=int, default=128)
def gen_synthetic(out_dir, count, seed, size):
    """Write a generated composite suite (image/alpha/trimap PNGs per case)."""
    for case in synthetic.generate_suite(count, seed=seed, size=size):
        path = synthetic.write_case(case, out_dir)
        click.echo(str(path))


@main.command("eval")
@click.option("--suite", "suite_dir", type=click.Path(exists=True), help="Directory of generated cases.")
@click.option("--synthetic", "synthetic_count", type=int, help="Generate this many cases on the fly.")
@click.option("--sweep", type=click.Choice(["default", "ablations", "iterations", "selection", "oneshot"]), default="default")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--selection-seeds", type=int, default=10)
@click.option("--out", "out_dir", type=click.Path(), help="Directory for per-case artifacts and the report.")
def eval_cmd(suite_dir, synthetic_count, sweep, config_path, seed, selection_seeds, out_dir):
    """Evaluate oracle-driven sessions over a case suite."""
    if bool(suite_dir) == bool(synthetic_count):
        raise click.UsageError("provide exactly one of --suite or --synthetic")
    try:
        if synthetic_count:
            cases = synthetic.generate_suite(synthetic_count, seed=seed or 0)
        else:
            cases = [synthetic.load_case(p) for p in sorted(Path(suite_dir).iterdir()) if p.is_dir()]
            if not cases:
                raise click.ClickException(f"no cases found under {suite_dir}")
        size = cases[0].image.shape[0]
        cfg = _load_config(config_path, seed=seed)
        if cfg.superpixel_target is None:
            cfg = sessmod.replace(cfg, superpixel_target=synthetic.suite_superpixel_target(size))
        report = sessmod.evaluate(
            cases,
            base_cfg=cfg,
            sweep=sweep,
            selection_seeds=selection_seeds,
            out_dir=out_dir,
            progress=lambda msg: click.echo(msg, err=True),
        )
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc))
    click.echo(f"{'config':20s} {'median_rmse':>12s} {'mean_rmse':>12s} {'median_cov%':>12s}")
    for row in report["rows"]:
        click.echo(
            f"{row['config']:20s} {row['median_rmse']:12.4f} {row['mean_rmse']:12.4f} "
            f"{row['median_coverage']:12.3f}"
        )
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sessmod.write_report(report, csv_path=out / "report.csv", json_path=out / "report.json")
        click.echo(f"report written to {out}/report.{{csv,json}}")


@main.command("info-table")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
def info_table(image_path, config_path):
    """Dump the first-round region information scores as delimited text."""
    from .infoselect import scores_table

    try:
        cfg = _load_config(config_path)
        image = load_image(image_path)
        session = sessmod.create_session(image, cfg)
    except Exception as exc:
        raise click.ClickException(str(exc))
    click.echo("region\tsimilarity\tdiversity\tentropy\tedge\tinfo")
    for row in scores_table(session.last_scores):
        click.echo("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))


if __name__ == "__main__":
    sys.exit(main())
