"""Command-line interface: train, generate, detect, edit, ablate, serve.

Every report-producing verb writes CSV metrics plus rendered figures into
the session's ``report/`` directory (or an explicit --report-dir).
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .config import AppConfig, load_config
from .geometry import Shift
from .guidance import PRESERVE_FEATURES, GuidanceWeights
from .scene import BlobDetector, InstanceSelection, parse_prompt


def _engine(config: AppConfig):
    from .service import PipelineEngine

    return PipelineEngine(config)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, path_type=Path),
    default=None,
    help="JSON config file; INSTEDIT_* environment variables override it.",
)
@click.pass_context
def main(ctx, config_path):
    ctx.obj = load_config(config_path)


@main.command()
@click.option("--corpus-dir", type=click.Path(path_type=Path), default=None)
@click.option("--checkpoint-out", type=click.Path(path_type=Path), default=None)
@click.option("--steps", default=None, type=int, help="Training steps.")
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--seed", default=0, type=int)
@click.pass_obj
def train(cfg: AppConfig, corpus_dir, checkpoint_out, steps, batch_size, lr, seed):
    """Build the synthetic corpus (if missing) and train the denoiser."""
    from . import presets
    from .report import save_loss_curve

    corpus_dir = corpus_dir or cfg.corpus_dir
    checkpoint_out = checkpoint_out or cfg.checkpoint
    losses = presets.train_desk_model(
        checkpoint_out,
        corpus_dir,
        steps=steps or presets.DEFAULT_TRAIN_STEPS,
        batch_size=batch_size or presets.DEFAULT_BATCH_SIZE,
        lr=lr or presets.DEFAULT_LR,
        seed=seed,
    )
    figure = save_loss_curve(losses, checkpoint_out.parent / "loss_curve.png")
    click.echo(f"checkpoint: {checkpoint_out}")
    click.echo(f"final smoothed loss: {sum(losses[-50:]) / min(50, len(losses)):.4f}")
    click.echo(f"loss curve: {figure}")


@main.command()
@click.option("--prompt", required=True)
@click.option("--seed", default=0, type=int)
@click.option("--steps", default=None, type=int, help="Sampling steps.")
@click.option("--report-dir", type=click.Path(path_type=Path), default=None)
@click.pass_obj
def generate(cfg: AppConfig, prompt, seed, steps, report_dir):
    """Create a session: sample, parse the prompt, detect the objects."""
    from .report import save_detection_figure, write_csv
    from .service import SessionSettings

    engine = _engine(cfg)
    settings = None
    if steps is not None:
        base = SessionSettings.from_config(cfg)
        settings = SessionSettings(
            steps=steps,
            weights=base.weights,
            position_layers=base.position_layers,
            preserve_layers=base.preserve_layers,
            window_fraction=base.window_fraction,
        )
    session = engine.create_session(prompt, seed, settings)
    report = Path(report_dir) if report_dir else session.directory / "report"
    rows = [
        {
            "label": d.descriptor.label,
            "attributes": " ".join(d.descriptor.attributes),
            "instance_id": d.instance_id,
            "x1": d.box.x1,
            "y1": d.box.y1,
            "x2": d.box.x2,
            "y2": d.box.y2,
            "confidence": d.confidence,
        }
        for d in session.detections
    ]
    csv_path = write_csv(report / "detections.csv", rows)
    fig_path = save_detection_figure(
        session.original_image(), session.detections, report / "detections.png"
    )
    click.echo(f"session: {session.session_id}")
    click.echo(f"detections: {len(session.detections)} -> {csv_path}")
    click.echo(f"figure: {fig_path}")


@main.command()
@click.option("--image", "image_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--prompt", required=True, help="Caption naming the objects to look for.")
@click.option("--report-dir", type=click.Path(path_type=Path), default="report")
@click.pass_obj
def detect(cfg: AppConfig, image_path, prompt, report_dir):
    """Run the detector on an image file against a prompt's object list."""
    from .data import load_png
    from .report import save_detection_figure, write_csv

    image = load_png(image_path)
    descriptors = parse_prompt(prompt)
    detections = BlobDetector().detect(image, descriptors)
    report = Path(report_dir)
    rows = [
        {
            "label": d.descriptor.label,
            "attributes": " ".join(d.descriptor.attributes),
            "instance_id": d.instance_id,
            "x1": d.box.x1,
            "y1": d.box.y1,
            "x2": d.box.x2,
            "y2": d.box.y2,
            "confidence": d.confidence,
        }
        for d in detections
    ]
    csv_path = write_csv(report / "detections.csv", rows)
    fig_path = save_detection_figure(image, detections, report / "detections.png")
    click.echo(f"detections: {len(detections)} -> {csv_path}")
    click.echo(f"figure: {fig_path}")


def _selection_options(fn):
    fn = click.option("--session", "session_id", required=True)(fn)
    fn = click.option("--label", required=True)(fn)
    fn = click.option("--attribute", "attributes", multiple=True)(fn)
    fn = click.option("--id", "instance_id", default=None, type=int)(fn)
    fn = click.option("--dx", required=True, type=float)(fn)
    fn = click.option("--dy", required=True, type=float)(fn)
    fn = click.option("--w0", default=None, type=float)(fn)
    fn = click.option("--w1", default=None, type=float)(fn)
    fn = click.option("--cfg-scale", "s", default=None, type=float)(fn)
    fn = click.option("--v", default=None, type=float)(fn)
    return fn


def _weights_from_options(base: GuidanceWeights, w0, w1, s, v) -> GuidanceWeights:
    return GuidanceWeights(
        w0=base.w0 if w0 is None else w0,
        w1=base.w1 if w1 is None else w1,
        s=base.s if s is None else s,
        v=base.v if v is None else v,
    )


@main.command()
@_selection_options
@click.option("--mode", default=PRESERVE_FEATURES, type=click.Choice(["features", "attention"]))
@click.pass_obj
def edit(cfg: AppConfig, session_id, label, attributes, instance_id, dx, dy, w0, w1, s, v, mode):
    """Reposition one detected instance by a normalized (dx, dy) shift."""
    from .data import load_png
    from .report import save_edit_figure, write_csv
    from .scene import match_instances

    engine = _engine(cfg)
    session = engine.get_session(session_id)
    selection = InstanceSelection(label, tuple(attributes), instance_id)
    weights = _weights_from_options(session.settings.weights, w0, w1, s, v)
    record = engine.apply_edit(session_id, selection, Shift(dx, dy), weights, mode=mode)
    click.echo(f"edit {record.index}: {record.status}")
    if record.status == "failed":
        click.echo(json.dumps(record.error, indent=2))
        raise SystemExit(1)

    report = session.directory / "report"
    edited = match_instances(session.detections, selection)
    result = load_png(session.directory / "edits" / f"{record.index:03d}" / "result.png")
    fig_path = save_edit_figure(
        session.original_image(),
        result,
        edited.box,
        Shift(dx, dy),
        record.metrics,
        report / f"edit_{record.index:03d}.png",
    )
    rows = [
        {
            "edit": record.index,
            "status": record.status,
            "displacement_achieved": record.metrics["displacement_achieved"],
            "preservation_mse": record.metrics["preservation_mse"],
            "wall_time": record.wall_time,
        }
    ]
    csv_path = write_csv(report / f"edit_{record.index:03d}.csv", rows)
    click.echo(f"displacement error: {record.metrics['displacement_achieved']}")
    click.echo(f"figure: {fig_path}")
    click.echo(f"metrics: {csv_path}")


@main.command()
@_selection_options
@click.pass_obj
def ablate(cfg: AppConfig, session_id, label, attributes, instance_id, dx, dy, w0, w1, s, v):
    """Run the same edit with both preservation terms and compare."""
    from .data import load_png
    from .report import save_ablation_figure, write_csv

    engine = _engine(cfg)
    session = engine.get_session(session_id)
    selection = InstanceSelection(label, tuple(attributes), instance_id)
    weights = _weights_from_options(session.settings.weights, w0, w1, s, v)
    outcome = engine.ablation_run(session_id, selection, Shift(dx, dy), weights)
    report = session.directory / "report"

    def _edit_image(rec: dict):
        if rec["status"] != "completed":
            return None
        return load_png(session.directory / "edits" / f"{rec['index']:03d}" / "result.png")

    feat_rec, attn_rec = outcome["records"]
    fig_path = save_ablation_figure(
        session.original_image(),
        _edit_image(feat_rec),
        _edit_image(attn_rec),
        outcome["comparison"],
        report / f"ablation_{feat_rec['index']:03d}.png",
    )
    rows = [
        {"mode": "features", "index": feat_rec["index"], **(feat_rec["metrics"] or {})},
        {"mode": "attention", "index": attn_rec["index"], **(attn_rec["metrics"] or {})},
    ]
    for row in rows:
        row.pop("redetections", None)
        row.pop("nonedited_moves", None)
        row.pop("target_center", None)
    csv_path = write_csv(report / f"ablation_{feat_rec['index']:03d}.csv", rows)
    click.echo(json.dumps(outcome["comparison"], indent=2))
    click.echo(f"figure: {fig_path}")
    click.echo(f"metrics: {csv_path}")


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.pass_obj
def serve(cfg: AppConfig, host, port):
    """Serve the HTTP API for the browser UI."""
    import uvicorn

    from .api import create_app

    app = create_app(_engine(cfg))
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
