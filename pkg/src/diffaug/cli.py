"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .classifier import PatchClassifier
from .data import merge_datasets, read_manifest, write_manifest
from .errors import ConfigError, DiffaugError, StageError
from .harness import (
    epsilon_sweep,
    plot_sweep,
    read_truth,
    selection_metrics,
    manifest_arrays,
)
from .pipeline import (
    AUDIT_NAME,
    CANDIDATES_NAME,
    TRUTH_NAME,
    GenerationSettings,
    PipelineConfig,
    TrainSettings,
    ablate,
    generate_stage,
    run_pipeline,
    _classifier_from_settings,
)
from .selection import SelectionConfig, read_audit, select_batch, write_audit
from .shapes import ShapesCorpusConfig, make_corpus


@click.group()
def cli():
    """Data augmentation for weakly-labeled image datasets."""


def _train_settings(**kw) -> TrainSettings:
    return TrainSettings(**{k: v for k, v in kw.items() if v is not None})


@cli.command("make-corpus")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--images", type=int, default=200, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--max-objects", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="train", show_default=True)
def make_corpus_cmd(out, images, image_size, max_objects, seed, split):
    """Render a deterministic multi-label shapes corpus."""
    cfg = ShapesCorpusConfig(
        images=images,
        image_size=(image_size, image_size),
        max_objects_per_image=max_objects,
        seed=seed,
    )
    manifest = make_corpus(cfg, out, split_tag=split)
    click.echo(f"wrote {len(manifest)} images to {out}")


@cli.command("train-classifier")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--epochs", type=int, default=80, show_default=True)
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--encoder", type=click.Choice(["linear", "attention", "precomputed"]), default="linear", show_default=True)
@click.option("--encoder-path", type=click.Path(path_type=Path), default=None)
@click.option("--image-size", type=int, default=384, show_default=True)
@click.option("--patch-size", type=int, default=16, show_default=True)
@click.option("--embed-dim", type=int, default=64, show_default=True)
@click.option("--learning-rate", type=float, default=1e-3, show_default=True)
@click.option("--freeze-encoder", is_flag=True, default=False)
def train_classifier_cmd(data, out, epochs, batch_size, seed, encoder, encoder_path,
                         image_size, patch_size, embed_dim, learning_rate, freeze_encoder):
    """Train the patch-driven multi-label classifier on a manifest."""
    manifest = read_manifest(data)
    images, labels, ids = manifest_arrays(manifest)
    model = PatchClassifier(
        image_size=image_size,
        patch_size=patch_size,
        embed_dim=embed_dim,
        encoder=encoder,
        encoder_path=str(encoder_path) if encoder_path else None,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        encoder_trainable=not freeze_encoder,
        random_state=seed,
    )
    model.fit(images, labels, categories=list(manifest.category_set.names), record_ids=ids)
    model.save(out)
    click.echo(f"final training loss {model.loss_trace_[-1]:.6f}; checkpoint at {out}")


@cli.command("generate")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--backend", type=click.Choice(["procedural", "service"]), default="procedural", show_default=True)
@click.option("--noise-rate", type=float, default=0.0, show_default=True)
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--passes", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--parallelism", type=int, default=4, show_default=True)
@click.option("--endpoint", default=None, help="generation service URL (or set DIFFAUG_ENDPOINT)")
def generate_cmd(data, out, backend, noise_rate, steps, passes, seed, parallelism, endpoint):
    """Generate candidate images for every record of a manifest."""
    cfg = PipelineConfig(
        origin_manifest=data,
        output_dir=out,
        generation=GenerationSettings(
            backend=backend,
            noise_rate=noise_rate,
            steps=steps,
            passes=passes,
            parallelism=parallelism,
            endpoint=endpoint,
        ),
        seed=seed,
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    origin = read_manifest(cfg.origin_manifest)
    candidates = generate_stage(cfg, origin)
    click.echo(f"generated {len(candidates)} candidates into {out}")


@cli.command("select")
@click.option("--candidates", "candidates_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--origin", "origin_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--epsilon", type=float, default=0.9, show_default=True)
@click.option("--accept-empty", is_flag=True, default=False,
              help="admit candidates whose predicted label set is empty")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def select_cmd(candidates_path, origin_path, model_path, epsilon, accept_empty, out):
    """Filter candidates with a trained classifier and the subset rule."""
    candidates = read_manifest(candidates_path)
    origin = read_manifest(origin_path)
    model = PatchClassifier.load(model_path)
    cfg = SelectionConfig(epsilon=epsilon, reject_empty=not accept_empty)
    selected, audit = select_batch(candidates, origin, model, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_audit(audit, out / AUDIT_NAME, origin.category_set.names)
    write_manifest(selected, out / "aug.jsonl")
    click.echo(f"accepted {len(selected)} of {len(candidates)} candidates")


@cli.command("merge")
@click.option("--origin", "origin_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--aug", "aug_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def merge_cmd(origin_path, aug_path, out):
    """Concatenate an origin manifest and an augmentation manifest."""
    origin = read_manifest(origin_path)
    aug = read_manifest(aug_path)
    final = merge_datasets(origin, aug)
    write_manifest(final, out)
    click.echo(f"wrote {len(final)} records to {out}")


def _pipeline_config(config, data, out, **overrides) -> PipelineConfig:
    if config is not None:
        cfg = PipelineConfig.from_file(config)
    else:
        if data is None or out is None:
            raise ConfigError("either --config or both --data and --out are required")
        cfg = PipelineConfig(origin_manifest=data, output_dir=out)
    if data is not None:
        cfg.origin_manifest = Path(data)
    if out is not None:
        cfg.output_dir = Path(out)
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "epsilon":
            cfg.selection = SelectionConfig(epsilon=value, reject_empty=cfg.selection.reject_empty)
        elif key == "noise_rate":
            cfg.generation.noise_rate = value
        elif key == "passes":
            cfg.generation.passes = value
        elif key == "epochs":
            cfg.train.epochs = value
        elif key == "seed":
            cfg.seed = value
        elif key == "resume":
            cfg.resume = value
    return cfg


@cli.command("run")
@click.option("--config", type=click.Path(exists=True, path_type=Path), default=None,
              help="declarative JSON pipeline config")
@click.option("--data", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--noise-rate", type=float, default=None)
@click.option("--passes", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, default=False)
def run_cmd(config, data, out, epsilon, noise_rate, passes, epochs, seed, resume):
    """Run the full pipeline: train, generate, select, merge."""
    cfg = _pipeline_config(config, data, out, epsilon=epsilon, noise_rate=noise_rate,
                           passes=passes, epochs=epochs, seed=seed, resume=resume or None)
    final, report = run_pipeline(cfg)
    click.echo((cfg.output_dir / "report.txt").read_text().rstrip())


@cli.command("ablate")
@click.option("--config", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--data", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--eval-data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--noise-rate", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--seed", type=int, default=None)
def ablate_cmd(config, data, eval_data, out, noise_rate, epochs, epsilon, seed):
    """Compare baseline, unfiltered augmentation, and filtered augmentation."""
    cfg = _pipeline_config(config, data, out, epsilon=epsilon, noise_rate=noise_rate,
                           epochs=epochs, seed=seed)
    result = ablate(cfg, eval_data)
    click.echo((cfg.output_dir / "ablation.txt").read_text().rstrip())


@cli.command("eval")
@click.option("--outdir", type=click.Path(exists=True, path_type=Path), required=True,
              help="output directory of a finished pipeline run")
def eval_cmd(outdir):
    """Selection precision/recall of a finished run against generator ground truth."""
    audit_path = outdir / AUDIT_NAME
    truth_path = outdir / TRUTH_NAME
    if not audit_path.exists():
        raise ConfigError(f"no audit log at {audit_path}")
    if not truth_path.exists():
        raise ConfigError(
            f"no ground truth at {truth_path} (only the procedural backend records truth)"
        )
    metrics = selection_metrics(read_audit(audit_path), read_truth(truth_path))
    click.echo(json.dumps(metrics.to_dict(), indent=2))


@cli.command("sweep")
@click.option("--outdir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--origin", "origin_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--grid", default="0.5,0.6,0.7,0.8,0.9", show_default=True,
              help="comma-separated thresholds")
@click.option("--eval-data", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--patch-size", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--plot", type=click.Path(path_type=Path), default=None)
@click.option("--accept-empty", is_flag=True, default=False)
def sweep_cmd(outdir, origin_path, grid, eval_data, epochs, image_size, patch_size, seed,
              plot, accept_empty):
    """Replay selection over a threshold grid using cached scores."""
    try:
        grid_values = [float(v) for v in grid.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid '{grid}': {e}") from e
    audit = read_audit(outdir / AUDIT_NAME)
    candidates = read_manifest(outdir / CANDIDATES_NAME)
    origin = read_manifest(origin_path)
    truth_path = outdir / TRUTH_NAME
    truth = read_truth(truth_path) if truth_path.exists() else None

    downstream_factory = None
    eval_manifest = None
    if eval_data is not None:
        eval_manifest = read_manifest(eval_data)
        settings = TrainSettings(
            epochs=epochs, image_size=image_size, patch_size=patch_size
        )
        downstream_factory = lambda: _classifier_from_settings(settings, seed)

    rows = epsilon_sweep(
        audit,
        candidates,
        origin,
        grid_values,
        truth=truth,
        downstream_factory=downstream_factory,
        eval_manifest=eval_manifest,
        reject_empty=not accept_empty,
    )
    (outdir / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    if plot is not None:
        plot_sweep(rows, plot)
    click.echo(json.dumps(rows, indent=2))


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(1)
    except StageError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except DiffaugError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
