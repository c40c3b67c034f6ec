"""End-to-end orchestration: train the filter classifier, generate candidates,
select, merge, and emit the extended dataset with a full audit trail.

Every stage persists its artifact in the output directory, so an interrupted
run can resume from intermediates and a finished run can be replayed stage by
stage with identical results.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .classifier import PatchClassifier
from .data import (
    DatasetManifest,
    ImageRecord,
    ManifestWriter,
    PROVENANCE_SYNTHETIC,
    merge_datasets,
    read_manifest,
    save_image,
    write_manifest,
)
from .errors import ConfigError, StageError
from .generation import (
    DiffusionServiceClient,
    GenerationConfig,
    GeneratorBackend,
    ProceduralShapesBackend,
    generate_candidate,
    prompt_from_labels,
)
from .detection import select_detector
from .harness import (
    CandidateTruth,
    manifest_arrays,
    read_truth,
    selection_metrics,
    subset_accuracy,
    write_truth,
)
from .selection import SelectionConfig, select_batch, write_audit
from .shapes import derive_seed, read_scenes, scenes_path_for

CHECKPOINT_NAME = "checkpoint.npz"
CANDIDATES_NAME = "candidates.jsonl"
AUG_NAME = "aug.jsonl"
FINAL_NAME = "final.jsonl"
AUDIT_NAME = "audit.jsonl"
TRUTH_NAME = "candidate_truth.jsonl"
GENLOG_NAME = "generation_log.jsonl"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
INCOMPLETE_MARKER = "INCOMPLETE"


@dataclass
class TrainSettings:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-3
    image_size: int = 384
    patch_size: int = 16
    embed_dim: int = 64
    encoder: str = "linear"
    encoder_path: Optional[str] = None
    encoder_trainable: bool = True
    attention_blocks: int = 2
    attention_heads: int = 4


@dataclass
class GenerationSettings:
    backend: str = "procedural"  # "procedural" | "service"
    noise_rate: float = 0.0
    steps: int = 20
    passes: int = 1
    parallelism: int = 4
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.backend not in ("procedural", "service"):
            raise ConfigError(f"unknown generation backend '{self.backend}'")
        if self.passes < 1:
            raise ConfigError("passes must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


@dataclass
class PipelineConfig:
    origin_manifest: Path
    output_dir: Path
    train: TrainSettings = field(default_factory=TrainSettings)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    seed: int = 0
    resume: bool = False

    def __post_init__(self):
        self.origin_manifest = Path(self.origin_manifest)
        self.output_dir = Path(self.output_dir)
        if not self.origin_manifest.exists():
            raise ConfigError(f"origin manifest not found: {self.origin_manifest}")

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        try:
            kwargs = dict(obj)
            if "train" in kwargs:
                kwargs["train"] = TrainSettings(**kwargs["train"])
            if "selection" in kwargs:
                kwargs["selection"] = SelectionConfig(**kwargs["selection"])
            if "generation" in kwargs:
                kwargs["generation"] = GenerationSettings(**kwargs["generation"])
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad pipeline config: {e}") from e

    @classmethod
    def from_file(cls, path: Path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(obj)


def _classifier_from_settings(t: TrainSettings, seed: int) -> PatchClassifier:
    return PatchClassifier(
        image_size=t.image_size,
        patch_size=t.patch_size,
        embed_dim=t.embed_dim,
        encoder=t.encoder,
        encoder_path=t.encoder_path,
        attention_blocks=t.attention_blocks,
        attention_heads=t.attention_heads,
        epochs=t.epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        encoder_trainable=t.encoder_trainable,
        random_state=seed,
    )


def _make_backend(cfg: PipelineConfig) -> GeneratorBackend:
    gen = cfg.generation
    if gen.backend == "procedural":
        scenes_file = scenes_path_for(cfg.origin_manifest)
        if not scenes_file.exists():
            raise ConfigError(
                f"procedural backend needs the corpus scene sidecar, missing: {scenes_file}"
            )
        return ProceduralShapesBackend(read_scenes(scenes_file), noise_rate=gen.noise_rate)
    return DiffusionServiceClient(endpoint=gen.endpoint)


# --- stages -------------------------------------------------------------------


def train_stage(cfg: PipelineConfig, origin: DatasetManifest) -> PatchClassifier:
    checkpoint = cfg.output_dir / CHECKPOINT_NAME
    if cfg.resume and checkpoint.exists():
        return PatchClassifier.load(checkpoint)
    if len(origin) == 0:
        raise StageError("train", "origin manifest is empty")
    images, labels, ids = manifest_arrays(origin)
    model = _classifier_from_settings(cfg.train, cfg.seed)
    model.fit(images, labels, categories=list(origin.category_set.names), record_ids=ids)
    model.save(checkpoint)
    return model


def generate_stage(cfg: PipelineConfig, origin: DatasetManifest) -> DatasetManifest:
    candidates_path = cfg.output_dir / CANDIDATES_NAME
    if cfg.resume and candidates_path.exists():
        return read_manifest(candidates_path)

    backend = _make_backend(cfg)
    gen = cfg.generation
    images_dir = cfg.output_dir / "candidates"

    jobs = []
    for record in origin:
        for pass_idx in range(gen.passes):
            candidate_id = f"{record.id}-aug-p{pass_idx}"
            seed = derive_seed(cfg.seed, record.id, pass_idx)
            jobs.append((record, candidate_id, seed))

    def run_job(job) -> tuple[ImageRecord, dict]:
        record, candidate_id, seed = job
        source = record.load()
        candidate = generate_candidate(
            source,
            backend,
            GenerationConfig(steps=gen.steps, seed=seed, candidate_id=candidate_id),
        )
        path = images_dir / f"{candidate_id}.png"
        save_image(candidate.pixels, path)
        log_entry = {
            "candidate_id": candidate_id,
            "source_id": record.id,
            "prompt": prompt_from_labels(record.labels).text,
            "control_kind": select_detector(record.labels),
            "steps": gen.steps,
            "seed": seed,
            "backend": backend.name,
        }
        out = ImageRecord(
            id=candidate_id,
            path=path,
            labels=record.labels,
            provenance=PROVENANCE_SYNTHETIC,
            source_id=record.id,
            seed=seed,
        )
        return out, log_entry

    with ThreadPoolExecutor(max_workers=gen.parallelism) as pool:
        results = list(pool.map(run_job, jobs))

    records = []
    with ManifestWriter(candidates_path, origin.category_set, "candidates") as writer, open(
        cfg.output_dir / GENLOG_NAME, "w"
    ) as logfh:
        for record, log_entry in results:
            writer.append(record)
            records.append(record)
            logfh.write(json.dumps(log_entry) + "\n")

    if getattr(backend, "records_truth", False):
        truth = [
            CandidateTruth(
                candidate_id=r.id,
                rendered_classes=backend.rendered_classes(r.source_id, r.seed),
                source_labels=frozenset(r.labels.members),
            )
            for r in records
        ]
        write_truth(truth, cfg.output_dir / TRUTH_NAME)

    return DatasetManifest(
        category_set=origin.category_set, records=records, split_tag="candidates"
    )


def select_stage(
    cfg: PipelineConfig,
    candidates: DatasetManifest,
    origin: DatasetManifest,
    model: PatchClassifier,
) -> tuple[DatasetManifest, list]:
    selected, audit = select_batch(candidates, origin, model, cfg.selection)
    write_audit(audit, cfg.output_dir / AUDIT_NAME, origin.category_set.names)
    write_manifest(selected, cfg.output_dir / AUG_NAME)
    return selected, audit


def merge_stage(cfg: PipelineConfig, origin: DatasetManifest, selected: DatasetManifest) -> DatasetManifest:
    final = merge_datasets(origin, selected)
    write_manifest(final, cfg.output_dir / FINAL_NAME)
    return final


def _build_report(cfg, origin, candidates, audit, final) -> dict:
    accepted = sum(1 for d in audit if d.accepted)
    reasons: dict[str, int] = {}
    for d in audit:
        reasons[d.reason] = reasons.get(d.reason, 0) + 1
    candidates_by_id = candidates.by_id()
    per_class = {}
    for name in origin.category_set:
        eligible = [
            d for d in audit if name in candidates_by_id[d.candidate_id].labels
        ]
        class_accepted = [d for d in eligible if d.accepted and name in d.predicted]
        per_class[name] = {
            "candidates": len(eligible),
            "accepted": len(class_accepted),
            "rate": len(class_accepted) / len(eligible) if eligible else None,
        }
    return {
        "seed": cfg.seed,
        "epsilon": cfg.selection.epsilon,
        "reject_empty": cfg.selection.reject_empty,
        "passes": cfg.generation.passes,
        "origin_count": len(origin),
        "candidate_count": len(candidates),
        "accepted_count": accepted,
        "rejected_count": len(audit) - accepted,
        "acceptance_rate": accepted / len(audit) if audit else None,
        "final_count": len(final),
        "reject_reasons": reasons,
        "per_class": per_class,
    }


def _report_text(report: dict) -> str:
    lines = [
        "pipeline report",
        "===============",
        f"origin images      {report['origin_count']}",
        f"candidates         {report['candidate_count']}",
        f"accepted           {report['accepted_count']}",
        f"rejected           {report['rejected_count']}",
        f"acceptance rate    {report['acceptance_rate']:.4f}" if report["acceptance_rate"] is not None else "acceptance rate    n/a",
        f"final dataset      {report['final_count']}",
        "",
        "per-class acceptance",
        f"{'class':<12}{'candidates':>12}{'accepted':>10}{'rate':>8}",
    ]
    for name, row in report["per_class"].items():
        rate = f"{row['rate']:.3f}" if row["rate"] is not None else "n/a"
        lines.append(f"{name:<12}{row['candidates']:>12}{row['accepted']:>10}{rate:>8}")
    return "\n".join(lines) + "\n"


def run_pipeline(cfg: PipelineConfig) -> tuple[DatasetManifest, dict]:
    """Train, generate, select, merge; returns the final manifest and report."""
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    marker = cfg.output_dir / INCOMPLETE_MARKER
    stage = "setup"
    try:
        marker.write_text("pipeline in progress\n")
        origin = read_manifest(cfg.origin_manifest)

        stage = "train"
        model = train_stage(cfg, origin)

        stage = "generate"
        candidates = generate_stage(cfg, origin)

        stage = "select"
        selected, audit = select_stage(cfg, candidates, origin, model)

        stage = "merge"
        final = merge_stage(cfg, origin, selected)

        stage = "report"
        report = _build_report(cfg, origin, candidates, audit, final)
        (cfg.output_dir / REPORT_JSON).write_text(json.dumps(report, indent=2) + "\n")
        (cfg.output_dir / REPORT_TEXT).write_text(_report_text(report))
    except ConfigError:
        raise
    except StageError:
        marker.write_text(f"failed during stage: {stage}\n")
        raise
    except Exception as e:
        marker.write_text(f"failed during stage: {stage}\n")
        raise StageError(stage, str(e)) from e
    marker.unlink(missing_ok=True)
    return final, report


# --- ablation -------------------------------------------------------------------

MODE_BASELINE = "baseline"
MODE_NO_SELECTION = "augment_no_selection"
MODE_WITH_SELECTION = "augment_with_selection"
ALL_MODES = (MODE_BASELINE, MODE_NO_SELECTION, MODE_WITH_SELECTION)


def ablate(
    cfg: PipelineConfig,
    eval_manifest_path: Path,
    modes: tuple[str, ...] = ALL_MODES,
) -> dict:
    """Train a fresh downstream model per mode and compare held-out accuracy.

    Modes: origin only; origin plus every candidate under its source labels;
    origin plus the selected candidates under their predicted labels.
    """
    unknown = set(modes) - set(ALL_MODES)
    if unknown:
        raise ConfigError(f"unknown ablation modes: {sorted(unknown)}")
    eval_manifest = read_manifest(Path(eval_manifest_path))

    final, report = run_pipeline(cfg)
    origin = read_manifest(cfg.origin_manifest)
    candidates = read_manifest(cfg.output_dir / CANDIDATES_NAME)
    selected = read_manifest(cfg.output_dir / AUG_NAME)

    datasets = {
        MODE_BASELINE: origin,
        MODE_NO_SELECTION: merge_datasets(origin, candidates),
        MODE_WITH_SELECTION: merge_datasets(origin, selected),
    }

    # one shared downstream seed: accuracy differences then reflect the data,
    # not initialization luck
    downstream_seed = derive_seed(cfg.seed, "downstream")
    accuracies: dict[str, float] = {}
    for mode in modes:
        train_set = datasets[mode]
        images, labels, ids = manifest_arrays(train_set)
        downstream = _classifier_from_settings(cfg.train, downstream_seed)
        downstream.fit(images, labels, categories=list(origin.category_set.names), record_ids=ids)
        accuracies[mode] = subset_accuracy(downstream, eval_manifest)

    result = {
        "seed": cfg.seed,
        "noise_rate": cfg.generation.noise_rate,
        "epsilon": cfg.selection.epsilon,
        "train_sizes": {mode: len(datasets[mode]) for mode in modes},
        "accuracy": accuracies,
        "pipeline": {
            "candidate_count": report["candidate_count"],
            "accepted_count": report["accepted_count"],
        },
    }
    truth_path = cfg.output_dir / TRUTH_NAME
    if truth_path.exists():
        metrics = selection_metrics(
            _audit_entries(cfg.output_dir / AUDIT_NAME), read_truth(truth_path)
        )
        result["selection"] = metrics.to_dict()
    (cfg.output_dir / "ablation.json").write_text(json.dumps(result, indent=2) + "\n")
    (cfg.output_dir / "ablation.txt").write_text(_ablation_text(result))
    return result


def _audit_entries(path: Path) -> list[dict]:
    from .selection import read_audit

    return read_audit(path)


def _ablation_text(result: dict) -> str:
    lines = [
        "ablation report",
        "===============",
        f"{'mode':<26}{'train size':>12}{'held-out accuracy':>20}",
    ]
    for mode, acc in result["accuracy"].items():
        lines.append(f"{mode:<26}{result['train_sizes'][mode]:>12}{acc:>20.4f}")
    return "\n".join(lines) + "\n"
