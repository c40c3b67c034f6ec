"""Shared fixtures: corpora, a trained desk-scale model, and ablation runs.

The expensive fixtures are session-scoped; the whole suite builds each corpus
and trains each model once.
"""

from __future__ import annotations

from pathlib import Path

import pytest

from diffaug.classifier import PatchClassifier
from diffaug.data import read_manifest
from diffaug.harness import manifest_arrays
from diffaug.pipeline import (
    GenerationSettings,
    PipelineConfig,
    TrainSettings,
    ablate,
    run_pipeline,
)
from diffaug.selection import SelectionConfig
from diffaug.shapes import ShapesCorpusConfig, make_corpus

DESK_TRAIN = dict(image_size=64, patch_size=8, embed_dim=64, encoder="linear")


@pytest.fixture(scope="session")
def corpora(tmp_path_factory) -> dict:
    """500-image training corpus and 200-image held-out corpus."""
    root = tmp_path_factory.mktemp("corpora")
    train = make_corpus(ShapesCorpusConfig(images=500, seed=11), root / "train")
    held = make_corpus(ShapesCorpusConfig(images=200, seed=999), root / "held", split_tag="val")
    return {
        "root": root,
        "train": train,
        "held": held,
        "train_path": root / "train" / "train.jsonl",
        "held_path": root / "held" / "val.jsonl",
    }


@pytest.fixture(scope="session")
def desk_model(corpora) -> PatchClassifier:
    """Classifier trained at desk scale: 500 images, 30 epochs, linear encoder."""
    images, labels, ids = manifest_arrays(corpora["train"])
    model = PatchClassifier(**DESK_TRAIN, epochs=30, batch_size=16, random_state=0)
    model.fit(images, labels, categories=list(corpora["train"].category_set.names), record_ids=ids)
    return model


@pytest.fixture(scope="session")
def small_run(tmp_path_factory) -> dict:
    """A small but complete pipeline run used by format and report tests."""
    root = tmp_path_factory.mktemp("small_run")
    make_corpus(ShapesCorpusConfig(images=60, seed=21), root / "corpus")
    cfg = PipelineConfig(
        origin_manifest=root / "corpus" / "train.jsonl",
        output_dir=root / "out",
        train=TrainSettings(epochs=20, **{k: v for k, v in DESK_TRAIN.items() if k != "encoder"}),
        selection=SelectionConfig(epsilon=0.9),
        generation=GenerationSettings(backend="procedural", noise_rate=0.2),
        seed=7,
    )
    final, report = run_pipeline(cfg)
    return {"root": root, "cfg": cfg, "final": final, "report": report}


@pytest.fixture(scope="session")
def ablation_runs(tmp_path_factory) -> dict:
    """Five seeded ablations at noise 0.3 plus one noise-free ablation."""
    root = tmp_path_factory.mktemp("ablation")
    make_corpus(ShapesCorpusConfig(images=400, seed=5), root / "corpus")
    make_corpus(ShapesCorpusConfig(images=200, seed=991), root / "held", split_tag="val")
    origin_path = root / "corpus" / "train.jsonl"
    held_path = root / "held" / "val.jsonl"

    def run_one(seed: int, noise_rate: float, tag: str):
        cfg = PipelineConfig(
            origin_manifest=origin_path,
            output_dir=root / tag,
            train=TrainSettings(epochs=40, **{k: v for k, v in DESK_TRAIN.items() if k != "encoder"}),
            selection=SelectionConfig(epsilon=0.9),
            generation=GenerationSettings(backend="procedural", noise_rate=noise_rate),
            seed=seed,
        )
        return cfg, ablate(cfg, held_path)

    noisy = [run_one(seed, 0.3, f"noisy-{seed}") for seed in range(5)]
    clean = run_one(0, 0.0, "clean-0")
    return {
        "root": root,
        "origin_path": origin_path,
        "held_path": held_path,
        "origin": read_manifest(origin_path),
        "noisy": noisy,
        "clean": clean,
    }
