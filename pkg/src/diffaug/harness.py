"""Desk-scale evaluation: selection precision/recall against corpus ground
truth, downstream accuracy, and a threshold sweep over cached scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .data import DatasetManifest, merge_datasets
from .errors import SelectionError
from .selection import decide_at_threshold

# also re-exported here because corpus generation is part of the harness surface
from .shapes import ShapesCorpusConfig, make_corpus  # noqa: F401


@dataclass
class SelectionMetrics:
    """Candidate-level accept quality; None marks an undefined (0-denominator) ratio."""

    precision: Optional[float]
    recall: Optional[float]
    accepted: int
    truly_good: int
    truly_good_accepted: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "accepted": self.accepted,
            "truly_good": self.truly_good,
            "truly_good_accepted": self.truly_good_accepted,
        }


@dataclass(frozen=True)
class CandidateTruth:
    """Private ground truth for one generated candidate."""

    candidate_id: str
    rendered_classes: frozenset[str]
    source_labels: frozenset[str]


def write_truth(entries: Iterable[CandidateTruth], path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in entries:
            obj = {
                "candidate_id": t.candidate_id,
                "rendered_classes": sorted(t.rendered_classes),
                "source_labels": sorted(t.source_labels),
            }
            fh.write(json.dumps(obj) + "\n")


def read_truth(path: Path) -> dict[str, CandidateTruth]:
    table: dict[str, CandidateTruth] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            table[obj["candidate_id"]] = CandidateTruth(
                candidate_id=obj["candidate_id"],
                rendered_classes=frozenset(obj["rendered_classes"]),
                source_labels=frozenset(obj["source_labels"]),
            )
    return table


def _is_truly_good(truth: CandidateTruth, predicted: frozenset[str]) -> bool:
    # good = the generator stayed on-label AND the predicted set names exactly
    # what was rendered
    return truth.rendered_classes <= truth.source_labels and predicted == truth.rendered_classes


def selection_metrics(
    audit: list[dict],
    truth: Mapping[str, CandidateTruth],
) -> SelectionMetrics:
    """Precision/recall of accept decisions against generator ground truth.

    ``audit`` holds parsed audit-log entries; ids must match the truth table
    exactly.
    """
    audit_ids = {entry["candidate_id"] for entry in audit}
    truth_ids = set(truth.keys())
    if audit_ids != truth_ids:
        missing = sorted(audit_ids ^ truth_ids)[:5]
        raise SelectionError(f"audit and ground truth cover different candidates, e.g. {missing}")

    accepted = 0
    truly_good = 0
    truly_good_accepted = 0
    for entry in audit:
        t = truth[entry["candidate_id"]]
        good = _is_truly_good(t, frozenset(entry["predicted"]))
        is_accepted = entry["verdict"] == "accepted"
        accepted += is_accepted
        truly_good += good
        truly_good_accepted += good and is_accepted
    precision = truly_good_accepted / accepted if accepted > 0 else None
    recall = truly_good_accepted / truly_good if truly_good > 0 else None
    return SelectionMetrics(precision, recall, accepted, truly_good, truly_good_accepted)


# --- downstream proxy metric ---------------------------------------------------


def manifest_arrays(manifest: DatasetManifest):
    """Pixel list, indicator matrix, and record ids for estimator calls."""
    images = [record.load().pixels for record in manifest]
    labels = manifest.label_matrix()
    ids = [record.id for record in manifest]
    return images, labels, ids


def subset_accuracy(model, manifest: DatasetManifest) -> float:
    """Exact-match ratio of thresholded predictions on a held-out manifest."""
    images, labels, ids = manifest_arrays(manifest)
    predicted = model.predict(images, record_ids=ids)
    return float((predicted == labels).all(axis=1).mean())


# --- threshold sweep ------------------------------------------------------------


def epsilon_sweep(
    audit: list[dict],
    candidates: DatasetManifest,
    origin: DatasetManifest,
    grid: Iterable[float],
    truth: Optional[Mapping[str, CandidateTruth]] = None,
    downstream_factory=None,
    eval_manifest: Optional[DatasetManifest] = None,
    reject_empty: bool = True,
) -> list[dict]:
    """Re-run the acceptance rule per threshold on cached scores.

    No re-prediction happens: scores come from the audit log. When a
    ``downstream_factory`` (zero-arg estimator constructor) and an evaluation
    manifest are supplied, a fresh downstream model is trained per threshold
    on origin + selected and its held-out accuracy reported.
    """
    grid = [float(e) for e in grid]
    if not grid:
        raise SelectionError("epsilon grid must not be empty")
    categories = origin.category_set
    by_id = {entry["candidate_id"]: entry for entry in audit}
    origin_by_id = origin.by_id()

    rows = []
    for epsilon in grid:
        decisions = []
        accepted_records = []
        for record in candidates:
            entry = by_id.get(record.id)
            if entry is None:
                raise SelectionError(f"no cached scores for candidate '{record.id}'")
            scores = np.array([entry["scores"][c] for c in categories], dtype=np.float64)
            decision = decide_at_threshold(
                scores, origin_by_id[record.source_id].labels, epsilon, reject_empty, record.id
            )
            decisions.append(decision)
            if decision.accepted:
                accepted_records.append(record.with_labels(decision.predicted))

        row: dict = {
            "epsilon": epsilon,
            "accepted": sum(d.accepted for d in decisions),
            "acceptance_rate": (
                sum(d.accepted for d in decisions) / len(decisions) if decisions else 0.0
            ),
            "precision": None,
            "recall": None,
            "downstream_accuracy": None,
        }
        if truth is not None:
            replayed = [
                {
                    "candidate_id": d.candidate_id,
                    "predicted": d.predicted.sorted_names(),
                    "verdict": d.verdict,
                }
                for d in decisions
            ]
            metrics = selection_metrics(replayed, truth)
            row["precision"] = metrics.precision
            row["recall"] = metrics.recall
        if downstream_factory is not None and eval_manifest is not None:
            selected = DatasetManifest(
                category_set=categories, records=accepted_records, split_tag="aug"
            )
            final = merge_datasets(origin, selected)
            images, labels, ids = manifest_arrays(final)
            model = downstream_factory()
            model.fit(images, labels, categories=list(categories.names), record_ids=ids)
            row["downstream_accuracy"] = subset_accuracy(model, eval_manifest)
        rows.append(row)
    return rows


def plot_sweep(rows: list[dict], path: Path):
    """Optional acceptance/precision/recall-vs-threshold plot (needs matplotlib)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise SelectionError("plotting requires matplotlib (install the 'plots' extra)") from e

    xs = [r["epsilon"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["acceptance_rate"] for r in rows], marker="o", label="acceptance rate")
    for key in ("precision", "recall", "downstream_accuracy"):
        if any(r[key] is not None for r in rows):
            ax.plot(xs, [r[key] if r[key] is not None else np.nan for r in rows], marker="o", label=key)
    ax.set_xlabel("threshold")
    ax.set_ylabel("value")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
