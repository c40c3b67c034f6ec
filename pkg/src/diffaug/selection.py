"""Candidate filtering: threshold scores into a predicted label set, accept
iff that set is contained in the source image's labels, and relabel accepted
candidates with the predicted set.

Empty predictions are rejected by default (an unlabeled image carries no
supervision) but can be admitted with ``reject_empty=False``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import (
    DatasetManifest,
    ImageRecord,
    LabeledImage,
    LabelSet,
    PROVENANCE_SYNTHETIC,
    subset_of,
)
from .errors import CategoryMismatchError, SelectionError

VERDICT_ACCEPTED = "accepted"
VERDICT_REJECTED = "rejected"

REASON_OK = "ok"
REASON_NOT_SUBSET = "not_subset"
REASON_EMPTY = "empty_prediction"


@dataclass(frozen=True)
class SelectionConfig:
    epsilon: float = 0.9
    reject_empty: bool = True

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie strictly between 0 and 1")


@dataclass
class SelectionDecision:
    candidate_id: str
    predicted: LabelSet
    scores: np.ndarray
    verdict: str
    reason: str

    @property
    def accepted(self) -> bool:
        return self.verdict == VERDICT_ACCEPTED


def labels_above_threshold(scores: np.ndarray, categories, epsilon: float) -> LabelSet:
    """Classes whose score is strictly greater than the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(categories),):
        raise SelectionError(
            f"expected {len(categories)} scores, got shape {scores.shape}"
        )
    picked = {name for name, s in zip(categories, scores) if s > epsilon}
    return LabelSet.of(categories, picked)


def predict_labels(scores: np.ndarray, categories, cfg: SelectionConfig) -> LabelSet:
    return labels_above_threshold(scores, categories, cfg.epsilon)


def decide_at_threshold(
    scores: np.ndarray,
    source_labels: LabelSet,
    epsilon: float,
    reject_empty: bool,
    candidate_id: str = "",
) -> SelectionDecision:
    """Pure decision rule on a score vector; scoring happens elsewhere.

    Exposed with a raw threshold so sweeps can replay the identical rule at
    boundary values outside the operating config's (0, 1) range.
    """
    predicted = labels_above_threshold(scores, source_labels.categories, epsilon)
    if not predicted and reject_empty:
        verdict, reason = VERDICT_REJECTED, REASON_EMPTY
    elif not subset_of(predicted, source_labels):
        verdict, reason = VERDICT_REJECTED, REASON_NOT_SUBSET
    else:
        verdict, reason = VERDICT_ACCEPTED, REASON_OK
    return SelectionDecision(candidate_id, predicted, np.asarray(scores, dtype=np.float64), verdict, reason)


def decide(
    scores: np.ndarray,
    source_labels: LabelSet,
    cfg: SelectionConfig,
    candidate_id: str = "",
) -> SelectionDecision:
    return decide_at_threshold(scores, source_labels, cfg.epsilon, cfg.reject_empty, candidate_id)


def select(
    candidate: LabeledImage,
    source_labels: LabelSet,
    model,
    cfg: SelectionConfig,
) -> SelectionDecision:
    """Score one synthetic candidate and apply the acceptance rule."""
    if candidate.provenance != PROVENANCE_SYNTHETIC:
        raise SelectionError(f"candidate '{candidate.id}' is not synthetic")
    model_categories = tuple(model.categories_)
    if model_categories != source_labels.categories.names:
        raise CategoryMismatchError(
            f"model categories {model_categories} do not match "
            f"dataset categories {source_labels.categories.names}"
        )
    scores = model.score_image(candidate.pixels, record_id=candidate.id)
    return decide(scores, source_labels, cfg, candidate_id=candidate.id)


def select_batch(
    candidates: DatasetManifest,
    origin: DatasetManifest,
    model,
    cfg: SelectionConfig,
    image_loader: Optional[Callable[[ImageRecord], LabeledImage]] = None,
) -> tuple[DatasetManifest, list[SelectionDecision]]:
    """Filter a candidate manifest against its origin manifest.

    Returns the accepted records (labels replaced by the predicted sets) and
    one decision per candidate in input order.
    """
    if candidates.category_set != origin.category_set:
        raise CategoryMismatchError("candidate and origin manifests use different category sets")
    loader = image_loader or (lambda record: record.load())
    origin_by_id = origin.by_id()

    accepted: list[ImageRecord] = []
    audit: list[SelectionDecision] = []
    for record in candidates:
        if record.source_id not in origin_by_id:
            raise SelectionError(
                f"candidate '{record.id}' references unknown source '{record.source_id}'"
            )
        source_labels = origin_by_id[record.source_id].labels
        decision = select(loader(record), source_labels, model, cfg)
        audit.append(decision)
        if decision.accepted:
            accepted.append(record.with_labels(decision.predicted))
    selected = DatasetManifest(
        category_set=candidates.category_set, records=accepted, split_tag="aug"
    )
    return selected, audit


# --- audit log ---------------------------------------------------------------


def write_audit(decisions: list[SelectionDecision], path: Path, categories):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in decisions:
            obj = {
                "candidate_id": d.candidate_id,
                "scores": {name: float(s) for name, s in zip(categories, d.scores)},
                "predicted": d.predicted.sorted_names(),
                "verdict": d.verdict,
                "reason": d.reason,
            }
            fh.write(json.dumps(obj) + "\n")


def read_audit(path: Path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise SelectionError(f"audit line {line_no}: malformed entry ({e.msg})") from e
    return entries
