"""diffaug: augment weakly-labeled image datasets with filtered synthetic images.

Candidates come from a controlled generation backend (an external diffusion
service or a deterministic procedural stand-in), a patch-driven multi-label
classifier scores them, and a threshold-plus-subset rule decides which
candidates join the extended dataset.
"""

from .classifier import (
    PatchClassifier,
    PatchGridConfig,
    global_max_pool,
    head_loss_gradient,
    multilabel_bce,
    score_patches,
)
from .data import (
    CategorySet,
    DatasetManifest,
    ImageRecord,
    LabeledImage,
    LabelSet,
    merge_datasets,
    read_manifest,
    subset_of,
    write_manifest,
)
from .detection import (
    CannyParams,
    ConstantStubPoseBackend,
    DetectionMap,
    UnavailablePoseBackend,
    canny_edges,
    pose_map,
    select_detector,
)
from .generation import (
    DiffusionServiceClient,
    GenerationConfig,
    GenerationRequest,
    GeneratorBackend,
    ProceduralShapesBackend,
    Prompt,
    generate_candidate,
    prompt_from_labels,
)
from .harness import (
    SelectionMetrics,
    epsilon_sweep,
    selection_metrics,
    subset_accuracy,
)
from .pipeline import PipelineConfig, ablate, run_pipeline
from .selection import (
    SelectionConfig,
    SelectionDecision,
    predict_labels,
    select,
    select_batch,
)
from .shapes import ShapesCorpusConfig, make_corpus

__version__ = "0.1.0"

__all__ = [
    "CannyParams",
    "CategorySet",
    "ConstantStubPoseBackend",
    "DatasetManifest",
    "DetectionMap",
    "DiffusionServiceClient",
    "GenerationConfig",
    "GenerationRequest",
    "GeneratorBackend",
    "ImageRecord",
    "LabelSet",
    "LabeledImage",
    "PatchClassifier",
    "PatchGridConfig",
    "PipelineConfig",
    "ProceduralShapesBackend",
    "Prompt",
    "SelectionConfig",
    "SelectionDecision",
    "SelectionMetrics",
    "ShapesCorpusConfig",
    "UnavailablePoseBackend",
    "ablate",
    "canny_edges",
    "epsilon_sweep",
    "generate_candidate",
    "global_max_pool",
    "head_loss_gradient",
    "make_corpus",
    "merge_datasets",
    "multilabel_bce",
    "pose_map",
    "predict_labels",
    "prompt_from_labels",
    "read_manifest",
    "run_pipeline",
    "score_patches",
    "select",
    "select_batch",
    "select_detector",
    "selection_metrics",
    "subset_accuracy",
    "subset_of",
    "write_manifest",
]
