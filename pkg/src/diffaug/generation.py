"""Candidate image generation: prompt construction, conditioning, backends.

A generator backend turns (source image, conditioning map, prompt, steps,
seed) into new pixels. Two backends ship: an HTTP client for an external
controlled-diffusion service, and a deterministic procedural generator that
re-renders shapes-corpus scenes so the whole pipeline runs at desk scale.
"""

from __future__ import annotations

import base64
import io
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import requests
from PIL import Image

from .data import LabeledImage, LabelSet, PROVENANCE_ORIGINAL, PROVENANCE_SYNTHETIC
from .detection import CannyParams, DetectionMap, PoseBackend, UnavailablePoseBackend, detection_map_for
from .errors import GenerationError
from .shapes import (
    BASE_COLORS,
    MIN_HALF,
    PlacedShape,
    Scene,
    jitter_color,
    render_scene,
)

ENDPOINT_ENV_VAR = "DIFFAUG_ENDPOINT"

DEFAULT_STEPS = 20


@dataclass(frozen=True)
class Prompt:
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be non-empty")


def prompt_from_labels(labels: LabelSet) -> Prompt:
    """Fixed template: "a photo of " + class names sorted lexicographically."""
    if not labels:
        raise GenerationError("cannot build a prompt from an empty label set")
    return Prompt("a photo of " + ", ".join(labels.sorted_names()))


@dataclass
class GenerationRequest:
    source: LabeledImage
    map: DetectionMap
    prompt: Prompt
    steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.map.spatial_shape != (self.source.height, self.source.width):
            raise ValueError(
                f"detection map shape {self.map.spatial_shape} does not match "
                f"source {self.source.height}x{self.source.width}"
            )


class GeneratorBackend:
    """Interface: produce candidate pixels with the source image's dimensions."""

    name = "abstract"

    def generate(self, request: GenerationRequest) -> np.ndarray:
        raise NotImplementedError


# --- HTTP client for an external generation service --------------------------


def _png_b64(pixels: np.ndarray) -> str:
    mode = "L" if pixels.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(pixels, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


class DiffusionServiceClient(GeneratorBackend):
    """Client for an HTTP generation endpoint.

    Request body: ``{image, control_map, control_kind, prompt, steps, seed}``
    with images as base64 PNG; response body: ``{image}``. Retries are bounded
    with exponential backoff.
    """

    name = "service"

    def __init__(
        self,
        endpoint: Optional[str] = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR)
        if not self.endpoint:
            raise GenerationError(
                f"no generation endpoint configured (set {ENDPOINT_ENV_VAR} or pass endpoint=)"
            )
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session or requests.Session()

    def generate(self, request: GenerationRequest) -> np.ndarray:
        body = {
            "image": _png_b64(request.source.pixels),
            "control_map": _png_b64(request.map.pixels),
            "control_kind": request.map.kind,
            "prompt": request.prompt.text,
            "steps": request.steps,
            "seed": request.seed,
        }
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(self.endpoint, json=body, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                if "image" not in payload:
                    raise GenerationError("service response lacks an 'image' field")
                return _b64_png(payload["image"])
            except GenerationError:
                raise
            except Exception as e:  # connection errors, HTTP errors, bad JSON
                last_error = e
                if attempt < self.retries - 1:
                    time.sleep(self.backoff * (2**attempt))
        raise GenerationError(
            f"generation service failed after {self.retries} attempts: {last_error}"
        )


# --- deterministic procedural generator --------------------------------------


class ProceduralShapesBackend(GeneratorBackend):
    """Re-renders a shapes-corpus scene with seeded jitter.

    With probability ``noise_rate`` per request (seeded), one present class's
    rendering is swapped for a class absent from the source labels, simulating
    a generation failure. The classes actually rendered are recorded so the
    harness can score selection decisions.
    """

    name = "procedural"

    def __init__(self, scenes: Mapping[str, Scene], noise_rate: float = 0.0):
        if not (0.0 <= noise_rate <= 1.0):
            raise ValueError("noise_rate must be in [0, 1]")
        self._scenes = dict(scenes)
        self.noise_rate = noise_rate
        self._truth: dict[tuple[str, int], frozenset[str]] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> np.ndarray:
        source = request.source
        scene = self._scenes.get(source.id)
        if scene is None:
            raise GenerationError(
                f"source '{source.id}' is not in the shapes corpus; the procedural "
                "backend can only re-render corpus images"
            )
        rng = np.random.default_rng(request.seed)
        corrupted = rng.random() < self.noise_rate

        categories = source.labels.categories
        shapes = list(scene)
        if corrupted:
            absent = [c for c in categories if c not in source.labels]
            if absent:
                victim = int(rng.integers(len(shapes)))
                new_kind = absent[int(rng.integers(len(absent)))]
                shapes[victim] = replace(
                    shapes[victim],
                    kind=new_kind,
                    color=jitter_color(BASE_COLORS[new_kind], rng),
                )

        h, w = source.height, source.width
        shapes = [self._jitter_shape(s, rng, h, w) for s in shapes]
        pixels = render_scene(shapes, (h, w), rng)
        with self._lock:
            self._truth[(source.id, request.seed)] = frozenset(s.kind for s in shapes)
        return pixels

    @staticmethod
    def _jitter_shape(shape: PlacedShape, rng: np.random.Generator, h: int, w: int) -> PlacedShape:
        # mild jitter: candidates should stay close to the training distribution
        half = int(np.clip(round(shape.half * rng.uniform(0.92, 1.1)), MIN_HALF, min(h, w) // 4))
        cx = int(np.clip(shape.cx + rng.integers(-3, 4), half + 1, w - half - 2))
        cy = int(np.clip(shape.cy + rng.integers(-3, 4), half + 1, h - half - 2))
        return PlacedShape(shape.kind, cx, cy, half, jitter_color(shape.color, rng, spread=6))

    def rendered_classes(self, source_id: str, seed: int) -> frozenset[str]:
        """Ground-truth content of a generated candidate (harness scoring only)."""
        with self._lock:
            try:
                return self._truth[(source_id, seed)]
            except KeyError:
                raise GenerationError(
                    f"no generation recorded for source '{source_id}' with seed {seed}"
                ) from None

    @property
    def records_truth(self) -> bool:
        return True


# --- candidate construction ---------------------------------------------------


@dataclass
class GenerationConfig:
    steps: int = DEFAULT_STEPS
    seed: int = 0
    candidate_id: Optional[str] = None
    canny_params: CannyParams = field(default_factory=CannyParams)
    pose_backend: PoseBackend = field(default_factory=UnavailablePoseBackend)


def generate_candidate(
    source: LabeledImage,
    backend: GeneratorBackend,
    cfg: GenerationConfig | None = None,
) -> LabeledImage:
    """One synthetic candidate for an original image.

    The candidate carries the source's labels provisionally; final labels are
    assigned during selection. Pixels must match the source's dimensions.
    """
    cfg = cfg or GenerationConfig()
    if source.provenance != PROVENANCE_ORIGINAL:
        raise GenerationError(f"source '{source.id}' is not an original image")

    conditioning = detection_map_for(
        source.pixels, source.labels, cfg.pose_backend, cfg.canny_params
    )
    request = GenerationRequest(
        source=source,
        map=conditioning,
        prompt=prompt_from_labels(source.labels),
        steps=cfg.steps,
        seed=cfg.seed,
    )
    try:
        pixels = backend.generate(request)
    except GenerationError:
        raise
    except Exception as e:
        raise GenerationError(f"backend '{backend.name}' failed: {e}") from e

    if pixels.shape != source.pixels.shape:
        raise GenerationError(
            f"backend returned shape {pixels.shape}, expected {source.pixels.shape}"
        )
    candidate_id = cfg.candidate_id or f"{source.id}-aug-{cfg.seed}"
    return LabeledImage(
        id=candidate_id,
        pixels=pixels,
        labels=source.labels,
        provenance=PROVENANCE_SYNTHETIC,
        source_id=source.id,
        seed=cfg.seed,
    )
