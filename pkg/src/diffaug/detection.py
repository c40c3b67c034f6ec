"""Spatial conditioning maps for controlled generation.

Default map is a Canny edge image built from the classical pipeline
(grayscale, Gaussian smoothing, Sobel gradients, non-maximum suppression,
double-threshold hysteresis). Images labeled "person" route to a pluggable
human-pose backend instead; the shipped backends are `unavailable` (falls
back to edges with a warning) and a constant stub for testing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import LabelSet
from .errors import DetectionError, PoseBackendError

KIND_CANNY = "canny_edge"
KIND_POSE = "human_pose"

PERSON_LABEL = "person"

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class CannyParams:
    """Thresholds are on a 0-255 gradient-magnitude scale: magnitude is
    normalized so an ideal full-contrast step edge measures 255 after the
    configured smoothing."""

    gaussian_sigma: float = 1.4
    low_threshold: float = 50.0
    high_threshold: float = 150.0

    def __post_init__(self):
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if not (0 <= self.low_threshold < self.high_threshold):
            raise ValueError("thresholds must satisfy 0 <= low < high")


@dataclass
class DetectionMap:
    """Conditioning image: single-channel binary edges or an h x w x 3 pose rendering."""

    pixels: np.ndarray
    kind: str
    warning: Optional[str] = None

    def __post_init__(self):
        if self.kind == KIND_CANNY:
            if self.pixels.ndim != 2:
                raise ValueError("edge maps must be single-channel")
            values = np.unique(self.pixels)
            if not np.all(np.isin(values, (0, 255))):
                raise ValueError("edge maps must be binary-valued {0, 255}")
        elif self.kind == KIND_POSE:
            if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
                raise ValueError("pose maps must be h x w x 3")
        else:
            raise ValueError(f"unknown detection map kind '{self.kind}'")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def _grayscale(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    raise DetectionError(f"expected h x w or h x w x 3 pixels, got shape {arr.shape}")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _magnitude_scale(kernel: np.ndarray) -> float:
    """Sobel response of a smoothed unit step; divides magnitudes so a
    full-contrast step measures 255 regardless of the smoothing width."""
    step = np.zeros(2 * kernel.size + 9)
    step[step.size // 2 :] = 1.0
    smoothed = np.convolve(step, kernel, mode="same")
    peak = np.max(smoothed[2:] - smoothed[:-2])
    # the horizontal Sobel tap is [-1, 0, 1] with vertical weights summing to 4
    return 4.0 * peak


def _shifted(arr: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Value of arr at (i+di, j+dj), zero outside; borders are masked later anyway."""
    padded = np.pad(arr, 1, mode="constant")
    h, w = arr.shape
    return padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]


def canny_edges(pixels: np.ndarray, params: CannyParams | None = None) -> DetectionMap:
    """Binary edge map; deterministic for identical input and parameters."""
    params = params or CannyParams()
    gray = _grayscale(pixels)
    h, w = gray.shape
    if h < 1 or w < 1:
        raise DetectionError("image must be non-empty")

    kernel = _gaussian_kernel(params.gaussian_sigma)
    if min(h, w) < kernel.size:
        raise DetectionError(
            f"image {h}x{w} is smaller than the {kernel.size}-tap smoothing kernel"
        )
    smoothed = ndimage.correlate1d(gray, kernel, axis=0, mode="reflect")
    smoothed = ndimage.correlate1d(smoothed, kernel, axis=1, mode="reflect")

    gx = ndimage.correlate(smoothed, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(smoothed, _SOBEL_Y, mode="reflect")
    magnitude = np.hypot(gx, gy) / _magnitude_scale(kernel)

    # Quantize gradient direction into four sectors and compare each pixel with
    # its two neighbours along the gradient. Ties keep exactly one pixel: the
    # survivor must be strictly greater than the neighbour at -offset.
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros_like(angle, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros_like(magnitude, dtype=bool)
    for s, (di, dj) in offsets.items():
        neg = _shifted(magnitude, -di, -dj)
        pos = _shifted(magnitude, di, dj)
        keep |= (sector == s) & (magnitude > neg) & (magnitude >= pos)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    suppressed = np.where(keep, magnitude, 0.0)

    strong = suppressed >= params.high_threshold
    weak = suppressed >= params.low_threshold
    labeled, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if count:
        strong_labels = np.unique(labeled[strong])
        strong_labels = strong_labels[strong_labels > 0]
        linked = np.isin(labeled, strong_labels) & weak
    else:
        linked = np.zeros_like(weak)

    edges = np.where(linked, 255, 0).astype(np.uint8)
    return DetectionMap(edges, KIND_CANNY)


def select_detector(labels: LabelSet) -> str:
    """Pose conditioning when "person" is labeled, edge conditioning otherwise."""
    return KIND_POSE if PERSON_LABEL in labels else KIND_CANNY


class PoseBackend:
    """Interface for human-pose renderers."""

    name = "abstract"
    available = False

    def render(self, pixels: np.ndarray) -> Optional[np.ndarray]:
        """Pose rendering with the image's spatial shape, or None when no person is found."""
        raise NotImplementedError


class UnavailablePoseBackend(PoseBackend):
    """No pose estimator installed; pose_map falls back to edges."""

    name = "unavailable"
    available = False

    def render(self, pixels: np.ndarray) -> Optional[np.ndarray]:
        raise PoseBackendError("no pose backend is installed")


class ConstantStubPoseBackend(PoseBackend):
    """Testing backend: paints a fixed color, or reports no detection."""

    name = "constant-stub"
    available = True

    def __init__(self, color=(255, 255, 255), detects_person: bool = True):
        self.color = tuple(int(c) for c in color)
        self.detects_person = detects_person

    def render(self, pixels: np.ndarray) -> Optional[np.ndarray]:
        if not self.detects_person:
            return None
        h, w = pixels.shape[0], pixels.shape[1]
        out = np.zeros((h, w, 3), dtype=np.uint8)
        out[:, :] = self.color
        return out


def pose_map(
    pixels: np.ndarray,
    backend: PoseBackend,
    canny_params: CannyParams | None = None,
) -> DetectionMap:
    """Pose rendering from the backend; falls back to edges when unavailable."""
    if backend is None:
        raise DetectionError("no pose backend configured")
    if not backend.available:
        edges = canny_edges(pixels, canny_params)
        return DetectionMap(
            edges.pixels,
            KIND_CANNY,
            warning=f"pose backend '{backend.name}' unavailable; fell back to canny edges",
        )
    try:
        rendered = backend.render(pixels)
    except PoseBackendError:
        raise
    except Exception as e:
        raise PoseBackendError(f"pose backend '{backend.name}' failed: {e}") from e
    h, w = pixels.shape[0], pixels.shape[1]
    if rendered is None:
        rendered = np.zeros((h, w, 3), dtype=np.uint8)
    if rendered.shape[:2] != (h, w):
        raise PoseBackendError(
            f"pose backend returned shape {rendered.shape[:2]}, expected {(h, w)}"
        )
    return DetectionMap(rendered, KIND_POSE)


def detection_map_for(
    pixels: np.ndarray,
    labels: LabelSet,
    pose_backend: PoseBackend | None = None,
    canny_params: CannyParams | None = None,
) -> DetectionMap:
    """Route to the detector chosen by the label set."""
    if select_detector(labels) == KIND_POSE:
        return pose_map(pixels, pose_backend or UnavailablePoseBackend(), canny_params)
    return canny_edges(pixels, canny_params)
