import numpy as np
import pytest

from diffaug.data import CategorySet, LabelSet
from diffaug.detection import (
    CannyParams,
    ConstantStubPoseBackend,
    DetectionMap,
    KIND_CANNY,
    KIND_POSE,
    PoseBackend,
    UnavailablePoseBackend,
    canny_edges,
    pose_map,
    select_detector,
)
from diffaug.errors import DetectionError, PoseBackendError

CATS = CategorySet.of(["person", "dog", "cat"])


def rgb(gray2d: np.ndarray) -> np.ndarray:
    return np.repeat(gray2d[:, :, None], 3, axis=2).astype(np.uint8)


def step_image(width=32, height=32, split=None) -> np.ndarray:
    split = width // 2 if split is None else split
    img = np.zeros((height, width), dtype=np.uint8)
    img[:, split:] = 255
    return rgb(img)


def edge_columns(edges: np.ndarray) -> np.ndarray:
    return np.unique(np.nonzero(edges)[1])


class TestCannyParams:
    def test_defaults(self):
        p = CannyParams()
        assert p.gaussian_sigma == 1.4 and p.low_threshold == 50.0 and p.high_threshold == 150.0

    @pytest.mark.parametrize("kwargs", [
        {"gaussian_sigma": 0.0},
        {"low_threshold": -1.0},
        {"low_threshold": 150.0, "high_threshold": 150.0},
        {"low_threshold": 200.0, "high_threshold": 100.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            CannyParams(**kwargs)


class TestCannyEdges:
    def test_constant_image_has_no_edges(self):
        img = np.full((32, 32, 3), 127, dtype=np.uint8)
        out = canny_edges(img)
        assert out.kind == KIND_CANNY
        assert not out.pixels.any()

    def test_step_edge_single_column_matches_reference(self):
        # independent reference implementation: OpenCV's Canny
        cv2 = pytest.importorskip("cv2")
        img = step_image()
        mine = canny_edges(img)
        cols = edge_columns(mine.pixels)
        assert cols.size == 1, f"expected a single edge column, got {cols}"

        gray = (img[..., 0]).astype(np.uint8)
        ref = cv2.Canny(gray, 50, 150)
        ref_cols = edge_columns(ref)
        assert abs(int(cols[0]) - int(ref_cols.mean())) <= 1

        rows_with_edge = np.unique(np.nonzero(mine.pixels)[0])
        interior = np.arange(1, img.shape[0] - 1)  # NMS zeroes the 1 px border
        assert np.isin(interior, rows_with_edge).all()

    def test_thresholds_above_max_gradient(self):
        img = step_image()
        out = canny_edges(img, CannyParams(low_threshold=1e8, high_threshold=1e9))
        assert not out.pixels.any()

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(48, 40, 3), dtype=np.uint8)
        a = canny_edges(img)
        b = canny_edges(img)
        assert np.array_equal(a.pixels, b.pixels)

    def test_binary_values_and_shape(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            h, w = rng.integers(16, 64, size=2)
            img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            out = canny_edges(img)
            assert out.pixels.shape == (h, w)
            assert set(np.unique(out.pixels)) <= {0, 255}

    def test_raising_high_threshold_never_adds_edges(self):
        rng = np.random.default_rng(2)
        for _ in range(8):
            img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
            lo = canny_edges(img, CannyParams(high_threshold=80.0, low_threshold=20.0))
            hi = canny_edges(img, CannyParams(high_threshold=160.0, low_threshold=20.0))
            added = (hi.pixels > 0) & ~(lo.pixels > 0)
            assert not added.any()

    def test_image_smaller_than_kernel(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(DetectionError, match="smaller"):
            canny_edges(img, CannyParams(gaussian_sigma=2.0))


class TestSelectDetector:
    def test_person_routes_to_pose(self):
        assert select_detector(LabelSet.of(CATS, ["person", "dog"])) == KIND_POSE

    def test_no_person_routes_to_edges(self):
        assert select_detector(LabelSet.of(CATS, ["cat"])) == KIND_CANNY

    def test_empty_routes_to_edges(self):
        assert select_detector(LabelSet.of(CATS, [])) == KIND_CANNY


class TestPoseMap:
    def test_unavailable_falls_back_to_edges_with_warning(self):
        img = step_image()
        out = pose_map(img, UnavailablePoseBackend())
        assert out.kind == KIND_CANNY
        assert out.warning is not None
        assert np.array_equal(out.pixels, canny_edges(img).pixels)

    def test_stub_echoes_fixed_map_with_matching_dimensions(self):
        img = np.zeros((20, 24, 3), dtype=np.uint8)
        out = pose_map(img, ConstantStubPoseBackend(color=(10, 20, 30)))
        assert out.kind == KIND_POSE
        assert out.pixels.shape == (20, 24, 3)
        assert (out.pixels == (10, 20, 30)).all()
        assert out.warning is None

    def test_no_detected_person_gives_zero_map(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        out = pose_map(img, ConstantStubPoseBackend(detects_person=False))
        assert out.kind == KIND_POSE
        assert not out.pixels.any()

    def test_backend_failure_carries_diagnostic(self):
        class Exploding(PoseBackend):
            name = "exploding"
            available = True

            def render(self, pixels):
                raise RuntimeError("joints misaligned")

        with pytest.raises(PoseBackendError, match="joints misaligned"):
            pose_map(np.zeros((8, 8, 3), dtype=np.uint8), Exploding())

    def test_wrong_shape_rejected(self):
        class WrongShape(PoseBackend):
            name = "wrong"
            available = True

            def render(self, pixels):
                return np.zeros((4, 4, 3), dtype=np.uint8)

        with pytest.raises(PoseBackendError, match="shape"):
            pose_map(np.zeros((8, 8, 3), dtype=np.uint8), WrongShape())


class TestDetectionMapInvariants:
    def test_edge_map_must_be_binary(self):
        with pytest.raises(ValueError):
            DetectionMap(np.full((4, 4), 7, dtype=np.uint8), KIND_CANNY)

    def test_pose_map_must_have_three_channels(self):
        with pytest.raises(ValueError):
            DetectionMap(np.zeros((4, 4), dtype=np.uint8), KIND_POSE)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            DetectionMap(np.zeros((4, 4), dtype=np.uint8), "sobel")
