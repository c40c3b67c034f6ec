import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from diffaug.data import CategorySet, LabelSet, LabeledImage
from diffaug.detection import DetectionMap, KIND_CANNY
from diffaug.errors import GenerationError
from diffaug.generation import (
    DiffusionServiceClient,
    ENDPOINT_ENV_VAR,
    GenerationConfig,
    GenerationRequest,
    GeneratorBackend,
    ProceduralShapesBackend,
    generate_candidate,
    prompt_from_labels,
)
from diffaug.shapes import PlacedShape

CATS = CategorySet.of(["circle", "square", "triangle"])
ANIMALS = CategorySet.of(["person", "dog", "cat"])


def labels(*names, cats=ANIMALS):
    return LabelSet.of(cats, names)


def make_scene():
    return (PlacedShape("circle", 20, 20, 6, (214, 64, 52)),)


def make_source(image_id="train-00000", kinds=("circle",), size=64):
    pixels = np.full((size, size, 3), 128, dtype=np.uint8)
    return LabeledImage(image_id, pixels, LabelSet.of(CATS, kinds))


def edge_map(source):
    return DetectionMap(np.zeros((source.height, source.width), dtype=np.uint8), KIND_CANNY)


class TestPrompt:
    def test_single_label(self):
        assert prompt_from_labels(labels("cat")).text == "a photo of cat"

    def test_sorted_multi_label(self):
        assert prompt_from_labels(labels("person", "dog")).text == "a photo of dog, person"

    def test_empty_labels_rejected(self):
        with pytest.raises(GenerationError):
            prompt_from_labels(labels())

    @given(st.sets(st.sampled_from(ANIMALS.names), min_size=1))
    def test_insertion_order_irrelevant(self, names):
        ordered = list(names)
        a = prompt_from_labels(LabelSet.of(ANIMALS, ordered))
        b = prompt_from_labels(LabelSet.of(ANIMALS, reversed(ordered)))
        assert a == b


class TestGenerationRequest:
    def test_steps_must_be_positive(self):
        src = make_source()
        with pytest.raises(ValueError):
            GenerationRequest(src, edge_map(src), prompt_from_labels(src.labels), steps=0)

    def test_map_must_match_source(self):
        src = make_source()
        small = DetectionMap(np.zeros((8, 8), dtype=np.uint8), KIND_CANNY)
        with pytest.raises(ValueError):
            GenerationRequest(src, small, prompt_from_labels(src.labels))


class TestProceduralBackend:
    def request(self, backend_seed, source=None):
        src = source or make_source()
        return GenerationRequest(src, edge_map(src), prompt_from_labels(src.labels), seed=backend_seed)

    def test_zero_noise_keeps_classes(self):
        backend = ProceduralShapesBackend({"train-00000": make_scene()}, noise_rate=0.0)
        backend.generate(self.request(7))
        assert backend.rendered_classes("train-00000", 7) == frozenset({"circle"})

    def test_full_noise_swaps_single_class(self):
        backend = ProceduralShapesBackend({"train-00000": make_scene()}, noise_rate=1.0)
        for seed in range(20):
            backend.generate(self.request(seed))
            rendered = backend.rendered_classes("train-00000", seed)
            assert rendered != frozenset({"circle"})
            assert rendered <= {"square", "triangle"}

    def test_corruption_rate_over_seeds(self):
        # independent oracle: count corrupted generations over seeds 0..999
        backend = ProceduralShapesBackend({"train-00000": make_scene()}, noise_rate=0.3)
        corrupted = 0
        for seed in range(1000):
            backend.generate(self.request(seed))
            corrupted += backend.rendered_classes("train-00000", seed) != frozenset({"circle"})
        assert 0.25 <= corrupted / 1000 <= 0.35

    def test_bit_exact_determinism(self):
        backend = ProceduralShapesBackend({"train-00000": make_scene()}, noise_rate=0.5)
        a = backend.generate(self.request(service_seed := 123))
        b = backend.generate(self.request(service_seed))
        assert np.array_equal(a, b)

    def test_non_corpus_source_rejected(self):
        backend = ProceduralShapesBackend({"train-00000": make_scene()})
        stranger = make_source(image_id="not-in-corpus")
        with pytest.raises(GenerationError, match="corpus"):
            backend.generate(self.request(0, source=stranger))

    def test_noise_rate_validated(self):
        with pytest.raises(ValueError):
            ProceduralShapesBackend({}, noise_rate=1.5)


class TestGenerateCandidate:
    def backend(self, noise=0.0):
        return ProceduralShapesBackend({"train-00000": make_scene()}, noise_rate=noise)

    def test_metadata_contract(self):
        src = make_source()
        out = generate_candidate(src, self.backend(), GenerationConfig(seed=7))
        assert out.provenance == "synthetic"
        assert out.source_id == src.id
        assert out.seed == 7
        assert out.labels == src.labels
        assert out.pixels.shape == src.pixels.shape

    def test_identical_requests_are_byte_identical(self):
        src = make_source()
        a = generate_candidate(src, self.backend(), GenerationConfig(seed=9))
        b = generate_candidate(src, self.backend(), GenerationConfig(seed=9))
        assert np.array_equal(a.pixels, b.pixels)

    def test_wrong_output_shape_rejected(self):
        class Shrinking(GeneratorBackend):
            name = "shrinking"

            def generate(self, request):
                return np.zeros((10, 10, 3), dtype=np.uint8)

        with pytest.raises(GenerationError, match="shape"):
            generate_candidate(make_source(), Shrinking())

    def test_source_must_be_original(self):
        synth = LabeledImage(
            "x", np.zeros((16, 16, 3), dtype=np.uint8), LabelSet.of(CATS, ["circle"]),
            provenance="synthetic", source_id="y",
        )
        with pytest.raises(GenerationError, match="original"):
            generate_candidate(synth, self.backend())

    def test_default_candidate_id(self):
        out = generate_candidate(make_source(), self.backend(), GenerationConfig(seed=3))
        assert out.id == "train-00000-aug-3"


# --- HTTP service client -------------------------------------------------------


class _ServiceHandler(BaseHTTPRequestHandler):
    fail_first = 0
    requests_seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests_seen.append(body)
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(500)
            self.end_headers()
            return
        source = np.asarray(
            Image.open(io.BytesIO(base64.b64decode(body["image"]))).convert("RGB")
        )
        flipped = source[:, ::-1]  # deterministic transform to prove round-tripping
        buf = io.BytesIO()
        Image.fromarray(flipped).save(buf, format="PNG")
        payload = json.dumps({"image": base64.b64encode(buf.getvalue()).decode("ascii")})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload.encode())

    def log_message(self, *args):
        pass


@pytest.fixture()
def service():
    _ServiceHandler.fail_first = 0
    _ServiceHandler.requests_seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ServiceHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/generate"
    server.shutdown()


class TestDiffusionServiceClient:
    def request(self):
        src = make_source()
        rng = np.random.default_rng(5)
        src.pixels = rng.integers(0, 256, src.pixels.shape, dtype=np.uint8)
        return src, GenerationRequest(src, edge_map(src), prompt_from_labels(src.labels), steps=20, seed=4)

    def test_wire_format_and_round_trip(self, service):
        src, req = self.request()
        client = DiffusionServiceClient(endpoint=service, backoff=0.01)
        out = client.generate(req)
        assert np.array_equal(out, src.pixels[:, ::-1])

        sent = _ServiceHandler.requests_seen[0]
        assert set(sent) == {"image", "control_map", "control_kind", "prompt", "steps", "seed"}
        assert sent["prompt"] == "a photo of circle"
        assert sent["control_kind"] == "canny_edge"
        assert sent["steps"] == 20 and sent["seed"] == 4
        control = np.asarray(Image.open(io.BytesIO(base64.b64decode(sent["control_map"]))))
        assert control.shape == (64, 64)

    def test_bounded_retries_then_success(self, service):
        _ServiceHandler.fail_first = 2
        _, req = self.request()
        client = DiffusionServiceClient(endpoint=service, retries=3, backoff=0.01)
        out = client.generate(req)
        assert out is not None
        assert len(_ServiceHandler.requests_seen) == 3

    def test_retry_exhaustion_raises(self, service):
        _ServiceHandler.fail_first = 99
        _, req = self.request()
        client = DiffusionServiceClient(endpoint=service, retries=3, backoff=0.01)
        with pytest.raises(GenerationError, match="3 attempts"):
            client.generate(req)
        assert len(_ServiceHandler.requests_seen) == 3

    def test_endpoint_from_environment(self, service, monkeypatch):
        monkeypatch.setenv(ENDPOINT_ENV_VAR, service)
        client = DiffusionServiceClient(backoff=0.01)
        assert client.endpoint == service

    def test_missing_endpoint_rejected(self, monkeypatch):
        monkeypatch.delenv(ENDPOINT_ENV_VAR, raising=False)
        with pytest.raises(GenerationError, match="endpoint"):
            DiffusionServiceClient()
