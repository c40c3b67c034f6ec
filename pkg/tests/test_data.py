import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffaug.data import (
    CategorySet,
    DatasetManifest,
    ImageRecord,
    LabelSet,
    LabeledImage,
    header_path_for,
    load_image,
    merge_datasets,
    read_manifest,
    save_image,
    subset_of,
    write_manifest,
)
from diffaug.errors import CategoryMismatchError, ManifestError

CATS = CategorySet.of(["person", "dog", "cat"])


def labels(*names) -> LabelSet:
    return LabelSet.of(CATS, names)


def make_record(i, cats=CATS, provenance="original", source_id=None, seed=None):
    return ImageRecord(
        id=f"img-{i:04d}",
        path=f"images/img-{i:04d}.png",
        labels=LabelSet.of(cats, [cats.names[i % len(cats)]]),
        provenance=provenance,
        source_id=source_id,
        seed=seed,
    )


def make_manifest(n, cats=CATS, prefix=""):
    records = [
        ImageRecord(
            id=f"{prefix}img-{i:04d}",
            path=f"images/{prefix}img-{i:04d}.png",
            labels=LabelSet.of(cats, [cats.names[i % len(cats)]]),
        )
        for i in range(n)
    ]
    return DatasetManifest(category_set=cats, records=records)


class TestCategorySet:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            CategorySet.of(["a", "a"])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            CategorySet.of([])

    def test_order_is_fixed(self):
        cs = CategorySet.of(["b", "a"])
        assert cs.index("b") == 0 and cs.index("a") == 1


class TestLabelSet:
    def test_membership_checked(self):
        with pytest.raises(ValueError):
            LabelSet.of(CATS, ["horse"])

    def test_indicator_follows_category_order(self):
        assert labels("dog").indicator().tolist() == [0.0, 1.0, 0.0]


class TestSubsetOf:
    def test_subset_true(self):
        assert subset_of(labels("person"), labels("person", "dog")) is True

    def test_empty_is_subset_of_all(self):
        assert subset_of(labels(), labels("person")) is True

    def test_disjoint_false(self):
        assert subset_of(labels("cat"), labels("person", "dog")) is False

    def test_mismatched_category_sets(self):
        other = CategorySet.of(["person", "dog"])
        with pytest.raises(CategoryMismatchError):
            subset_of(labels("person"), LabelSet.of(other, ["person"]))

    @given(
        a=st.sets(st.sampled_from(CATS.names)),
        b=st.sets(st.sampled_from(CATS.names)),
        c=st.sets(st.sampled_from(CATS.names)),
    )
    def test_reflexive_and_transitive(self, a, b, c):
        la, lb, lc = (LabelSet.of(CATS, s) for s in (a, b, c))
        assert subset_of(la, la)
        if subset_of(la, lb) and subset_of(lb, lc):
            assert subset_of(la, lc)


class TestLabeledImage:
    def test_requires_three_channels(self):
        with pytest.raises(ValueError):
            LabeledImage("x", np.zeros((4, 4), dtype=np.uint8), labels("dog"))

    def test_synthetic_needs_source(self):
        pixels = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            LabeledImage("x", pixels, labels("dog"), provenance="synthetic")
        ok = LabeledImage("x", pixels, labels("dog"), provenance="synthetic", source_id="y")
        assert ok.source_id == "y"

    def test_unknown_provenance(self):
        with pytest.raises(ValueError):
            LabeledImage("x", np.zeros((4, 4, 3), dtype=np.uint8), labels("dog"), provenance="guessed")


class TestMerge:
    def test_cardinality(self):
        merged = merge_datasets(make_manifest(100), make_manifest(40, prefix="aug-"))
        assert len(merged) == 140

    def test_empty_aug_is_identity(self):
        origin = make_manifest(5)
        merged = merge_datasets(origin, DatasetManifest(category_set=CATS))
        assert [r.id for r in merged] == [r.id for r in origin]
        assert [r.labels for r in merged] == [r.labels for r in origin]

    def test_category_mismatch_refused(self):
        other = DatasetManifest(category_set=CategorySet.of(["cat"]))
        with pytest.raises(CategoryMismatchError):
            merge_datasets(make_manifest(3), other)

    def test_order_origin_then_aug(self):
        merged = merge_datasets(make_manifest(2), make_manifest(2, prefix="aug-"))
        assert [r.id for r in merged] == ["img-0000", "img-0001", "aug-img-0000", "aug-img-0001"]

    @given(na=st.integers(0, 30), nb=st.integers(0, 30))
    def test_merge_cardinality_property(self, na, nb):
        merged = merge_datasets(make_manifest(na), make_manifest(nb, prefix="aug-"))
        assert len(merged) == na + nb

    def test_duplicate_ids_across_manifests_refused(self):
        with pytest.raises(ManifestError):
            merge_datasets(make_manifest(3), make_manifest(3))


class TestManifestRoundTrip:
    def test_round_trip_identity(self, tmp_path):
        records = [
            ImageRecord("a", tmp_path / "images/a.png", labels("dog", "person")),
            ImageRecord("b", tmp_path / "images/b.png", labels("cat"), "synthetic", "a", 1234),
            ImageRecord("c", tmp_path / "images/c.png", labels()),
        ]
        manifest = DatasetManifest(category_set=CATS, records=records, split_tag="train")
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        back = read_manifest(path)
        assert back.split_tag == "train"
        assert back.category_set == CATS
        assert len(back) == 3
        for orig, rt in zip(records, back):
            assert rt.id == orig.id
            assert rt.labels.sorted_names() == orig.labels.sorted_names()
            assert rt.provenance == orig.provenance
            assert rt.source_id == orig.source_id
            assert rt.seed == orig.seed
            assert rt.path.resolve() == orig.path.resolve()

    def test_header_contains_categories_key(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(make_manifest(1), path)
        header = json.loads(header_path_for(path).read_text())
        assert header["categories"] == list(CATS.names)

    def test_duplicate_id_on_read(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(make_manifest(1), path)
        line = path.read_text()
        path.write_text(line + line)
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(make_manifest(2), path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ManifestError, match="line 3"):
            read_manifest(path)

    def test_unknown_category_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(make_manifest(1), path)
        obj = json.loads(path.read_text())
        obj["labels"] = ["horse"]
        obj["id"] = "other"
        with open(path, "a") as fh:
            fh.write(json.dumps(obj) + "\n")
        with pytest.raises(ManifestError, match="unknown"):
            read_manifest(path)

    def test_synthetic_without_source_refused(self):
        with pytest.raises(ManifestError):
            ImageRecord("x", "x.png", labels("dog"), provenance="synthetic")

    def test_missing_header(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        with pytest.raises(ManifestError, match="header"):
            read_manifest(path)


class TestImageFiles:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        pixels = rng.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
        save_image(pixels, tmp_path / "x.png")
        assert np.array_equal(load_image(tmp_path / "x.png"), pixels)
