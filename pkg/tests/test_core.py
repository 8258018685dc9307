import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvmiml.core import (
    Dataset,
    DatasetFormatError,
    DatasetMeta,
    DatasetValidationError,
    Instance,
    LabelVector,
    load_dataset,
    make_bag,
    save_dataset,
    validate_dataset,
)
from helpers import tiny_dataset

MINIMAL = {
    "meta": {"num_known_classes": 1, "num_views": 2, "feature_dim": 2},
    "probe": [
        {"id": "p1", "view": 1, "labels": [1],
         "instances": [{"features": [0.0, 1.0], "truth_class": 1}]},
    ],
    "gallery": [
        {"id": "g1", "view": 2, "labels": [1],
         "instances": [{"features": [0.5, 1.5], "truth_class": 1}]},
    ],
}


def write_doc(tmp_path, doc, name="ds.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestTypes:
    """Constructors normalize and guard their local invariants."""

    def test_meta_totals(self):
        meta = DatasetMeta(5, 3, 8)
        assert meta.num_total_classes == 6

    @pytest.mark.parametrize("args", [(0, 2, 2), (1, 1, 2), (1, 2, 0)])
    def test_meta_rejects_bad_values(self, args):
        with pytest.raises(ValueError):
            DatasetMeta(*args)

    def test_label_vector_sorts_and_dedupes(self):
        lv = LabelVector((3, 1, 3, 0))
        assert lv.classes == (0, 1, 3)
        assert 1 in lv and 2 not in lv
        assert lv.as_bits(5).tolist() == [1, 1, 0, 1, 0]

    def test_label_vector_rejects_negative(self):
        with pytest.raises(ValueError):
            LabelVector((-1,))

    def test_instance_features_read_only(self):
        inst = Instance(np.array([1.0, 2.0]), "b", 0)
        with pytest.raises(ValueError):
            inst.features[0] = 9.0

    def test_instance_equality_compares_values(self):
        a = Instance(np.array([1.0, 2.0]), "b", 0, truth_class=1)
        b = Instance(np.array([1.0, 2.0]), "b", 0, truth_class=1)
        c = Instance(np.array([1.0, 2.5]), "b", 0, truth_class=1)
        assert a == b and a != c

    def test_bag_requires_known_role(self):
        with pytest.raises(ValueError):
            make_bag("b", 1, "query", (1,), [[0.0]])

    def test_make_bag_wires_indices(self):
        bag = make_bag("b", 1, "probe", (1,), [[0.0], [1.0]])
        assert [i.index_in_bag for i in bag.instances] == [0, 1]
        assert all(i.bag_id == "b" for i in bag.instances)
        np.testing.assert_array_equal(bag.feature_matrix(), [[0.0], [1.0]])


class TestLoad:
    """Parsing errors name the offending field; validation rejects bad semantics."""

    def test_minimal_file(self, tmp_path):
        ds = load_dataset(write_doc(tmp_path, MINIMAL))
        assert ds.meta.num_total_classes == 2
        assert len(ds.probe) == 1 and len(ds.gallery) == 1
        assert ds.probe[0].label.classes == (1,)

    def test_truth_class_may_be_absent(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        del doc["probe"][0]["instances"][0]["truth_class"]
        ds = load_dataset(write_doc(tmp_path, doc))
        assert ds.probe[0].instances[0].truth_class is None

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"meta": \n!')
        with pytest.raises(DatasetFormatError, match="line 2"):
            load_dataset(path)

    @pytest.mark.parametrize("key", ["meta", "probe", "gallery"])
    def test_missing_top_level_field(self, tmp_path, key):
        doc = json.loads(json.dumps(MINIMAL))
        del doc[key]
        with pytest.raises(DatasetFormatError, match=key):
            load_dataset(write_doc(tmp_path, doc))

    def test_missing_bag_field_named(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        del doc["gallery"][0]["view"]
        with pytest.raises(DatasetFormatError, match=r"gallery\[0\].*view"):
            load_dataset(write_doc(tmp_path, doc))

    def test_non_numeric_features_rejected(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["probe"][0]["instances"][0]["features"] = ["a", "b"]
        with pytest.raises(DatasetFormatError, match="features"):
            load_dataset(write_doc(tmp_path, doc))

    def test_probe_with_two_labels_rejected(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["probe"][0]["labels"] = [1, 2]
        doc["meta"]["num_known_classes"] = 2
        with pytest.raises(DatasetValidationError, match="not single-label"):
            load_dataset(write_doc(tmp_path, doc))


class TestValidate:
    """Semantic rules produce one readable violation each."""

    def test_valid_dataset_empty_report(self):
        assert validate_dataset(tiny_dataset()) == []

    def violated(self, ds):
        report = validate_dataset(ds)
        assert report, "expected violations"
        return "\n".join(report)

    def test_untagged_bag(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 1, "gallery", (), [[0.0, 0.0, 0.0]], [1])
        ds = Dataset(ds.meta, ds.probe, ds.gallery + (bad,))
        assert "no tagged label" in self.violated(ds)

    def test_single_view_class(self):
        meta = DatasetMeta(1, 2, 1)
        probe = (make_bag("p1", 1, "probe", (1,), [[0.0]], [1]),)
        gallery = (make_bag("g1", 1, "gallery", (1,), [[0.1]], [1]),)
        text = self.violated(Dataset(meta, probe, gallery))
        assert "class 1 seen under 1 view" in text

    def test_duplicate_bag_ids(self):
        ds = tiny_dataset()
        dup = make_bag("g1", 1, "gallery", (1,), [[0.0, 0.0, 0.0]], [1])
        assert "duplicate bag id" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (dup,)))

    def test_view_out_of_range(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 3, "gallery", (1,), [[0.0, 0.0, 0.0]], [1])
        assert "view 3 outside" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (bad,)))

    def test_wrong_feature_width(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 1, "gallery", (1,), [[0.0]], [1])
        assert "feature length 1 != 3" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (bad,)))

    def test_label_outside_known_range(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 1, "gallery", (7,), [[0.0, 0.0, 0.0]], [1])
        assert "label 7 outside" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (bad,)))

    def test_class_without_probe_bag(self):
        ds = tiny_dataset()
        assert "class 2 has no probe bag" in self.violated(Dataset(ds.meta, ds.probe[:1], ds.gallery))

    def test_probe_tagged_novel(self):
        meta = DatasetMeta(1, 2, 1)
        probe = (make_bag("p1", 1, "probe", (0,), [[0.0]], [1]),)
        gallery = (make_bag("g1", 2, "gallery", (1,), [[0.1]], [1]),)
        assert "novel class 0" in self.violated(Dataset(meta, probe, gallery))

    def test_empty_bag_flagged(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 1, "gallery", (1,), [])
        assert "no instances" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (bad,)))

    def test_nonfinite_features_flagged(self):
        ds = tiny_dataset()
        bad = make_bag("g3", 1, "gallery", (1,), [[np.inf, 0.0, 0.0]], [1])
        assert "non-finite" in self.violated(Dataset(ds.meta, ds.probe, ds.gallery + (bad,)))


class TestSaveRoundTrip:
    """save -> load is the identity; bytes are stable."""

    def test_round_trip_equality(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.json"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_two_saves_byte_identical(self, tmp_path):
        ds = tiny_dataset()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_dataset(ds, p1)
        save_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_refuses_invalid(self, tmp_path):
        ds = tiny_dataset()
        broken = Dataset(ds.meta, ds.probe[:1], ds.gallery)
        with pytest.raises(DatasetValidationError):
            save_dataset(broken, tmp_path / "bad.json")

    def test_save_unwritable_path_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            save_dataset(tiny_dataset(), tmp_path / "missing" / "ds.json")

    def test_many_class_many_view_round_trip(self, tmp_path):
        n_classes, n_views, d = 631, 6, 4
        rng = np.random.default_rng(0)
        meta = DatasetMeta(n_classes, n_views, d)
        probe, gallery = [], []
        for c in range(1, n_classes + 1):
            v = 1 + (c % n_views)
            w = 1 + ((c + 1) % n_views)
            probe.append(make_bag(f"p{c}", v, "probe", (c,), rng.normal(size=(1, d)), [c]))
            gallery.append(make_bag(f"g{c}", w, "gallery", (c,), rng.normal(size=(1, d)), [c]))
        ds = Dataset(meta, tuple(probe), tuple(gallery))
        assert validate_dataset(ds) == []
        path = tmp_path / "wide.json"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    @given(n_classes=st.integers(1, 3), d=st.integers(1, 3), seed=st.integers(0, 10_000))
    def test_round_trip_random_payload(self, tmp_path_factory, n_classes, d, seed):
        rng = np.random.default_rng(seed)
        meta = DatasetMeta(n_classes, 2, d)
        probe = tuple(
            make_bag(f"p{c}", 1, "probe", (c,), rng.normal(size=(rng.integers(1, 3), d)) * 10.0 ** rng.integers(-8, 8), None)
            for c in range(1, n_classes + 1)
        )
        gallery = tuple(
            make_bag(f"g{c}", 2, "gallery", (c,), rng.normal(size=(rng.integers(1, 3), d)), None)
            for c in range(1, n_classes + 1)
        )
        ds = Dataset(meta, probe, gallery)
        path = tmp_path_factory.mktemp("rt") / "ds.json"
        save_dataset(ds, path)
        assert load_dataset(path) == ds
