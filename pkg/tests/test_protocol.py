import numpy as np
import pytest

from ozsl import protocol as proto
from ozsl.errors import ValidationError
from ozsl.sampling import UNKNOWN_LABEL


class TestSynthetic:
    def test_counts_exact(self):
        spec = proto.SyntheticSpec(classes=5, per_class=7, embedding_dim=3,
                                   feature_dim=6, seed=1)
        ds = proto.generate_synthetic(spec)
        assert ds.features.shape == (35, 6)
        assert len(ds.labels) == 35
        assert len(ds.class_names) == 5
        assert ds.embeddings.shape == (5, 3)
        for name in ds.class_names:
            assert ds.labels.count(name) == 7

    def test_empirical_means_match_construction(self):
        # Monte-Carlo oracle: class means within 4*spread/sqrt(n) of each other
        # across two independent instance draws of the same construction
        spec = proto.SyntheticSpec(classes=4, per_class=4000, embedding_dim=2,
                                   feature_dim=5, spread=1.0, seed=3)
        ds = proto.generate_synthetic(spec)
        labels = np.asarray(ds.labels)
        bound = 4.0 * spec.spread / np.sqrt(spec.per_class)
        means = proto.true_class_means(spec)
        for name in ds.class_names:
            emp = ds.features[labels == name].mean(axis=0)
            np.testing.assert_allclose(emp, means[name], atol=bound)

    def test_two_seeds_differ(self):
        a = proto.generate_synthetic(proto.SyntheticSpec(seed=0))
        b = proto.generate_synthetic(proto.SyntheticSpec(seed=1))
        assert not np.array_equal(a.features, b.features)

    def test_same_seed_identical(self):
        a = proto.generate_synthetic(proto.SyntheticSpec(seed=4))
        b = proto.generate_synthetic(proto.SyntheticSpec(seed=4))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)

    def test_features_nonnegative(self):
        ds = proto.generate_synthetic(proto.SyntheticSpec(seed=5))
        assert ds.features.min() > 0.0

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            proto.SyntheticSpec(classes=0).validate()
        with pytest.raises(ValidationError):
            proto.SyntheticSpec(spread=-1.0).validate()


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        ds = proto.generate_synthetic(proto.SyntheticSpec(classes=3, per_class=4, seed=6))
        proto.save_dataset(tmp_path / "d", ds)
        back = proto.load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.embeddings, ds.embeddings)
        assert back.labels == ds.labels
        assert back.class_names == ds.class_names

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            proto.load_dataset(tmp_path)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            proto.Dataset(features=np.zeros((0, 2)), labels=[], class_names=[],
                          embeddings=np.zeros((0, 2))).validate()

    def test_duplicate_class_rejected(self):
        with pytest.raises(ValidationError):
            proto.Dataset(features=np.zeros((1, 2)), labels=["a"],
                          class_names=["a", "a"],
                          embeddings=np.zeros((2, 2))).validate()

    def test_reserved_names_rejected(self):
        with pytest.raises(ValidationError):
            proto.Dataset(features=np.zeros((1, 2)), labels=[UNKNOWN_LABEL],
                          class_names=[UNKNOWN_LABEL],
                          embeddings=np.zeros((1, 2))).validate()


class TestMakeSplit:
    def test_regime_cardinalities_ten_classes(self):
        base = [f"u{i}" for i in range(10)]
        m = proto.make_split({"s0"}, base, "20-80", seed=0)
        assert len(m.unseen) == 2 and len(m.unknown) == 8
        m = proto.make_split({"s0"}, base, "80-20", seed=0)
        assert len(m.unseen) == 8 and len(m.unknown) == 2
        m = proto.make_split({"s0"}, base, "50-50", seed=0)
        assert len(m.unseen) == 5 and len(m.unknown) == 5

    def test_ceil_rounding(self):
        base = [f"u{i}" for i in range(7)]
        m = proto.make_split({"s"}, base, "20-80", seed=1)
        assert len(m.unseen) == 2  # ceil(0.2 * 7)

    def test_deterministic(self):
        base = [f"u{i}" for i in range(9)]
        a = proto.make_split({"s"}, base, "50-50", seed=3)
        b = proto.make_split({"s"}, base, "50-50", seed=3)
        assert a == b

    def test_validation(self):
        with pytest.raises(ValidationError):
            proto.make_split({"s"}, ["u0"], "50-50")
        with pytest.raises(ValidationError):
            proto.make_split({"s"}, ["s", "u0"], "50-50")
        with pytest.raises(ValidationError):
            proto.make_split({"s"}, ["u0", "u1"], "30-70")


class TestManifestFiles:
    def test_round_trip(self, tmp_path):
        m = proto.make_split({"s0", "s1"}, ["u0", "u1", "u2"], "50-50", seed=2)
        path = tmp_path / "m.txt"
        proto.save_manifest(path, m)
        back = proto.load_manifest(path)
        assert back.regime == m.regime
        assert back.seen == m.seen and back.unseen == m.unseen
        assert back.unknown == m.unknown

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("no regime header\n")
        with pytest.raises(ValidationError):
            proto.load_manifest(p)
        p.write_text("regime 50-50 canonical\nclass_x mystery\n")
        with pytest.raises(ValidationError):
            proto.load_manifest(p)

    def test_canonical_awa_20_80(self):
        path = proto.canonical_manifest_path("AWA", "20-80")
        m = proto.load_manifest(path)
        assert m.unseen == {"horse", "blue+whale"}
        assert m.unknown == {"sheep", "seal", "bat", "giraffe", "rat",
                             "bobcat", "walrus", "dolphin"}
        assert len(m.seen) == 40
        assert m.provenance == "canonical"

    def test_canonical_awa_80_20(self):
        m = proto.load_manifest(proto.canonical_manifest_path("AWA", "80-20"))
        assert m.unknown == {"bat", "giraffe"}
        assert len(m.unseen) == 8


class TestApplyManifest:
    def setup_case(self, test_fraction=0.25):
        ds = proto.generate_synthetic(proto.SyntheticSpec(classes=6, per_class=8, seed=7))
        names = ds.class_names
        manifest = proto.SplitManifest(
            regime="50-50",
            seen=set(names[:3]),
            unseen=set(names[3:5]),
            unknown={names[5]},
        )
        train, test = proto.apply_manifest(ds, manifest, test_fraction=test_fraction, seed=8)
        return ds, manifest, train, test

    def test_instance_conservation(self):
        ds, _, train, test = self.setup_case()
        assert train.features.shape[0] + test.features.shape[0] == ds.features.shape[0]

    def test_train_embeddings_cover_seen_and_unseen_only(self):
        _, manifest, train, _ = self.setup_case()
        assert set(train.embeddings) == manifest.seen | manifest.unseen

    def test_no_unknown_leaks_into_train_view(self):
        ds, manifest, train, _ = self.setup_case()
        unknown = next(iter(manifest.unknown))
        assert unknown not in train.labels
        assert unknown not in train.embeddings
        # bit-level scan: the unknown class's embedding row must not appear
        row = ds.embedding_of(unknown)
        for emb in train.embeddings.values():
            assert not np.array_equal(emb, row)
        blob = train.features.tobytes() + np.vstack(list(train.embeddings.values())).tobytes()
        assert row.tobytes() not in blob

    def test_unknown_truths_masked(self):
        _, manifest, _, test = self.setup_case()
        unknown = next(iter(manifest.unknown))
        assert unknown not in test.truths
        assert UNKNOWN_LABEL in test.truths

    def test_all_unseen_and_unknown_instances_in_test(self):
        ds, manifest, train, test = self.setup_case()
        per_class = 8
        n_unseen_unknown = (len(manifest.unseen) + len(manifest.unknown)) * per_class
        n_seen_test = sum(1 for t in test.truths if t in manifest.seen)
        assert len(test.truths) == n_unseen_unknown + n_seen_test
        assert n_seen_test == len(manifest.seen) * 2  # round(0.25 * 8)

    def test_manifest_dataset_mismatch(self):
        ds = proto.generate_synthetic(proto.SyntheticSpec(classes=3, per_class=4, seed=9))
        manifest = proto.SplitManifest(regime="50-50", seen={"ghost"},
                                       unseen={ds.class_names[0]}, unknown=set())
        with pytest.raises(ValidationError):
            proto.apply_manifest(ds, manifest)
