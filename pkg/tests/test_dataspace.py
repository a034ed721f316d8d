from __future__ import annotations

import numpy as np
import pytest

from mia_audit import dataspace
from mia_audit.dataspace import (
    ClassDropSpec,
    LabeledDataset,
    SynthConfig,
    datasets_equal,
    drop_classes,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
    subsample_per_class,
)
from mia_audit.errors import DataFormatError


class TestSynthetic:
    def test_zero_noise_points_sit_on_the_sphere(self):
        cfg = SynthConfig(classes=2, feature_dim=2, per_class=1, mean_radius=1.0, spread_min=0.0, spread_max=0.0, seed=0)
        data = generate_synthetic(cfg)
        norms = np.linalg.norm(data.features, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_same_seed_same_bytes(self):
        cfg = SynthConfig(classes=3, feature_dim=4, per_class=10, seed=7)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = generate_synthetic(SynthConfig(classes=2, feature_dim=3, per_class=5, seed=0))
        b = generate_synthetic(SynthConfig(classes=2, feature_dim=3, per_class=5, seed=1))
        assert not np.array_equal(a.features, b.features)

    def test_per_class_counts(self):
        data = generate_synthetic(SynthConfig(classes=4, feature_dim=2, per_class=25, seed=0))
        for c in range(4):
            assert data.class_rows(c).size == 25

    def test_heterogeneous_spreads(self):
        # Classes draw different noise scales, so per-class scatter differs.
        data = generate_synthetic(SynthConfig(classes=6, feature_dim=8, per_class=200, spread_min=0.3, spread_max=1.5, seed=1))
        scales = []
        for c in range(6):
            rows = data.features[data.class_rows(c)]
            scales.append(rows.std(axis=0).mean())
        assert max(scales) / min(scales) > 1.5


class TestDatasetValidation:
    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), class_count=2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.array([[np.nan, 0.0]]), np.array([0]), class_count=1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), class_count=1)


class TestSplit:
    def test_partition_is_disjoint_and_complete(self):
        data = generate_synthetic(SynthConfig(classes=3, feature_dim=2, per_class=40, seed=0))
        parts = split(data, [0.5, 0.25, 0.25], seed=1)
        all_idx = []
        for p in parts:
            # recover row identity through feature equality
            assert p.class_count == data.class_count
            all_idx.append(p.size)
        assert sum(all_idx) == data.size
        stacked = np.vstack([p.features for p in parts])
        assert np.array_equal(np.sort(stacked, axis=0), np.sort(data.features, axis=0))

    def test_per_class_counts_within_one(self):
        data = generate_synthetic(SynthConfig(classes=5, feature_dim=2, per_class=33, seed=2))
        fracs = [0.5, 0.3, 0.2]
        parts = split(data, fracs, seed=3)
        for j, p in enumerate(parts):
            for c in range(5):
                got = p.class_rows(c).size
                assert abs(got - fracs[j] * 33) <= 1.0

    def test_seeded_determinism(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=20, seed=0))
        a = split(data, [0.5, 0.5], seed=9)
        b = split(data, [0.5, 0.5], seed=9)
        for pa, pb in zip(a, b):
            assert datasets_equal(pa, pb)

    def test_fraction_sum_above_one_rejected(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=10, seed=0))
        with pytest.raises(ValueError):
            split(data, [0.7, 0.7], seed=0)

    def test_nonpositive_fraction_rejected(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=10, seed=0))
        with pytest.raises(ValueError):
            split(data, [0.5, 0.0], seed=0)

    def test_partial_fractions_discard_remainder(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=100, seed=0))
        (part,) = split(data, [0.25], seed=0)
        assert part.size == 50


class TestDropClasses:
    def test_rows_filtered_labels_unchanged(self):
        data = generate_synthetic(SynthConfig(classes=4, feature_dim=2, per_class=10, seed=0))
        dropped = drop_classes(data, ClassDropSpec(frozenset({1, 2})))
        assert dropped.class_count == 4  # label space untouched
        assert set(dropped.present_classes()) == {0, 3}
        assert dropped.size == 20

    def test_cannot_drop_everything(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=5, seed=0))
        with pytest.raises(ValueError):
            drop_classes(data, ClassDropSpec(frozenset({0, 1})))

    def test_invalid_label_rejected(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=5, seed=0))
        with pytest.raises(ValueError):
            drop_classes(data, ClassDropSpec(frozenset({5})))


class TestSubsample:
    def test_k_one_keeps_one_per_class(self):
        data = generate_synthetic(SynthConfig(classes=5, feature_dim=2, per_class=11, seed=0))
        sub = subsample_per_class(data, 1, seed=0)
        assert sub.size == 5
        for c in range(5):
            assert sub.class_rows(c).size == 1

    def test_k_at_or_above_size_is_identity(self):
        data = generate_synthetic(SynthConfig(classes=3, feature_dim=2, per_class=7, seed=0))
        sub = subsample_per_class(data, 7, seed=1)
        assert datasets_equal(sub, data)
        sub2 = subsample_per_class(data, 99, seed=1)
        assert datasets_equal(sub2, data)

    def test_seeded(self):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=2, per_class=50, seed=0))
        a = subsample_per_class(data, 5, seed=3)
        b = subsample_per_class(data, 5, seed=3)
        c = subsample_per_class(data, 5, seed=4)
        assert datasets_equal(a, b)
        assert not datasets_equal(a, c)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        data = generate_synthetic(SynthConfig(classes=3, feature_dim=4, per_class=6, seed=5))
        path = tmp_path / "d.ds"
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert datasets_equal(data, loaded)

    def test_format_shape(self, tmp_path):
        data = generate_synthetic(SynthConfig(classes=2, feature_dim=3, per_class=2, seed=0))
        path = tmp_path / "d.ds"
        save_dataset(data, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "4 3 2"
        assert len(lines) == 5
        raw = path.read_bytes()
        assert b"\r" not in raw
        for line in lines:
            assert line == line.rstrip()

    @pytest.mark.parametrize(
        "content,fragment",
        [
            ("", "empty"),
            ("1 2\n0.0 0.0 0\n", "header"),
            ("1 2 2\n0.0 0.0 5\n", "label"),
            ("1 2 2\n0.0 nan 0\n", "non-finite"),
            ("2 2 2\n0.0 0.0 0\n", "rows"),
            ("1 2 2\n0.0 zz 0\n", "non-numeric"),
            ("0 2 2\n", "positive"),
        ],
    )
    def test_malformed_files_raise_with_location(self, tmp_path, content, fragment):
        path = tmp_path / "bad.ds"
        path.write_text(content)
        with pytest.raises(DataFormatError, match=fragment):
            load_dataset(path)
