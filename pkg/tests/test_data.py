import hashlib
import math

import numpy as np
import pytest

from backend.src.errors import ConfigError, DataFormatError
from backend.src.processing.data import (
    MultiLabelDataset,
    SyntheticSpec,
    generate_id,
    generate_ood,
    id_feature_scale,
    joint_energy_sanity_logits,
    load_csv,
    load_logits_csv,
    load_scores_csv,
    prototypes,
    save_csv,
    split_by_counts,
    split_dataset,
    write_scores_csv,
)
from backend.src.processing.metrics import ScoreSet, auroc


def small_spec(**overrides):
    values = dict(num_labels=4, input_dim=6, samples=300, seed=11)
    values.update(overrides)
    return SyntheticSpec(**values)


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestSyntheticSpec:
    @pytest.mark.parametrize(
        "field, value",
        [
            ("label_prob", 1.5),
            ("label_prob", 0.0),
            ("num_labels", 0),
            ("samples", 2.5),
            ("noise_sigma", 0.0),
            ("prototype_scale", -1.0),
            ("ood_mode", "rotate"),
            ("shift_magnitude", -0.5),
            ("seed", -1),
        ],
    )
    def test_rejects_out_of_range(self, field, value):
        with pytest.raises(ConfigError, match=field):
            small_spec(**{field: value})


class TestGenerateId:
    def test_same_seed_same_data(self):
        a, b = generate_id(small_spec()), generate_id(small_spec())
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a, b = generate_id(small_spec(seed=1)), generate_id(small_spec(seed=2))
        assert not np.array_equal(a.features, b.features)

    def test_shapes_and_label_vectors(self):
        dataset = generate_id(small_spec())
        assert dataset.features.shape == (300, 6)
        assert dataset.labels.shape == (300, 4)
        assert dataset.labels.dtype == np.int8
        assert np.all(dataset.labels.sum(axis=1) >= 1)
        assert "seed=11" in dataset.provenance

    def test_prototypes_do_not_depend_on_sample_count(self):
        np.testing.assert_array_equal(prototypes(small_spec(samples=10)), prototypes(small_spec(samples=500)))

    def test_features_follow_active_prototypes(self):
        spec = small_spec(samples=4000, noise_sigma=0.1)
        dataset = generate_id(spec)
        residual = dataset.features - dataset.labels.astype(np.float64) @ prototypes(spec)
        assert np.std(residual) == pytest.approx(0.1, rel=0.05)

    def test_label_frequency(self):
        labels = generate_id(small_spec(samples=5000, label_prob=0.3)).labels
        # rows without labels are redrawn, which lifts the marginal above label_prob
        p = 0.3 / (1.0 - 0.7**4)
        assert labels.mean() == pytest.approx(p, abs=0.02)

    def test_every_label_rate_at_default_scale(self):
        spec = SyntheticSpec(num_labels=10, input_dim=32, samples=2000, label_prob=0.3,
                             noise_sigma=0.5, prototype_scale=2.0, seed=7)
        rates = generate_id(spec).labels.mean(axis=0)
        assert rates.shape == (10,)
        assert np.all((rates >= 0.25) & (rates <= 0.36))


class TestGenerateOod:
    def test_uniform_box(self):
        spec = small_spec(ood_mode="uniform")
        ood = generate_ood(spec, samples=2000)
        bound = math.sqrt(3.0) * id_feature_scale(spec)
        assert np.all(np.abs(ood.features) <= bound)
        assert np.std(ood.features) == pytest.approx(id_feature_scale(spec), rel=0.05)
        assert not ood.labels.any()

    def test_sparse_label_has_one_active_label(self):
        ood = generate_ood(small_spec(ood_mode="sparse-label"), samples=200)
        np.testing.assert_array_equal(ood.labels.sum(axis=1), np.ones(200))

    def test_shift_moves_prototypes(self):
        spec = small_spec(ood_mode="shift", shift_magnitude=4.0, noise_sigma=0.1)
        ood = generate_ood(spec, samples=500)
        residual = ood.features - ood.labels.astype(np.float64) @ prototypes(spec)
        assert np.mean(np.linalg.norm(residual, axis=1)) > 2.0

    def test_zero_shift_matches_id_distribution(self):
        spec = small_spec(ood_mode="shift", shift_magnitude=0.0, noise_sigma=0.1)
        ood = generate_ood(spec, samples=500)
        residual = ood.features - ood.labels.astype(np.float64) @ prototypes(spec)
        assert np.std(residual) == pytest.approx(0.1, rel=0.1)

    def test_zero_shift_is_indistinguishable(self):
        spec = SyntheticSpec(num_labels=10, input_dim=32, samples=500, seed=7, ood_mode="shift", shift_magnitude=0.0)
        id_norms = np.linalg.norm(generate_id(spec).features, axis=1)
        ood_norms = np.linalg.norm(generate_ood(spec).features, axis=1)
        assert auroc(ScoreSet(-id_norms, -ood_norms)) == pytest.approx(0.5, abs=0.05)

    def test_sample_count_override_and_determinism(self):
        a = generate_ood(small_spec(), samples=37)
        b = generate_ood(small_spec(), samples=37)
        assert len(a) == 37
        np.testing.assert_array_equal(a.features, b.features)

    def test_ood_stream_differs_from_id(self):
        spec = small_spec()
        assert not np.array_equal(generate_id(spec).features[:10], generate_ood(spec).features[:10])


class TestSplits:
    def test_default_fractions(self):
        dataset = split_dataset(generate_id(small_spec(samples=1000)), seed=5)
        sizes = {tag: len(dataset.subset(tag)) for tag in ("train", "val", "test")}
        assert sizes == {"train": 700, "val": 100, "test": 200}

    def test_tags_are_a_seeded_permutation(self):
        base = generate_id(small_spec())
        a, b = split_dataset(base, seed=3), split_dataset(base, seed=3)
        np.testing.assert_array_equal(a.split, b.split)
        assert not np.array_equal(a.split, split_dataset(base, seed=4).split)

    def test_subset_keeps_rows_intact(self):
        base = split_dataset(generate_id(small_spec()), seed=1)
        val = base.subset("val")
        mask = base.split == "val"
        np.testing.assert_array_equal(val.features, base.features[mask])
        assert val.provenance.endswith("[val]")

    def test_exact_counts(self):
        dataset = split_by_counts(generate_id(small_spec(samples=50)), (30, 5, 15), seed=0)
        assert [len(dataset.subset(t)) for t in ("train", "val", "test")] == [30, 5, 15]

    @pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.6, 0.3, 0.3), (1.2, -0.1, -0.1)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ConfigError, match="fractions"):
            split_dataset(generate_id(small_spec()), fractions)

    def test_counts_must_partition(self):
        with pytest.raises(ConfigError, match="partition"):
            split_by_counts(generate_id(small_spec(samples=50)), (30, 5, 10))

    def test_unsplit_dataset(self):
        with pytest.raises(ConfigError, match="split"):
            generate_id(small_spec()).subset("train")


class TestDatasetValidation:
    def test_row_count_mismatch(self):
        with pytest.raises(DataFormatError, match="row count mismatch"):
            MultiLabelDataset(np.zeros((3, 2)), np.zeros((4, 1)))

    def test_labels_must_be_binary(self):
        with pytest.raises(DataFormatError, match="0/1"):
            MultiLabelDataset(np.zeros((2, 2)), np.array([[0], [2]]))


class TestCsv:
    def test_exact_reload_and_checksums(self, tmp_path):
        dataset = generate_id(small_spec(samples=40))
        features, labels = tmp_path / "x.csv", tmp_path / "y.csv"
        checksums = save_csv(dataset, features, labels)
        assert checksums[0] == hashlib.sha256(features.read_bytes()).hexdigest()

        loaded = load_csv(features, labels)
        np.testing.assert_array_equal(loaded.features, dataset.features)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        assert features.read_text().splitlines()[0] == "x0,x1,x2,x3,x4,x5"

    def test_same_dataset_same_bytes(self, tmp_path):
        dataset = generate_id(small_spec(samples=20))
        first = save_csv(dataset, tmp_path / "a_x.csv", tmp_path / "a_y.csv")
        second = save_csv(dataset, tmp_path / "b_x.csv", tmp_path / "b_y.csv")
        assert first == second

    def test_headerless_file(self, tmp_path):
        dataset = load_csv(write_text(tmp_path / "x.csv", "1,2\n3,4.5\n"))
        np.testing.assert_array_equal(dataset.features, [[1.0, 2.0], [3.0, 4.5]])
        assert dataset.num_labels == 0

    def test_non_numeric_cell_is_located(self, tmp_path):
        path = write_text(tmp_path / "x.csv", "x0,x1\n1,2\n3,abc\n")
        with pytest.raises(DataFormatError, match=r"row 3, column 2: non-numeric cell 'abc'"):
            load_csv(path)

    def test_short_row(self, tmp_path):
        path = write_text(tmp_path / "x.csv", "1,2\n3\n")
        with pytest.raises(DataFormatError, match=r"row 2, column 2"):
            load_csv(path)

    def test_long_row(self, tmp_path):
        path = write_text(tmp_path / "x.csv", "1,2\n3,4,5\n")
        with pytest.raises(DataFormatError, match="ragged"):
            load_csv(path)

    def test_row_count_mismatch_names_both_files(self, tmp_path):
        features = write_text(tmp_path / "x.csv", "1,2\n3,4\n")
        labels = write_text(tmp_path / "y.csv", "1\n")
        with pytest.raises(DataFormatError, match="x.csv has 2 rows"):
            load_csv(features, labels)

    def test_non_binary_label(self, tmp_path):
        features = write_text(tmp_path / "x.csv", "1,2\n3,4\n")
        labels = write_text(tmp_path / "y.csv", "0,1\n1,3\n")
        with pytest.raises(DataFormatError, match="row 2, column 2"):
            load_csv(features, labels)

    def test_non_binary_label_row_counts_the_header(self, tmp_path):
        features = write_text(tmp_path / "x.csv", "x0,x1\n1,2\n3,4\n")
        labels = write_text(tmp_path / "y.csv", "y0,y1\n0,1\n1,3\n")
        with pytest.raises(DataFormatError, match=r"y.csv: row 3, column 2: label must be 0 or 1"):
            load_csv(features, labels)

    @pytest.mark.parametrize("text, message", [("", "empty"), ("x0,x1\n", "no data rows")])
    def test_empty_files(self, tmp_path, text, message):
        with pytest.raises(DataFormatError, match=message):
            load_csv(write_text(tmp_path / "x.csv", text))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataFormatError, match="nope.csv"):
            load_csv(tmp_path / "nope.csv")

    def test_infinite_logits_rejected(self, tmp_path):
        with pytest.raises(DataFormatError, match="Inf"):
            load_logits_csv(write_text(tmp_path / "z.csv", "1,inf\n"))


class TestScoreFiles:
    def test_scores_reload_exactly(self, tmp_path):
        scores = np.array([0.1, 1.0 / 3.0, -2.5e-300, 7.0])
        path = tmp_path / "scores.csv"
        checksum = write_scores_csv(scores, path)
        assert checksum == hashlib.sha256(path.read_bytes()).hexdigest()
        assert path.read_text().splitlines()[0] == "score"
        np.testing.assert_array_equal(load_scores_csv(path), scores)

    def test_decision_column(self, tmp_path):
        path = tmp_path / "decisions.csv"
        write_scores_csv([1.0, 2.0], path, decisions=["out", "in"])
        assert path.read_text().splitlines() == ["score,decision", "1,out", "2,in"]

    def test_score_file_needs_one_column(self, tmp_path):
        with pytest.raises(DataFormatError, match="single score column"):
            load_scores_csv(write_text(tmp_path / "s.csv", "1,2\n"))


class TestSanityLogits:
    def test_shared_noise_keeps_max_logits_equal(self):
        id_logits, ood_logits = joint_energy_sanity_logits(num_labels=10, samples=500, noise=0.1, seed=0)
        assert id_logits.shape == ood_logits.shape == (500, 10)
        np.testing.assert_allclose(id_logits.max(axis=1), ood_logits.max(axis=1))
        np.testing.assert_allclose(np.sort(ood_logits, axis=1)[:, :-1] + 4.0, id_logits[:, :-1])

    def test_seeded(self):
        a = joint_energy_sanity_logits(seed=3)
        b = joint_energy_sanity_logits(seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
