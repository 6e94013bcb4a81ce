"""数据生成、CSV 读写与 Dirichlet 划分测试"""

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from dp_fedsam.config import DataConfig, PartitionConfig
from dp_fedsam.data import (
    CsvSchema,
    build_dataset,
    dirichlet_partition,
    label_distance,
    load_csv,
    synth_dataset,
    train_test_split,
    write_csv,
)
from dp_fedsam.errors import DataFormatError, PartitionError
from dp_fedsam.models import ModelSpec
from dp_fedsam.network import evaluate, init_params, loss_and_grad


def _fit_linear_accuracy(train, test, learning_rate, steps=200):
    """全量梯度下降训练线性分类器，返回测试准确率"""
    spec = ModelSpec((train.dims, train.class_count))
    params = init_params(spec, 0)
    batch = train.batch()
    for _ in range(steps):
        _, grad = loss_and_grad(params, batch, spec)
        params = params - learning_rate * grad
    return evaluate(params, test.batch(), spec)[0]


@pytest.fixture
def dataset():
    return synth_dataset(classes=5, dims=4, n=1000, separation=3.0, seed=0)


class TestSynthDataset:
    def test_shapes_and_balance(self, dataset):
        assert dataset.features.shape == (1000, 4)
        assert dataset.label_histogram().tolist() == [200] * 5

    def test_deterministic(self):
        a = synth_dataset(3, 2, 50, 1.0, seed=4)
        b = synth_dataset(3, 2, 50, 1.0, seed=4)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            synth_dataset(5, 2, 3, 1.0, seed=0)

    def test_no_separation_is_chance_level(self):
        train, test = train_test_split(synth_dataset(3, 5, 6000, 0.0, seed=2), 0.5, seed=2)
        assert abs(_fit_linear_accuracy(train, test, 0.1) - 1 / 3) <= 0.05

    def test_large_separation_is_linearly_separable(self):
        train, test = train_test_split(synth_dataset(2, 50, 2000, 10.0, seed=3), 0.5, seed=3)
        assert _fit_linear_accuracy(train, test, 0.01) >= 0.99


class TestTrainTestSplit:
    def test_sizes_and_disjoint(self):
        ds = synth_dataset(3, 4, 900, 3.0, seed=0)
        train, test = train_test_split(ds, 0.2, seed=1)
        assert len(train) == 720 and len(test) == 180
        rows = {tuple(r) for r in train.features} | {tuple(r) for r in test.features}
        assert len(rows) == 900

    def test_invalid_fraction(self, dataset):
        with pytest.raises(ValueError):
            train_test_split(dataset, 1.0, seed=0)


class TestDirichletPartition:
    def test_deterministic(self, dataset):
        cfg = PartitionConfig(num_clients=20, dirichlet_alpha=0.6, seed=3)
        first = dirichlet_partition(dataset, cfg)
        second = dirichlet_partition(dataset, cfg)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.indices, b.indices)

    @pytest.mark.parametrize("alpha", ["iid", 0.1, 0.6, 10.0])
    def test_exact_partition(self, dataset, alpha):
        shards = dirichlet_partition(dataset, PartitionConfig(num_clients=17, dirichlet_alpha=alpha, seed=1))
        assert [s.client_id for s in shards] == list(range(17))
        assert all(len(s) > 0 for s in shards)
        combined = np.concatenate([s.indices for s in shards])
        assert combined.size == len(dataset)
        np.testing.assert_array_equal(np.sort(combined), np.arange(len(dataset)))

    def test_iid_label_proportions(self, dataset):
        shards = dirichlet_partition(dataset, PartitionConfig(num_clients=10, dirichlet_alpha="iid"))
        table = np.array([dataset.label_histogram(s.indices) for s in shards])
        assert [len(s) for s in shards] == [100] * 10
        _, p_value, _, _ = chi2_contingency(table)
        assert p_value > 0.01

    def test_huge_alpha_is_close_to_iid(self, dataset):
        shards = dirichlet_partition(dataset, PartitionConfig(num_clients=10, dirichlet_alpha=1e6))
        assert label_distance(dataset, shards) < 0.02

    def test_smaller_alpha_is_more_heterogeneous(self, dataset):
        def mean_distance(alpha):
            return np.mean([
                label_distance(dataset, dirichlet_partition(
                    dataset, PartitionConfig(num_clients=10, dirichlet_alpha=alpha, seed=seed)
                ))
                for seed in range(20)
            ])

        assert mean_distance(0.3) > mean_distance(0.6)

    def test_empty_shards_are_repaired(self):
        ds = synth_dataset(classes=2, dims=2, n=12, separation=1.0, seed=0)
        shards = dirichlet_partition(ds, PartitionConfig(num_clients=12, dirichlet_alpha=0.01, seed=5))
        assert all(len(s) == 1 for s in shards)

    def test_more_clients_than_samples(self):
        ds = synth_dataset(classes=2, dims=2, n=5, separation=1.0, seed=0)
        with pytest.raises(PartitionError):
            dirichlet_partition(ds, PartitionConfig(num_clients=6))


class TestCsv:
    def test_round_trip(self, tmp_path, dataset):
        path = tmp_path / "data.csv"
        write_csv(path, dataset)
        loaded = load_csv(path, CsvSchema(feature_count=4))
        np.testing.assert_array_equal(loaded.features, dataset.features)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        assert loaded.class_count == 5

    def test_labels_reindexed(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x,y,label\n1,2,10\n3,4,2\n5,6,10\n", encoding="utf-8")
        ds = load_csv(path, CsvSchema(feature_count=2))
        assert ds.labels.tolist() == [1, 0, 1]
        assert ds.class_count == 2

    def test_non_numeric_feature(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("f0,f1,label\n1,2,0\n3,abc,1\n", encoding="utf-8")
        with pytest.raises(DataFormatError) as info:
            load_csv(path, CsvSchema(feature_count=2))
        assert info.value.line == 3

    def test_unknown_label(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("f0,label\n1,a\n2,c\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="未知标签"):
            load_csv(path, CsvSchema(feature_count=1, classes=("a", "b")))

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("f0,f1\n1,2\n", encoding="utf-8")
        with pytest.raises(DataFormatError) as info:
            load_csv(path, CsvSchema(feature_count=2))
        assert info.value.line == 1

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("f0,f1,label\n1,2,0\n1,0\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="第 3 行"):
            load_csv(path, CsvSchema(feature_count=2))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_csv(tmp_path / "nope.csv", CsvSchema(feature_count=2))

    def test_build_dataset_from_csv(self, tmp_path, dataset):
        path = tmp_path / "data.csv"
        write_csv(path, dataset)
        ds = build_dataset(DataConfig(source="csv", csv_path=str(path), dims=4, classes=5))
        assert len(ds) == 1000
