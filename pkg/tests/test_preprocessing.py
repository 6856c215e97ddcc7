from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from schemas.dataset import AttributeSchema, AttributeTable, RawRecord
from utils.errors import DataError
from utils.preprocessing import (
    align_attributes,
    apply_cutoff,
    build_dataset,
    dataset_statistics,
    kcore_filter,
    numeric_ranges,
    sample_eval_negatives,
    split_leave_one_out,
    split_users,
    standardize,
    training_sequence,
    user_rng,
)


def _random_records(seed=0, n=600):
    rng = np.random.default_rng(seed)
    users = rng.integers(40, size=n)
    items = rng.zipf(1.6, size=n) % 50
    return [RawRecord(user_id=f"u{u}", item_id=f"i{i}", timestamp=t) for t, (u, i) in enumerate(zip(users, items))]


class TestKcore:
    def test_fixpoint_holds(self):
        kept = kcore_filter(_random_records(), 5)
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        assert min(users.values()) >= 5
        assert min(items.values()) >= 5

    def test_keeps_input_order(self):
        records = _random_records()
        kept = kcore_filter(records, 3)
        positions = [records.index(r) for r in kept]
        assert positions == sorted(positions)

    def test_empty_result_is_a_data_error(self, toy_records):
        with pytest.raises(DataError):
            kcore_filter(toy_records, 10)


class TestBuildDataset:
    def test_sequences_sorted_by_time(self, toy_dataset):
        assert toy_dataset.item_vocab == ["a", "b", "c", "d", "e", "f"]
        assert toy_dataset.sequences == [[5, 6, 4, 7], [5, 8, 4], [9, 4]]

    def test_ties_keep_input_order(self):
        records = [RawRecord(user_id="u", item_id=i, timestamp=1) for i in "xyz"]
        assert build_dataset(records).sequences == [[4, 5, 6]]

    def test_popularity_counts_training_items_only(self, toy_dataset):
        assert toy_dataset.popularity == [0, 0, 0, 0, 1, 2, 1, 0, 0, 1]

    def test_cutoff(self, toy_records):
        kept = apply_cutoff(toy_records, 5)
        assert {r.user_id for r in kept} == {"u2"}
        with pytest.raises(DataError):
            apply_cutoff(toy_records, 100)

    def test_training_sequence(self):
        assert training_sequence([1, 2, 3, 4]) == [1, 2]
        assert training_sequence([1, 2]) == [1, 2]


class TestLeaveOneOut:
    def test_reconstruction(self, toy_dataset):
        split = split_leave_one_out(toy_dataset)
        assert split.users == [0, 1]
        assert split.excluded == [2]
        for pos, u in enumerate(split.users):
            assert split.prefixes[pos] + [split.valid[pos], split.test[pos]] == toy_dataset.sequences[u]
            assert split.test_prefix(pos) == toy_dataset.sequences[u][:-1]


class TestNegativeSampling:
    def test_excludes_target_and_history(self):
        popularity = [0, 0, 0, 0] + [5] * 30
        history = [4, 5, 6]
        negatives = sample_eval_negatives(7, popularity, 20, history, user_rng(1, 2))
        assert len(set(negatives)) == 20
        assert not set(negatives) & {7, 4, 5, 6, 0, 1, 2, 3}

    def test_deterministic_per_user(self):
        popularity = [0, 0, 0, 0] + list(range(1, 41))
        a = sample_eval_negatives(10, popularity, 15, [], user_rng(3, 9))
        b = sample_eval_negatives(10, popularity, 15, [], user_rng(3, 9))
        assert a == b

    def test_not_enough_items(self):
        popularity = [0, 0, 0, 0, 3, 3, 3]
        with pytest.raises(DataError):
            sample_eval_negatives(4, popularity, 5, [], user_rng(0, 0))

    def test_frequencies_follow_popularity(self):
        popularity = np.array([0, 0, 0, 0, 10, 20, 30, 40])
        rng = np.random.default_rng(0)
        draws = [sample_eval_negatives(4, popularity, 1, [], rng)[0] for _ in range(4000)]
        observed = np.array([draws.count(i) for i in (5, 6, 7)])
        expected = 4000 * np.array([20, 30, 40]) / 90
        assert chisquare(observed, expected).pvalue > 0.001


class TestAttributes:
    def test_align(self, toy_dataset, mixed_schema):
        raw = {"u1": {"stars": 4.0, "level": 2}, "u3": {"level": 0}}
        table = align_attributes(raw, mixed_schema, toy_dataset)
        assert table.numeric[0, 0] == 4.0
        assert np.isnan(table.numeric[1, 0]) and np.isnan(table.numeric[2, 0])
        assert table.discrete[:, 0].tolist() == [2, -1, 0]

    def test_align_rejects_out_of_range_class(self, toy_dataset, mixed_schema):
        with pytest.raises(ValueError):
            align_attributes({"u1": {"level": 3}}, mixed_schema, toy_dataset)

    def test_standardize(self, mixed_attributes, mixed_schema):
        table, constants = standardize(mixed_attributes, mixed_schema)
        assert constants["stars"][0] == pytest.approx(3.0)
        present = table.numeric[~np.isnan(table.numeric)]
        assert present.mean() == pytest.approx(0.0)
        assert present.std() == pytest.approx(1.0)
        np.testing.assert_array_equal(table.discrete, mixed_attributes.discrete)

    def test_standardize_constant_column(self):
        schema = AttributeSchema(numeric_names=["x"])
        table, constants = standardize(AttributeTable(np.full((3, 1), 2.0), np.empty((3, 0))), schema)
        assert constants["x"] == (2.0, 1.0)
        np.testing.assert_array_equal(table.numeric, np.zeros((3, 1)))

    def test_reuses_given_constants(self, mixed_attributes, mixed_schema):
        table, constants = standardize(mixed_attributes, mixed_schema, constants={"stars": (1.0, 2.0)})
        assert constants == {"stars": (1.0, 2.0)}
        assert table.numeric[1, 0] == pytest.approx(1.0)

    def test_numeric_ranges(self, mixed_attributes):
        np.testing.assert_allclose(numeric_ranges(mixed_attributes), [4.0])


def test_split_users_partitions(toy_dataset):
    train, holdout = split_users(toy_dataset, 0.34, seed=0)
    assert len(holdout) == 1
    assert sorted(train + holdout) == [0, 1, 2]
    assert split_users(toy_dataset, 0.34, seed=0) == (train, holdout)


def test_dataset_statistics(toy_dataset):
    stats = dataset_statistics(toy_dataset, num_edges=2)
    assert (stats.users, stats.items, stats.rels, stats.interactions) == (3, 6, 2, 9)
    assert stats.avg_sequence_length == 3.0
    assert "#Users 3" in stats.table_line()
