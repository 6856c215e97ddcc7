import json

import pytest

from utils.data_loader import YELP_SCHEMA, compliment_level, load_tsv, load_yelp, symmetric_edges
from utils.errors import DataError


class TestYelp:
    def test_records_and_skips(self, yelp_files):
        result = load_yelp(*yelp_files)
        assert len(result.records) == 30
        assert result.skipped == 1
        assert result.skipped_by_file[str(yelp_files[0])] == 1
        assert result.schema == YELP_SCHEMA

    def test_dates_become_epoch_seconds(self, yelp_files):
        result = load_yelp(*yelp_files)
        first = next(r for r in result.records if r.user_id == "user0" and r.item_id == "biz0")
        # 2019-01-10 10:00:00 UTC
        assert first.timestamp == 1547114400

    def test_friends_are_undirected(self, yelp_files):
        result = load_yelp(*yelp_files)
        assert len(result.edges) == 12
        assert all(a < b for a, b in result.edges)

    def test_compliment_attributes(self, yelp_files):
        result = load_yelp(*yelp_files)
        assert result.attributes["user3"]["compliments"] == 12.0
        assert result.attributes["user3"]["compliment_level"] == 2
        assert result.attributes["user0"]["compliment_level"] == 0
        assert result.attributes["user2"]["average_stars"] == pytest.approx(3.2)

    def test_non_numeric_user_values_are_skipped(self, yelp_files, tmp_path):
        rows = [
            {"user_id": "user0", "friends": "user1", "compliment_hot": "lots"},
            {"user_id": "user1", "friends": "user2", "average_stars": "great"},
            {"user_id": "user2", "friends": "user3", "average_stars": 4.0, "compliment_hot": 2},
        ]
        users = tmp_path / "bad_users.json"
        users.write_text("\n".join(json.dumps(row) for row in rows) + "\n")
        result = load_yelp(yelp_files[0], users)
        assert result.skipped_by_file[str(users)] == 2
        assert set(result.attributes) == {"user2"}
        assert result.edges == [("user2", "user3")]
        assert result.attributes["user2"] == {"compliments": 2.0, "compliment_level": 1, "average_stars": 4.0}

    def test_missing_file_names_the_path(self, tmp_path):
        missing = tmp_path / "nope.json"
        with pytest.raises(DataError, match="nope.json"):
            load_yelp(missing, missing)


@pytest.mark.parametrize("total, level", [(0, 0), (1, 1), (9, 1), (10, 2), (99, 2), (100, 3), (5000, 3)])
def test_compliment_level_buckets(total, level):
    assert compliment_level(total) == level


def test_symmetric_edges_drops_duplicates_and_self_loops():
    assert symmetric_edges([("b", "a"), ("a", "b"), ("c", "c"), ("a", "c")]) == [("a", "b"), ("a", "c")]


class TestTsv:
    def test_full_load(self, tmp_path):
        (tmp_path / "inter.tsv").write_text("user\titem\ttimestamp\nu1\ti1\t10\nu1\ti2\t5\nu2\ti1\tbad\n")
        (tmp_path / "edges.tsv").write_text("a\tb\nu1\tu2\nu2\tu1\n")
        (tmp_path / "attrs.tsv").write_text("user\tn:age\td:city\nu1\t30\tparis\nu2\t\tberlin\n")
        result = load_tsv(tmp_path / "inter.tsv", tmp_path / "edges.tsv", tmp_path / "attrs.tsv")
        assert len(result.records) == 2
        assert result.skipped == 1
        assert result.edges == [("u1", "u2")]
        assert result.schema.numeric_names == ["age"]
        assert result.schema.discrete_names == ["city"]
        assert result.schema.discrete_cardinalities == [2]
        # categories are indexed in sorted order
        assert result.attributes["u1"] == {"age": 30.0, "city": 1}
        assert result.attributes["u2"] == {"city": 0}

    def test_missing_columns(self, tmp_path):
        (tmp_path / "inter.tsv").write_text("user\titem\nu1\ti1\n")
        with pytest.raises(DataError, match="missing columns"):
            load_tsv(tmp_path / "inter.tsv")

    def test_bad_attribute_prefix(self, tmp_path):
        (tmp_path / "inter.tsv").write_text("user\titem\ttimestamp\nu1\ti1\t1\n")
        (tmp_path / "attrs.tsv").write_text("user\tage\nu1\t3\n")
        with pytest.raises(DataError, match="must start with"):
            load_tsv(tmp_path / "inter.tsv", attributes_path=tmp_path / "attrs.tsv")
