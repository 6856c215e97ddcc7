import json

import numpy as np
import pytest
import torch

from schemas.config import EncoderConfig, SynthConfig
from schemas.dataset import AttributeSchema, AttributeTable, RawRecord
from services import synth
from utils.preprocessing import build_dataset


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(num_layers=1, num_heads=2, hidden_dim=8, max_len=10, dropout_rate=0.1, vocab_size=14)


@pytest.fixture
def toy_records():
    # three users, items a..f, timestamps deliberately out of order
    rows = [
        ("u1", "a", 3), ("u1", "b", 1), ("u1", "c", 2), ("u1", "d", 4),
        ("u2", "b", 5), ("u2", "e", 6), ("u2", "a", 7),
        ("u3", "f", 1), ("u3", "a", 2),
    ]
    return [RawRecord(user_id=u, item_id=i, timestamp=t) for u, i, t in rows]


@pytest.fixture
def toy_dataset(toy_records):
    return build_dataset(toy_records)


@pytest.fixture
def mixed_schema():
    return AttributeSchema(numeric_names=["stars"], discrete_names=["level"], discrete_cardinalities=[3])


@pytest.fixture
def mixed_attributes():
    return AttributeTable(
        numeric=np.array([[1.0], [3.0], [np.nan], [5.0]]),
        discrete=np.array([[0], [2], [1], [-1]]),
    )


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_users=120, n_items=60, n_clusters=3, seq_len_range=(5, 10), friends_per_user=3, kcore=1, seed=7)
    return synth.generate(cfg)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def write_json_lines(path, rows):
    with open(path, "w") as handle:
        for row in rows:
            handle.write(row if isinstance(row, str) else json.dumps(row))
            handle.write("\n")
    return path


@pytest.fixture
def yelp_files(tmp_path):
    """Six users with five reviews each over five businesses, plus one malformed line."""
    reviews = []
    for u in range(6):
        for b in range(5):
            reviews.append({
                "user_id": f"user{u}",
                "business_id": f"biz{(u + b) % 5}",
                "stars": 1 + (u + b) % 5,
                "date": f"2019-0{1 + b}-1{u} 10:00:00",
            })
    reviews.append("{not json")
    users = [
        {"user_id": f"user{u}", "friends": f"user{(u + 1) % 6}, user{(u + 2) % 6}",
         "average_stars": 3.0 + u / 10, "compliment_hot": u * 3, "compliment_cool": u}
        for u in range(6)
    ]
    return write_json_lines(tmp_path / "review.json", reviews), write_json_lines(tmp_path / "user.json", users)


def _review(user, business, day):
    return {"user_id": user, "business_id": business, "stars": 4, "date": f"2019-02-{day:02d} 12:00:00"}


@pytest.fixture
def yelp_pruned_files(tmp_path):
    """
    500 reviews. A 20 x 20 block of users dense0..19 and businesses core0..19 is the
    5-core; everything else falls away:
      lurker0..9   review 4 core businesses each
      rare0..9     are reviewed by 4 dense users each
      chain0..3    review 4 core businesses plus chain_biz, which has only their 4 reviews,
                   so they survive the first user pass and are dropped once chain_biz goes
    Dense user i reviews core j on day (i + j) % 20 + 1, so its last business is core(19 - i).
    """
    reviews = [_review(f"dense{i}", f"core{j}", (i + j) % 20 + 1) for i in range(20) for j in range(20)]
    reviews += [_review(f"lurker{i}", f"core{j}", 21 + j) for i in range(10) for j in range(4)]
    reviews += [_review(f"dense{i}", f"rare{r}", 25) for r in range(10) for i in range(4)]
    for c in range(4):
        reviews += [_review(f"chain{c}", f"core{j}", 21 + j) for j in range(4)]
        reviews.append(_review(f"chain{c}", "chain_biz", 26))
    users = [{"user_id": f"dense{i}", "friends": f"dense{(i + 1) % 20}", "average_stars": 4.0} for i in range(20)]
    users += [{"user_id": f"lurker{i}", "friends": "dense0"} for i in range(10)]
    users += [{"user_id": f"chain{c}", "friends": "dense1, lurker0"} for c in range(4)]
    return write_json_lines(tmp_path / "review.json", reviews), write_json_lines(tmp_path / "user.json", users)
