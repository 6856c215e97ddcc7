import json

import numpy as np
import pytest
import torch

from schemas.config import EncoderConfig
from services.artifacts import (
    checkpoint_path,
    list_checkpoints,
    load_checkpoint,
    load_dataset,
    make_dataset_artifact,
    save_checkpoint,
    save_dataset,
)
from services.social_graph import SocialGraph
from services.trainer import initial_checkpoint
from utils.errors import ArtifactError, DataError
from utils.integrity import content_digest, file_sha256, verify_file


@pytest.fixture
def artifact(small_synth):
    return make_dataset_artifact(
        small_synth.dataset,
        small_synth.graph,
        [],
        small_synth.schema,
        small_synth.attributes,
        list(range(100)),
        list(range(100, 120)),
    )


def test_dataset_round_trip(artifact, small_synth, tmp_path):
    path = save_dataset(artifact, tmp_path / "data.json")
    loaded = load_dataset(path)
    assert loaded.dataset == small_synth.dataset
    assert loaded.graph.edges == small_synth.graph.edges
    np.testing.assert_array_equal(loaded.attributes.discrete, small_synth.attributes.discrete)
    np.testing.assert_allclose(loaded.attributes.numeric, small_synth.attributes.numeric)
    assert loaded.holdout_users == list(range(100, 120))


def test_missing_values_survive(mixed_schema, mixed_attributes, toy_dataset, tmp_path):
    attrs = mixed_attributes.subset([0, 1, 2])
    artifact = make_dataset_artifact(toy_dataset, SocialGraph(3), [], mixed_schema, attrs, [0, 1, 2], [])
    loaded = load_dataset(save_dataset(artifact, tmp_path / "toy.json")).attributes
    assert np.isnan(loaded.numeric[2, 0])
    assert loaded.discrete[:, 0].tolist() == [0, 2, 1]


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "data.json"
    path.write_text(json.dumps({"magic": "something-else", "version": 1}))
    with pytest.raises(ArtifactError):
        load_dataset(path)


def test_dataset_unsupported_version(artifact, tmp_path):
    raw = json.loads(artifact.model_dump_json())
    raw["version"] = 99
    path = tmp_path / "data.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ArtifactError, match="version"):
        load_dataset(path)


def test_artifact_errors_are_data_errors():
    assert issubclass(ArtifactError, DataError)


class TestCheckpoint:
    @pytest.fixture
    def checkpoint(self, small_synth):
        encoder = EncoderConfig(num_layers=1, num_heads=2, hidden_dim=8, max_len=12)
        return initial_checkpoint(small_synth.dataset, small_synth.schema, encoder, seed=0)

    def test_round_trip_keeps_digest(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, checkpoint_path(tmp_path, 0))
        loaded = load_checkpoint(path)
        assert loaded.digest() == checkpoint.digest()
        sidecar = json.loads(path.with_suffix(".json").read_text())
        assert sidecar["digest"] == checkpoint.digest()
        assert sidecar["stage"] == "scratch"

    def test_rebuilt_model_matches(self, checkpoint, tmp_path):
        loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "ckpt_0.bin"))
        a, b = checkpoint.build_model(), loaded.build_model()
        tokens = torch.tensor([[2, 5, 6, 3]])
        torch.testing.assert_close(a.encoder.encode(tokens), b.encoder.encode(tokens))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError, match="not found"):
            load_checkpoint(tmp_path / "ckpt_9.bin")

    def test_bad_magic(self, checkpoint, tmp_path):
        payload = checkpoint.to_payload()
        payload["magic"] = "nope"
        path = tmp_path / "ckpt_1.bin"
        torch.save(payload, path)
        with pytest.raises(ArtifactError):
            load_checkpoint(path)

    def test_no_profile_head(self, checkpoint):
        with pytest.raises(ArtifactError):
            checkpoint.build_profile_head()

    def test_listed_by_epoch(self, checkpoint, tmp_path):
        for epoch in (10, 2, 1):
            save_checkpoint(checkpoint, checkpoint_path(tmp_path, epoch))
        assert [p.name for p in list_checkpoints(tmp_path)] == ["ckpt_1.bin", "ckpt_2.bin", "ckpt_10.bin"]


class TestIntegrity:
    def test_digest_ignores_key_order(self):
        a = {"x": torch.ones(2), "y": [1, 2]}
        b = {"y": [1, 2], "x": torch.ones(2)}
        assert content_digest(a) == content_digest(b)

    def test_digest_sees_dtype(self):
        assert content_digest({"x": torch.ones(2)}) != content_digest({"x": torch.ones(2, dtype=torch.float64)})

    def test_verify_file(self, tmp_path):
        path = tmp_path / "blob"
        path.write_bytes(b"abc")
        expected = file_sha256(path)
        assert verify_file(path, expected) == expected
        with pytest.raises(ArtifactError):
            verify_file(path, "0" * 64)
        with pytest.raises(ArtifactError):
            verify_file(tmp_path / "missing", None)
