"""
Versioned on-disk containers.

Dataset artifact (JSON):
    {"magic": "uprec-dataset", "version": 1, "dataset": {...}, "edges": [[u, v], ...],
     "eval_edges": [...], "attribute_schema": {...}, "numeric": [[value | null, ...], ...],
     "discrete": [[index | -1, ...], ...], "train_users": [...], "holdout_users": [...]}

Checkpoint (torch.save of a plain dict) ckpt_{epoch}.bin, plus a JSON sidecar
ckpt_{epoch}.json holding the metadata and the content digest of the tensors.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from schemas.config import EncoderConfig
from schemas.dataset import AttributeSchema, AttributeTable, InteractionDataset
from services.objectives import ProfileHead, UPRecModel
from services.social_graph import SocialGraph
from utils.errors import ArtifactError
from utils.integrity import content_digest
from utils.logger import logger

DATASET_MAGIC = "uprec-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = "uprec-checkpoint"
CHECKPOINT_VERSION = 1


class DatasetArtifact(BaseModel):
    magic: str = DATASET_MAGIC
    version: int = DATASET_VERSION
    dataset: InteractionDataset
    edges: List[Tuple[int, int]] = []
    eval_edges: List[Tuple[int, int]] = []
    attribute_schema: AttributeSchema = AttributeSchema()
    numeric: List[List[Optional[float]]] = []
    discrete: List[List[int]] = []
    train_users: List[int] = []
    holdout_users: List[int] = []

    @property
    def graph(self) -> SocialGraph:
        """Pre-training relations (held-out evaluation edges excluded)."""
        return SocialGraph(self.dataset.num_users, self.edges)

    @property
    def full_graph(self) -> SocialGraph:
        return SocialGraph(self.dataset.num_users, list(self.edges) + list(self.eval_edges))

    @property
    def attributes(self) -> AttributeTable:
        n_users = self.dataset.num_users
        numeric = np.array(
            [[np.nan if v is None else v for v in row] for row in self.numeric],
            dtype=np.float64,
        ).reshape(n_users, len(self.attribute_schema.numeric_names))
        discrete = np.array(self.discrete, dtype=np.int64).reshape(n_users, len(self.attribute_schema.discrete_names))
        return AttributeTable(numeric, discrete)


def make_dataset_artifact(
    ds: InteractionDataset,
    graph: SocialGraph,
    eval_edges: List[Tuple[int, int]],
    schema: AttributeSchema,
    attributes: AttributeTable,
    train_users: List[int],
    holdout_users: List[int],
) -> DatasetArtifact:
    return DatasetArtifact(
        dataset=ds,
        edges=graph.edges,
        eval_edges=eval_edges,
        attribute_schema=schema,
        numeric=[[None if np.isnan(v) else float(v) for v in row] for row in attributes.numeric],
        discrete=attributes.discrete.astype(int).tolist(),
        train_users=train_users,
        holdout_users=holdout_users,
    )


def save_dataset(artifact: DatasetArtifact, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(artifact.model_dump_json())
    logger.info(f"Dataset artifact written to {path}")
    return path


def load_dataset(path: Path) -> DatasetArtifact:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Cannot read dataset artifact {path}: {e}") from e
    if raw.get("magic") != DATASET_MAGIC:
        raise ArtifactError(f"{path} is not a dataset artifact")
    if raw.get("version") != DATASET_VERSION:
        raise ArtifactError(f"Unsupported dataset artifact version {raw.get('version')} in {path}")
    try:
        return DatasetArtifact.model_validate(raw)
    except ValidationError as e:
        raise ArtifactError(f"Malformed dataset artifact {path}: {e}") from e


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and, optionally, resume its optimizer."""
    stage: str
    epoch: int
    encoder_config: EncoderConfig
    schema: AttributeSchema
    model_state: Dict[str, torch.Tensor]
    standardization: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    optimizer_state: Optional[Dict[str, Any]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    ablation: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None
    profile: Optional[Dict[str, Any]] = None
    dtype: str = "float32"

    def build_model(self) -> UPRecModel:
        model = UPRecModel(self.encoder_config, self.schema)
        if self.dtype == "float64":
            model = model.double()
        model.load_state_dict(self.model_state)
        return model

    def build_profile_head(self) -> ProfileHead:
        if self.profile is None:
            raise ArtifactError("Checkpoint carries no profile head")
        head = ProfileHead(self.encoder_config.hidden_dim, self.profile["outputs"])
        if self.dtype == "float64":
            head = head.double()
        head.load_state_dict(self.profile["head_state"])
        return head

    def to_payload(self) -> Dict[str, Any]:
        return {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "epoch": self.epoch,
            "encoder_config": self.encoder_config.model_dump(),
            "schema": self.schema.model_dump(),
            "model_state": self.model_state,
            "standardization": {k: list(v) for k, v in self.standardization.items()},
            "optimizer_state": self.optimizer_state,
            "config": self.config,
            "ablation": self.ablation,
            "rng_state": self.rng_state,
            "profile": self.profile,
            "dtype": self.dtype,
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "Checkpoint":
        if payload.get("magic") != CHECKPOINT_MAGIC:
            raise ArtifactError("Not a checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ArtifactError(f"Unsupported checkpoint version {payload.get('version')}")
        return cls(
            stage=payload["stage"],
            epoch=payload["epoch"],
            encoder_config=EncoderConfig(**payload["encoder_config"]),
            schema=AttributeSchema(**payload["schema"]),
            model_state=payload["model_state"],
            standardization={k: tuple(v) for k, v in payload["standardization"].items()},
            optimizer_state=payload["optimizer_state"],
            config=payload["config"],
            ablation=payload["ablation"],
            rng_state=payload["rng_state"],
            profile=payload["profile"],
            dtype=payload["dtype"],
        )

    def digest(self) -> str:
        return checkpoint_digest(self)


def checkpoint_digest(checkpoint: Checkpoint) -> str:
    """Content hash of the model/optimizer tensors and metadata."""
    return content_digest(checkpoint.to_payload())


def checkpoint_path(directory: Path, epoch: int) -> Path:
    return Path(directory) / f"ckpt_{epoch}.bin"


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint.to_payload(), path)
    sidecar = {
        "stage": checkpoint.stage,
        "epoch": checkpoint.epoch,
        "encoder_config": checkpoint.encoder_config.model_dump(),
        "ablation": checkpoint.ablation,
        "config": checkpoint.config,
        "dtype": checkpoint.dtype,
        "digest": checkpoint.digest(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info(f"Checkpoint ({checkpoint.stage}, epoch {checkpoint.epoch}) written to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        logger.error(f"Failed to load checkpoint {path}: {e}")
        raise ArtifactError(f"Cannot load checkpoint {path}: {e}") from e
    return Checkpoint.from_payload(payload)


def list_checkpoints(directory: Path) -> List[Path]:
    """Checkpoints in a directory ordered by epoch."""
    paths = Path(directory).glob("ckpt_*.bin")
    return sorted(paths, key=lambda p: int(p.stem.split("_")[1]))
