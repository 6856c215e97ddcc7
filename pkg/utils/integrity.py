import hashlib
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import torch

from utils.errors import ArtifactError
from utils.logger import logger

CHUNK_SIZE = 1 << 20


def file_sha256(path: Path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(CHUNK_SIZE), b""):
            digest.update(block)
    return digest.hexdigest()


def _update(digest: "hashlib._Hash", key: str, value: Any) -> None:
    digest.update(key.encode())
    if isinstance(value, torch.Tensor):
        tensor = value.detach().cpu().contiguous()
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    elif isinstance(value, np.ndarray):
        digest.update(str(value.dtype).encode())
        digest.update(value.tobytes())
    elif isinstance(value, Mapping):
        for sub_key in sorted(value, key=str):
            _update(digest, f"{key}.{sub_key}", value[sub_key])
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _update(digest, f"{key}[{i}]", item)
    else:
        digest.update(repr(value).encode())


def content_digest(state: Mapping[str, Any]) -> str:
    """
    Digest of a nested state (tensors, arrays, plain values) in canonical key order.
    Two states with equal content always hash the same, whatever container wrote them.
    """
    digest = hashlib.sha256()
    for key in sorted(state):
        _update(digest, key, state[key])
    return digest.hexdigest()


def verify_file(path: Path, expected: Optional[str]) -> str:
    """
    Checks a file against the hash recorded for it, if any.
    Returns the actual hash so callers can record it in a manifest.
    """
    if not Path(path).exists():
        raise ArtifactError(f"Artifact not found: {path}")
    actual = file_sha256(path)
    if expected and actual != expected:
        logger.error(f"Hash mismatch for {path}: expected {expected}, got {actual}")
        raise ArtifactError(f"Hash mismatch for {path}")
    return actual
