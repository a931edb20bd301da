"""
Checkpoint persistence: manifest.json + weights.bin.

The payload is every model parameter followed by the optimizer moments, as
one flat little-endian float32 buffer. The manifest lists (name, shape,
byte offset, element count) per array plus the run config snapshot, the
vocabulary, the epoch counter and the metrics at save time. Both files are
written to temporaries and renamed into place.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from src.errors import CheckpointError, ConfigurationError
from src.model.encoders import Vocabulary
from src.model.segmenter import ConditionedSegmenter
from src.training.config import RunConfig, config_from_dict
from src.training.optim import Adam

logger = logging.getLogger(__name__)

FORMAT = "reconseg-checkpoint/1"
PAYLOAD_DTYPE = "<f4"
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "weights.bin"
REQUIRED_KEYS = ("payload_bytes", "config", "vocabulary", "parameters", "optimizer", "epoch")


@dataclass
class Checkpoint:
    config: RunConfig
    vocabulary: Vocabulary
    parameters: dict[str, np.ndarray]
    optimizer_step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    metrics: dict[str, Any] = field(default_factory=dict)
    dataset: str | None = None

    def build_model(self) -> ConditionedSegmenter:
        model = ConditionedSegmenter(
            self.config.model_config(len(self.vocabulary)),
            np.random.default_rng(self.config.master_seed),
        )
        model.load_state_dict(self.parameters)
        return model


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(
    directory: Path | str,
    model: ConditionedSegmenter,
    config: RunConfig,
    vocabulary: Vocabulary,
    optimizer: Adam | None = None,
    epoch: int = 0,
    metrics: dict[str, Any] | None = None,
    dataset: str | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays: list[tuple[str, np.ndarray]] = list(model.state_dict().items())
    param_count = len(arrays)
    if optimizer is not None:
        arrays += list(optimizer.state_arrays().items())

    entries, chunks, offset = [], [], 0
    for name, value in arrays:
        flat = np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).reshape(-1)
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.nbytes

    manifest = {
        "format": FORMAT,
        "dtype": PAYLOAD_DTYPE,
        "payload": PAYLOAD_NAME,
        "payload_bytes": offset,
        "parameters": entries[:param_count],
        "optimizer": {
            "step": optimizer.step_count if optimizer is not None else 0,
            "entries": entries[param_count:],
        },
        "config": config.to_dict(),
        "vocabulary": vocabulary.to_list(),
        "epoch": epoch,
        "metrics": metrics or {},
        "dataset": dataset,
    }
    _atomic_write(directory / PAYLOAD_NAME, b"".join(chunks))
    _atomic_write(directory / MANIFEST_NAME, json.dumps(manifest, indent=2).encode("utf-8"))
    logger.debug("Saved checkpoint %s (%d arrays, %d bytes)", directory, len(entries), offset)
    return directory


def _read_arrays(payload: np.ndarray, entries: list[dict], path: Path) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in entries:
        start = entry["offset"] // 4
        count = entry["count"]
        if entry["offset"] % 4 or start + count > payload.size or int(np.prod(entry["shape"])) != count:
            raise CheckpointError(f"{path}: entry {entry['name']} does not fit the payload")
        arrays[entry["name"]] = payload[start:start + count].reshape(entry["shape"]).astype(np.float32)
    return arrays


def load_checkpoint(directory: Path | str) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: corrupt manifest ({e})") from None
    if manifest.get("format") != FORMAT or manifest.get("dtype") != PAYLOAD_DTYPE:
        raise CheckpointError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    missing = [key for key in REQUIRED_KEYS if key not in manifest]
    if missing:
        raise CheckpointError(f"{manifest_path}: manifest lacks {missing}")

    payload_path = directory / manifest.get("payload", PAYLOAD_NAME)
    raw = payload_path.read_bytes() if payload_path.exists() else b""
    if len(raw) != manifest["payload_bytes"]:
        raise CheckpointError(f"{payload_path}: expected {manifest['payload_bytes']} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype=PAYLOAD_DTYPE)

    try:
        config = config_from_dict(manifest["config"])
    except ConfigurationError as e:
        raise CheckpointError(f"{manifest_path}: stored config is invalid ({e})") from None
    return Checkpoint(
        config=config,
        vocabulary=Vocabulary.from_list(manifest["vocabulary"]),
        parameters=_read_arrays(payload, manifest["parameters"], payload_path),
        optimizer_step=manifest["optimizer"]["step"],
        optimizer_state=_read_arrays(payload, manifest["optimizer"]["entries"], payload_path),
        epoch=manifest["epoch"],
        metrics=manifest.get("metrics", {}),
        dataset=manifest.get("dataset"),
    )
