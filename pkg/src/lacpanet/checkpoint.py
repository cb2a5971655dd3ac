"""Parameter checkpoints: one JSON manifest line, then raw little-endian float64."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = "LACPCKPT1"


class CheckpointFormatError(ValueError):
    pass


class CheckpointHeaderError(CheckpointFormatError):
    """Manifest line missing, unparsable, or not a checkpoint."""


class CheckpointPayloadError(CheckpointFormatError):
    """Payload size disagrees with the manifest (e.g. a truncated file)."""


def encode_checkpoint(params: ModelParams, config: ModelConfig | None = None, extra: dict | None = None) -> bytes:
    entries, offset = [], 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    manifest = {"magic": MAGIC, "dtype": "f64le", "tensors": entries, "payload_bytes": offset}
    if config is not None:
        manifest["model_config"] = config.to_dict()
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("ascii") + b"\n"
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in params.items())
    return head + body


def decode_checkpoint(raw: bytes) -> tuple[ModelParams, ModelConfig | None, dict]:
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointHeaderError("missing checkpoint manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHeaderError(f"unreadable checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise CheckpointHeaderError("not a parameter checkpoint (bad magic)")
    if not isinstance(manifest.get("tensors"), list) or not isinstance(manifest.get("payload_bytes"), int):
        raise CheckpointHeaderError("checkpoint manifest lacks a tensor table")
    payload = raw[newline + 1:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointPayloadError(
            f"checkpoint payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"]))
        start = int(e["offset"])
        if start + 8 * n > len(payload):
            raise CheckpointPayloadError(f"tensor {e['name']!r} runs past the end of the payload")
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(e["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(manifest["model_config"]) if "model_config" in manifest else None
    return ModelParams.from_arrays(arrays), config, manifest.get("extra", {})


def save_checkpoint(path, params: ModelParams, config: ModelConfig | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config, extra))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig | None, dict]:
    return decode_checkpoint(Path(path).read_bytes())
