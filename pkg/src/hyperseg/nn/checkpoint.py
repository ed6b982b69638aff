"""Single-file checkpoints: one JSON header line + raw little-endian f32 payload.

The header carries the model config, free-form metadata and a manifest of
(name, shape, byte offset) entries, in insertion order. Everything is
deterministic for fixed inputs, so equal training runs produce bit-identical
checkpoint files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    config: dict, extra: dict | None = None) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": "hyperseg-checkpoint-v1", "config": config,
              "extra": extra or {}, "manifest": manifest}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint file {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed checkpoint header in {path}: {exc}") from exc
    if header.get("format") != "hyperseg-checkpoint-v1":
        raise DataError(f"{path} is not a recognized checkpoint")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise DataError(f"checkpoint payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(shape).copy()
    return arrays, header["config"], header["extra"]
