"""VCP1 checkpoints.

Layout: the 4-byte magic ``VCP1``, a little-endian uint32 format version, a
little-endian uint64 header length, a UTF-8 JSON header, then the tensor
payloads as contiguous little-endian float64 arrays. The header holds the
model config, the site names and a directory of (name, group, shape,
offset) entries whose offsets are relative to the payload start.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..engine import SeededRNG, Tensor
from ..models import ModelBundle, ModelConfig, init_discriminator, init_model

MAGIC = b"VCP1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: ModelBundle, extra: dict | None = None) -> Path:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for group, params in (("params", model.params), ("disc", model.disc_params)):
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape),
                            "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {"version": VERSION, "config": model.config.to_dict(),
              "site_names": model.site_names, "tensors": entries, "payload_bytes": offset,
              "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def _read_header(fh, path) -> dict:
    raw = fh.read(_PREFIX.size)
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a VCP1 header")
    magic, version, hlen = _PREFIX.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hb = fh.read(hlen)
    if len(hb) != hlen:
        raise CheckpointError(f"{path}: truncated header ({len(hb)} of {hlen} bytes)")
    try:
        header = json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    for key in ("config", "tensors", "payload_bytes", "site_names"):
        if key not in header:
            raise CheckpointError(f"{path}: header is missing {key!r}")
    return header


def inspect_checkpoint(path: str | Path) -> dict:
    """Header only; payloads are not read."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_checkpoint(path: str | Path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares "
                              f"{header['payload_bytes']} (truncated or padded file)")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: invalid config in header ({e})") from None
    # reference shapes come from a fresh init of the same config
    ref = init_model(config, SeededRNG(0))
    ref_disc = init_discriminator(config, SeededRNG(0)) if config.variant == "factor" else {}
    want = {("params", k): v.data.shape for k, v in ref.params.items()}
    want.update({("disc", k): v.data.shape for k, v in ref_disc.items()})
    groups: dict[str, dict[str, Tensor]] = {"params": {}, "disc": {}}
    for e in header["tensors"]:
        key = (e["group"], e["name"])
        shape = tuple(e["shape"])
        if key not in want:
            raise CheckpointError(f"{path}: unexpected tensor {e['group']}/{e['name']}")
        if shape != want[key]:
            raise CheckpointError(f"{path}: tensor {e['name']} has shape {shape}, "
                                  f"config implies {want[key]}")
        n = int(np.prod(shape)) * 8
        start = e["offset"]
        if start < 0 or start + n > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=start).reshape(shape)
        groups[e["group"]][e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    if not groups["disc"]:
        ref_disc = {}  # untrained factor model: the discriminator is created by train()
        want = {key: v for key, v in want.items() if key[0] == "params"}
    missing = sorted(f"{g}/{k}" for g, k in want if k not in groups[g])
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    order = list(ref.params)
    params = {k: groups["params"][k] for k in order}
    disc = {k: groups["disc"][k] for k in ref_disc}
    return ModelBundle(config, params, disc)
