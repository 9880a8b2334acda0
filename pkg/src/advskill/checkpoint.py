"""Binary checkpoint container.

Layout::

    b"ASECKPT1"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON
    payload                          little-endian float32 arrays, manifest order

The manifest's ``arrays`` entry lists ``{"name", "shape"}`` for every array
in the payload; everything else in it (specs, feature stats, RNG state,
iteration, resumable run state) is free-form JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"ASECKPT1"
MANIFEST_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("version", MANIFEST_VERSION)
    manifest["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    manifest["payload_floats"] = int(sum(np.size(v) for v in arrays.values()))
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=_LE_F32).tobytes())
    tmp.replace(path)


def load_checkpoint(path, expect_latent_dim: int | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    payload = np.frombuffer(raw[16 + n :], dtype=_LE_F32)
    if payload.size != manifest.get("payload_floats"):
        raise ConfigError(f"{path}: payload has {payload.size} floats, manifest declares "
                          f"{manifest.get('payload_floats')}")
    if expect_latent_dim is not None and manifest.get("latent_dim") != expect_latent_dim:
        raise ConfigError(f"{path}: latent dimension {manifest.get('latent_dim')} != expected {expect_latent_dim}")
    arrays = {}
    off = 0
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = payload[off : off + size].reshape(entry["shape"]).astype(np.float32)
        off += size
    return arrays, manifest


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
