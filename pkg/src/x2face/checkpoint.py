"""Bit-exact checkpoint container.

Layout: 8-byte magic, unsigned 64-bit little-endian manifest byte length, a
UTF-8 JSON manifest {format_version, net_config, tensors, training_meta},
then one contiguous blob of little-endian float32 values. Each manifest
tensor entry carries {name, shape, offset, length} with offset and length in
bytes, relative to the blob start. num_batches_tracked counters are not
persisted (batch-norm momentum is fixed, so they are never consulted).
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BadMagicError,
    LengthMismatchError,
    ManifestError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .networks import DrivingNetwork, EmbeddingNetwork, NetConfig, build_networks

MODEL_MAGIC = b"X2FCKPT1"
# 7-character tag null-padded to the fixed 8-byte magic field
COMPARATOR_MAGIC = b"X2FCMP1\x00"
FORMAT_VERSION = 1


def _named_tensors(module: torch.nn.Module, prefix: str) -> list[tuple[str, torch.Tensor]]:
    out = []
    for name, t in module.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out.append((f"{prefix}.{name}", t))
    return out


def write_container(path, magic: bytes, net_config: dict, tensors, training_meta: dict) -> None:
    """Serialize named float32 tensors behind a JSON manifest."""
    if len(magic) != 8:
        raise ValueError(f"magic must be 8 bytes, got {len(magic)}")
    entries = []
    chunks = []
    offset = 0
    for name, t in tensors:
        data = t.detach().contiguous().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "net_config": net_config,
        "tensors": entries,
        "training_meta": training_meta,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for c in chunks:
            f.write(c)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    """Read and structurally validate a container; returns (manifest, blob)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise LengthMismatchError(f"file too short to be a checkpoint ({len(raw)} bytes)")
    if raw[:8] != magic:
        raise BadMagicError(f"bad magic {raw[:8]!r}, expected {magic!r}")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise LengthMismatchError(f"manifest length {mlen} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format_version {version}, expected {FORMAT_VERSION}")
    for key in ("net_config", "tensors", "training_meta"):
        if key not in manifest:
            raise ManifestError(f"manifest missing required key {key!r}")
    blob = raw[16 + mlen :]
    expected = 0
    for e in manifest["tensors"]:
        if e["offset"] != expected:
            raise ManifestError(f"tensor {e['name']!r} offset {e['offset']} is not contiguous")
        expected += e["length"]
    if len(blob) != expected:
        raise LengthMismatchError(f"blob holds {len(blob)} bytes, manifest declares {expected}")
    return manifest, blob


def restore_tensors(manifest: dict, blob: bytes, targets: dict[str, torch.Tensor]) -> None:
    """Copy blob contents into `targets`, validating names, shapes, lengths."""
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in targets:
            raise ManifestError(f"manifest names unknown tensor {name!r}")
        target = targets[name]
        if list(e["shape"]) != list(target.shape):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {e['shape']}, config expects {list(target.shape)}"
            )
        nbytes = int(np.prod(e["shape"], dtype=np.int64)) * 4 if e["shape"] else 4
        if e["length"] != nbytes:
            raise LengthMismatchError(
                f"tensor {name!r} declares {e['length']} bytes, shape needs {nbytes}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=e["offset"])
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr.copy()).reshape(target.shape))
        seen.add(name)
    missing = sorted(set(targets) - seen)
    if missing:
        raise ManifestError(f"manifest is missing tensors: {', '.join(missing)}")


def _state_targets(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {
        f"{prefix}.{name}": t
        for name, t in module.state_dict(keep_vars=True).items()
        if not name.endswith("num_batches_tracked")
    }


def save_checkpoint(path, emb_net: EmbeddingNetwork, drv_net: DrivingNetwork,
                    config: NetConfig, training_meta: dict) -> None:
    tensors = _named_tensors(emb_net, "embedding") + _named_tensors(drv_net, "driving")
    write_container(path, MODEL_MAGIC, config.to_dict(), tensors, training_meta)


def load_checkpoint(path) -> tuple[EmbeddingNetwork, DrivingNetwork, NetConfig, dict]:
    manifest, blob = read_container(path, MODEL_MAGIC)
    try:
        config = NetConfig.from_dict(manifest["net_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"bad net_config in manifest: {e}") from e
    emb_net, drv_net = build_networks(config, seed=0)
    targets = {**_state_targets(emb_net, "embedding"), **_state_targets(drv_net, "driving")}
    restore_tensors(manifest, blob, targets)
    return emb_net, drv_net, config, manifest["training_meta"]
