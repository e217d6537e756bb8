"""Checkpoint I/O.

Layout::

    magic      8 bytes   b"MOEI2CK\\n"
    version    u32 LE
    mlen       u64 LE    manifest length in bytes
    mcrc       u32 LE    CRC-32 of the manifest bytes
    manifest   mlen bytes of UTF-8 JSON
    blob       row-major little-endian float64 tensors

The manifest carries the model config, per-slot storage kind, adapter scales
and a tensor directory (name, shape, dtype, byte offset, byte length) plus a
SHA-256 of the blob.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import SLOTS, Dense, Expert, Factored, LoraAdapter, ModelConfig, MoELayer, MoEModel

MAGIC = b"MOEI2CK\n"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQI")
_DTYPE = "<f8"


def _tensors(model: MoEModel):
    yield "embedding", model.embedding
    for i, layer in enumerate(model.layers):
        yield f"layers.{i}.router", layer.router
        for j, e in enumerate(layer.experts):
            for s in SLOTS:
                w = e.slot(s)
                p = f"layers.{i}.experts.{j}.{s}"
                if isinstance(w, Dense):
                    yield f"{p}.w", w.w
                else:
                    yield f"{p}.a", w.a
                    yield f"{p}.b", w.b
                ad = e.adapters.get(s)
                if ad is not None:
                    yield f"{p}.lora_a", ad.a
                    yield f"{p}.lora_b", ad.b


def to_bytes(model: MoEModel) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in _tensors(model):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    layers = []
    for layer in model.layers:
        layers.append(
            [
                {
                    "slots": {s: ("dense" if isinstance(e.slot(s), Dense) else "factored") for s in SLOTS},
                    "adapters": {s: ad.scale for s, ad in e.adapters.items()},
                }
                for e in layer.experts
            ]
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "layers": layers,
        "tensors": directory,
        "blob_nbytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, len(mbytes), zlib.crc32(mbytes))
    return head + mbytes + blob


def save_checkpoint(model: MoEModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    return path


def from_bytes(data: bytes) -> MoEModel:
    if len(data) < _HEAD.size:
        raise CheckpointFormatError("truncated header")
    magic, version, mlen, mcrc = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    mstart = _HEAD.size
    if len(data) < mstart + mlen:
        raise CheckpointFormatError("truncated manifest")
    mbytes = data[mstart : mstart + mlen]
    if zlib.crc32(mbytes) != mcrc:
        raise CheckpointFormatError("manifest checksum mismatch")
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError("manifest version disagrees with header")
    blob = data[mstart + mlen :]
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointFormatError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_nbytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointFormatError("blob checksum mismatch")

    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if entry["dtype"] != _DTYPE or entry["nbytes"] != 8 * int(np.prod(shape)):
            raise CheckpointFormatError(f"tensor {entry['name']}: shape/dtype disagree with byte length")
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointFormatError(f"tensor {entry['name']} runs past the blob")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=int(np.prod(shape)), offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)

    try:
        config = ModelConfig(**manifest["config"])
        return _assemble(config, manifest["layers"], tensors)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"manifest and tensors disagree: {exc}") from exc


def _assemble(config: ModelConfig, layer_specs, tensors) -> MoEModel:
    d, f = config.d_model, config.d_ff
    expected = {"gate": (f, d), "up": (f, d), "down": (d, f)}
    emb = tensors["embedding"]
    if emb.shape != (config.vocab_size, d):
        raise ValueError(f"embedding shape {emb.shape}")
    layers = []
    for i, experts_spec in enumerate(layer_specs):
        router = tensors[f"layers.{i}.router"]
        if router.shape != (len(experts_spec), d):
            raise ValueError(f"layer {i} router shape {router.shape}")
        experts = []
        for j, spec in enumerate(experts_spec):
            slots = {}
            adapters = {}
            for s in SLOTS:
                p = f"layers.{i}.experts.{j}.{s}"
                if spec["slots"][s] == "dense":
                    w = Dense(tensors[f"{p}.w"])
                else:
                    w = Factored(tensors[f"{p}.a"], tensors[f"{p}.b"])
                if w.shape != expected[s]:
                    raise ValueError(f"{p} shape {w.shape}, expected {expected[s]}")
                slots[s] = w
                if s in spec["adapters"]:
                    adapters[s] = LoraAdapter(tensors[f"{p}.lora_a"], tensors[f"{p}.lora_b"], float(spec["adapters"][s]))
            experts.append(Expert(adapters=adapters, **slots))
        layers.append(MoELayer(router=router, experts=experts))
    if len(layers) != config.n_layers:
        raise ValueError(f"{len(layers)} layers, config says {config.n_layers}")
    return MoEModel(config=config, embedding=emb, layers=layers)


def load_checkpoint(path) -> MoEModel:
    return from_bytes(Path(path).read_bytes())
