"""Checkpoint file: JSON manifest followed by raw little-endian tensor buffers.

    bytes 0..7    magic b"SURGSEG\\0"
    bytes 8..15   uint64 LE header length n
    bytes 16..    n bytes of UTF-8 JSON header, then the concatenated buffers

Floating tensors are stored as float32, integer counters as int64.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .decoders import DecoderConfig, SegModel
from .encoder import EncoderVariantConfig
from .fusion import LabelRegistry

MAGIC = b"SURGSEG\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SegModel, *, head: str, registry: LabelRegistry,
                    step: int = 0, config: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        if np.issubdtype(arr.dtype, np.floating):
            arr, dtype = arr.astype("<f4"), "float32"
        else:
            arr, dtype = arr.astype("<i8"), "int64"
        buf = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    enc = model.encoder_config
    header = {
        "format_version": FORMAT_VERSION,
        "head": head,
        "encoder": dataclasses.asdict(enc),
        "decoder": dataclasses.asdict(model.decoder_config),
        "normalization": {
            "mean": model.encoder.pixel_mean.flatten().tolist(),
            "std": model.encoder.pixel_std.flatten().tolist(),
        },
        "registry": registry.to_list(),
        "step": int(step),
        "config": config or {},
        "extra": extra or {},
        "tensors": tensors,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    return header, raw[16 + n:]


def load_checkpoint(path) -> tuple[SegModel, dict]:
    """Rebuild the model from a checkpoint; returns (model in eval mode, header)."""
    header, body = read_header(path)
    enc = dict(header["encoder"])
    enc.pop("patch_strides", None)
    for k, v in enc.items():
        if isinstance(v, list):
            enc[k] = tuple(v)
    model = SegModel(EncoderVariantConfig(**enc), DecoderConfig(**header["decoder"]))
    state = {}
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        np_dtype = "<f4" if t["dtype"] == "float32" else "<i8"
        expected = int(np.prod(t["shape"], dtype=np.int64)) * np.dtype(np_dtype).itemsize
        if len(chunk) != t["nbytes"] or t["nbytes"] != expected:
            raise CheckpointError(f"{path}: buffer for {t['name']} is truncated or mis-sized")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: tensor set mismatch (missing={missing[:3]}, unexpected={unexpected[:3]})")
    model.eval()
    return model, header


def checkpoint_registry(header: dict) -> LabelRegistry:
    return LabelRegistry([c for c in header["registry"]])
