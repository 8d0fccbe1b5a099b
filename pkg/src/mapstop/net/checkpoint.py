"""Checkpoint format.

    b"MSCNN\\0" | u32 version | u32 header length | JSON header | tensor bytes

All integers and tensors are little-endian; tensors are float32 in the order
listed in the header.  A paired checkpoint stores two models under the keys
``cls`` and ``reg``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import CnnModel, PairedModel

MAGIC = b"MSCNN\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _model_entry(model, prefix):
    tensors = []
    blobs = []
    for name, layer, k in model.named_params():
        arr = np.ascontiguousarray(layer.params[k], dtype="<f4")
        tensors.append({"name": f"{prefix}{name}", "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    return {"config": model.config(), "layers": [l.spec() for l in model.layers]}, tensors, blobs


def save_checkpoint(model, path, extra=None):
    parts = {"cls": model.cls_model, "reg": model.reg_model} if isinstance(model, PairedModel) else {"": model}
    header = {"version": VERSION, "dtype": "<f4", "models": {}, "tensors": [], "extra": extra or {}}
    blobs = []
    for key, m in parts.items():
        entry, tensors, b = _model_entry(m, f"{key}/" if key else "")
        header["models"][key or "model"] = entry
        header["tensors"] += tensors
        blobs += b
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path, dtype=np.float32):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if off + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(t["shape"])
        off += 4 * n

    def build(key, prefix):
        cfg = header["models"][key]["config"]
        m = CnnModel(cfg["input_side"], tuple(cfg["widths"]), cfg["kernel"], cfg["seed"], dtype, cfg["pool"])
        for name, layer, k in m.named_params():
            arr = arrays[f"{prefix}{name}"]
            if arr.shape != layer.params[k].shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            layer.params[k] = arr.astype(dtype)
        m.zero_grad()
        return m

    if "model" in header["models"]:
        model = build("model", "")
    else:
        model = PairedModel(build("cls", "cls/"), build("reg", "reg/"))
    return model, header.get("extra", {})
