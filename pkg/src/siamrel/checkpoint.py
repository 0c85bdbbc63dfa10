"""Single-file checkpoint container.

Layout: an 8-byte little-endian header length, the UTF-8 JSON header, then the
raw little-endian float32 tensor blobs.  Tensor offsets in the header are
relative to the start of the blob section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def save_checkpoint(path, state_dict: dict[str, torch.Tensor], config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    for name, t in state_dict.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": FORMAT_VERSION, "config": config, "tensors": tensors}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 8 + n
    state = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "float32":
            raise ValueError(f"{path}: unsupported dtype {entry['dtype']}")
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return header, state


def save_model(path, model, train_config=None, extra: dict | None = None) -> Path:
    config = {"model": model.config.to_dict()}
    if train_config is not None:
        config["train"] = train_config.to_dict()
    return save_checkpoint(path, model.state_dict(), config, extra)


def load_model(path):
    from .model import ModelConfig, SiamRelationNet

    header, state = read_checkpoint(path)
    model = SiamRelationNet(ModelConfig.from_dict(header["config"]["model"]))
    model.load_state_dict(state)
    return model.eval()
