"""Single-file checkpoint archive: named weight tensors + config JSON.

Layout: magic "BATTA1", an 8-byte little-endian header length, a JSON header
(config, metadata, tensor index), then raw little-endian tensor payloads.
Writing the same tensors twice produces identical bytes, which keeps
fixed-seed runs reproducible at the file level.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"BATTA1\n"

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def save_checkpoint(
    path: str | Path,
    state: dict[str, torch.Tensor],
    config: dict,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    payloads = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": 1, "config": config, "meta": meta or {}, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in payloads:
            f.write(raw)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a BATTA1 checkpoint (bad magic {magic!r})")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    state: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        np_dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<"))
        state[entry["name"]] = torch.from_numpy(
            arr.astype(np_dtype).reshape(entry["shape"]).copy()
        )
    return state, header["config"], header["meta"]
