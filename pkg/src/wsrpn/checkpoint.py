"""Versioned binary checkpoint container.

Layout: 6-byte magic "WSRPN1", little-endian uint32 header length, then a
UTF-8 JSON header, then the raw little-endian array payload. The header
records every array's name, shape, dtype, and byte offset, plus the config
snapshot, normalization statistics, iteration counter, and best validation
mAP. Optimizer moments are stored as arrays named ``opt.m.<param>`` /
``opt.v.<param>``.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"WSRPN1"


class CheckpointError(Exception):
    """Unreadable, truncated, or version-incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: dict          # name -> ndarray
    opt_state: dict       # {"step": int, "m": {...}, "v": {...}} or {}
    config: dict
    norm_stats: tuple     # (mean, std)
    iteration: int
    best_val_map: float


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, params: dict, opt_state: dict = None,
                    config: dict = None, norm_stats=(0.0, 1.0),
                    iteration: int = 0, best_val_map: float = 0.0) -> None:
    """Atomic write: build in a temp file, fsync, rename. A failed write
    removes the partial file."""
    arrays = dict(sorted(params.items()))
    opt_meta = {}
    if opt_state:
        opt_meta["step"] = int(opt_state["step"])
        for k in sorted(opt_state["m"]):
            arrays[f"opt.m.{k}"] = opt_state["m"][k]
            arrays[f"opt.v.{k}"] = opt_state["v"][k]

    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        nbytes = arr.nbytes
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": nbytes,
        })
        blobs.append(arr.tobytes())
        offset += nbytes

    header = {
        "format": MAGIC.decode("ascii"),
        "arrays": entries,
        "opt": opt_meta,
        "config": config or {},
        "norm_stats": list(norm_stats),
        "iteration": int(iteration),
        "best_val_map": float(best_val_map),
        "payload_nbytes": offset,
    }
    header_bytes = json.dumps(header).encode("utf-8")

    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic = data[:len(MAGIC)]
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise CheckpointError(
                f"checkpoint format version mismatch: file has "
                f"'{magic.decode('ascii', 'replace')}', supported is "
                f"'{MAGIC.decode('ascii')}'"
            )
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if len(data) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[header_start:header_end].decode("utf-8"))

    payload = data[header_end:]
    expected = header["payload_nbytes"]
    if len(payload) < expected:
        raise CheckpointError(
            f"{path}: truncated payload, expected {expected} bytes, "
            f"got {len(payload)}"
        )

    arrays = {}
    for e in header["arrays"]:
        arr = np.frombuffer(
            payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)),
            offset=e["offset"],
        ).reshape(e["shape"]).copy()
        arrays[e["name"]] = arr

    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    opt_state = {}
    if header["opt"]:
        opt_state = {
            "step": header["opt"]["step"],
            "m": {k[len("opt.m."):]: v for k, v in arrays.items()
                  if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in arrays.items()
                  if k.startswith("opt.v.")},
        }
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        config=header["config"],
        norm_stats=tuple(header["norm_stats"]),
        iteration=header["iteration"],
        best_val_map=header["best_val_map"],
    )
