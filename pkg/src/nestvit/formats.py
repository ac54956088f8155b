"""On-disk formats: tensor blobs, checkpoints, PGM/PPM images, metrics CSV.

Tensor blob layout (all integers little-endian):

    magic  b"NSTT"
    rank   u32
    extent u32 * rank
    data   f32 * prod(extents), row major

A checkpoint is a single file: ``b"NSTC"``, a u32 manifest length, a JSON
manifest (tensor names in order, shapes, free-form metadata), then the blobs
concatenated in manifest order.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor

_MAGIC = b"NSTT"
_CKPT_MAGIC = b"NSTC"


class FormatError(ValueError):
    """Raised for malformed binary inputs."""


# ---------------------------------------------------------------------------
# tensor blobs
# ---------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor blob: wanted {n} bytes, got {len(buf)}")
    return buf


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    names = list(params.keys())
    manifest = {
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            write_tensor(fh, params[n].data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
        manifest = json.loads(_read_exact(fh, mlen).decode("utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            arr = read_tensor(fh)
            if list(arr.shape) != entry["shape"]:
                raise FormatError(
                    f"{path}: tensor '{entry['name']}' shape {list(arr.shape)} "
                    f"does not match manifest {entry['shape']}"
                )
            tensors[entry["name"]] = arr
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_pgm(path, values: np.ndarray) -> None:
    """Write a float map as binary PGM (P5), min-max normalized to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise FormatError(f"PGM wants a 2-D map, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    norm = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(norm * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (h, w, 3) image in [-1, 1] as binary PPM (P6)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM wants (h, w, 3), got shape {img.shape}")
    pix = np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back to floats in [-1, 1] (inverse of write_ppm)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h = (int(t) for t in parts[1].split())
    pix = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return pix.reshape(h, w, 3).astype(np.float64) / 127.5 - 1.0


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "eval_acc"]


def append_metrics(path, row: dict) -> None:
    """Append one epoch row, writing the header if the file is new."""
    import csv
    import os

    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in METRICS_HEADER})
