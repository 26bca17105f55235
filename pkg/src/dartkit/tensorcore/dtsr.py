"""DTSR tensor files and checkpoint directories.

Layout of a ``.dtsr`` file::

    DTSR1\\n
    dims=d1,d2,...\\n
    dtype=f32\\n
    <little-endian float32 values, row-major>
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"DTSR1\n"
PathLike = Union[str, os.PathLike]


class DtsrFormatError(ValueError):
    pass


def write_dtsr(path: PathLike, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    dims = ",".join(str(d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"dims={dims}\n".encode("ascii"))
        fh.write(b"dtype=f32\n")
        fh.write(arr.tobytes(order="C"))


def read_dtsr(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DtsrFormatError(f"{path}: bad magic")
        dims_line = fh.readline().decode("ascii").strip()
        dtype_line = fh.readline().decode("ascii").strip()
        payload = fh.read()
    if not dims_line.startswith("dims="):
        raise DtsrFormatError(f"{path}: expected dims= header, got {dims_line!r}")
    if dtype_line != "dtype=f32":
        raise DtsrFormatError(f"{path}: unsupported {dtype_line!r}")
    body = dims_line[5:]
    shape = tuple(int(d) for d in body.split(",")) if body else ()
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 4 * count:
        raise DtsrFormatError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(directory: PathLike, state: Mapping[str, np.ndarray]) -> None:
    """One DTSR file per entry plus ``index.txt`` (name, file, shape per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(state.items()):
        fname = f"{i:04d}.dtsr"
        write_dtsr(d / fname, arr)
        shape = "x".join(str(s) for s in np.shape(arr))
        lines.append(f"{name}\t{fname}\t{shape}")
    (d / "index.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: PathLike) -> Dict[str, np.ndarray]:
    d = Path(directory)
    state: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate((d / "index.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DtsrFormatError(f"index.txt line {lineno}: expected 3 tab-separated fields")
        name, fname, _ = parts
        state[name] = read_dtsr(d / fname)
    return state
