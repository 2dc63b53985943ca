"""On-disk formats: the TSQ sequence container and binary PGM images.

TSQ layout: 8-byte magic ``TSQv0001``, a 4-byte little-endian length, a UTF-8
JSON header ``{n_t, n_y, n_x, dt, dtype: "f32le"}``, then ``n_t*n_y*n_x``
little-endian float32 values in frame-major, row-major order. Values are
stored at 32-bit precision; in-memory compute stays 64-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .sequence import ThermogramSequence, ValidationError

TSQ_MAGIC = b"TSQv0001"


class FormatError(ValueError):
    """Raised for malformed or truncated container files."""


def write_tsq(seq: ThermogramSequence, path: str | Path) -> None:
    values = np.ascontiguousarray(seq.frames, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise ValidationError("refusing to write non-finite values")
    header = {
        "n_t": seq.n_t,
        "n_y": seq.n_y,
        "n_x": seq.n_x,
        "dt": seq.dt,
        "dtype": "f32le",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TSQ_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())


def read_tsq(path: str | Path) -> ThermogramSequence:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TSQ_MAGIC:
            raise FormatError(f"unsupported container version/magic: {magic!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad JSON header: {exc}") from exc
        for key in ("n_t", "n_y", "n_x", "dt", "dtype"):
            if key not in header:
                raise FormatError(f"header missing key {key!r}")
        if header["dtype"] != "f32le":
            raise FormatError(f"unsupported dtype {header['dtype']!r}")
        n_t, n_y, n_x = int(header["n_t"]), int(header["n_y"]), int(header["n_x"])
        if n_t < 2 or n_y < 1 or n_x < 1 or not float(header["dt"]) > 0:
            raise FormatError(f"invalid dimensions in header: {header}")
        payload = fh.read()
    expected = 4 * n_t * n_y * n_x
    if len(payload) != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    frames = values.reshape(n_t, n_y, n_x)
    return ThermogramSequence(frames=frames, dt=float(header["dt"]))


def write_pgm(img: np.ndarray, path: str | Path, maxval: int = 255) -> None:
    """Write a 2-D integer image as binary PGM (P5).

    16-bit samples (maxval > 255) are written big-endian per the PGM spec.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM image must be 2-D, got shape {img.shape}")
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    if img.min() < 0 or img.max() > maxval:
        raise FormatError("image values out of range for maxval")
    n_y, n_x = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{n_x} {n_y}\n{maxval}\n".encode("ascii"))
        fh.write(img.astype(dtype).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) into a 2-D integer array."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM: {fields[0]!r}")
    n_x, n_y, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    itemsize = 2 if maxval > 255 else 1
    expected = n_x * n_y * itemsize
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(payload, dtype=dtype).reshape(n_y, n_x).astype(np.int64)
