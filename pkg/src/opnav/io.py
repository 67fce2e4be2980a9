"""File formats: 16-bit binary PGM rasters, JSON sidecars and CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from . import OpnavError, ParameterError
from .imaging import SATURATION_DN


class IoError(OpnavError, OSError):
    """Unreadable, missing or malformed file."""


def write_pgm(path, image, maxval: int = SATURATION_DN) -> None:
    """Round, clamp to ``[0, maxval]`` and write as binary P5."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ParameterError("PGM rasters are two-dimensional")
    data = np.clip(np.round(img), 0, maxval).astype(">u2" if maxval > 255 else "u1")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    try:
        Path(path).write_bytes(header + data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _tokens(buf: bytes, n: int):
    """First ``n`` whitespace-separated header tokens (skipping comments)
    and the offset just past the single whitespace byte that ends them."""
    out = []
    i = 0
    while len(out) < n:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise IoError("truncated PGM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        (magic, w, h, mx), off = _tokens(buf, 4)
        w, h, mx = int(w), int(h), int(mx)
    except (ValueError, IndexError) as exc:
        raise IoError(f"{path}: malformed PGM header") from exc
    if magic != b"P5":
        raise IoError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if mx > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(buf) - off < n:
        raise IoError(f"{path}: expected {n} bytes of pixel data, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w).astype(float)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_default)


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(dumps(obj) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{path}: invalid JSON ({exc})") from exc


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c, "")) for c in columns])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> List[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
