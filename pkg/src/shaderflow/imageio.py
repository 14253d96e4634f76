"""ASCII PGM/PPM and tensor-file map I/O.

Scalar maps (depth, shading) are P2 PGM; colour images and normal maps are
P3 PPM.  Values in [0, 1] map linearly onto 0..maxval; normals use
n = 2 v / maxval - 1.  Files ending in ``.tensor`` use the tensor text
format and hold the raw float values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError

MAXVAL = 65535


def _tokens(text: str) -> list[str]:
    out = []
    for line in text.split("\n"):
        out.extend(line.split("#", 1)[0].split())
    return out


def parse_pnm(text: str) -> tuple[np.ndarray, int]:
    """Integer samples (H x W or H x W x 3) and maxval of a P2/P3 file."""
    tok = _tokens(text)
    if len(tok) < 4 or tok[0] not in ("P2", "P3"):
        raise ValueError("not an ASCII PGM/PPM file")
    channels = 1 if tok[0] == "P2" else 3
    w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise ValueError(f"bad header: {w} x {h}, maxval {maxval}")
    values = np.array([int(v) for v in tok[4:]], dtype=np.int64)
    if values.size != w * h * channels:
        raise ValueError(f"expected {w * h * channels} samples, found {values.size}")
    if values.min() < 0 or values.max() > maxval:
        raise ValueError("sample outside 0..maxval")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return values.reshape(shape), maxval


def format_pnm(samples: np.ndarray, maxval: int = MAXVAL) -> str:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        magic = "P2"
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic = "P3"
    else:
        raise DimensionError(f"expected H x W or H x W x 3 samples, got {samples.shape}")
    h, w = samples.shape[:2]
    rows = [" ".join(str(int(v)) for v in row.ravel()) for row in samples]
    return f"{magic}\n{w} {h}\n{maxval}\n" + "\n".join(rows) + "\n"


def quantize(values: np.ndarray, maxval: int = MAXVAL) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * maxval).astype(np.int64)


def read_map(path: str | Path, *, normals: bool = False) -> np.ndarray:
    """Float map from a PGM/PPM or ``.tensor`` file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".tensor":
        return T.parse_tensor(text).data.copy()
    samples, maxval = parse_pnm(text)
    values = samples / maxval
    return 2.0 * values - 1.0 if normals else values


def write_map(path: str | Path, values: np.ndarray, *, normals: bool = False) -> None:
    """Write a float map; PGM/PPM values are clipped to the encodable range."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    if path.suffix == ".tensor":
        T.save_tensor(values, path)
        return
    if normals:
        values = (values + 1.0) / 2.0
    path.write_text(format_pnm(quantize(values)), encoding="utf-8")
