"""Grid file reader/writer (independent implementation of the shared format).

Header lines: magic "OG01", "<width> <height>", "<resolution>",
"<origin_x> <origin_y>", then width*height raw bytes {0,1,2} row-major.
"""

from __future__ import annotations

import io

import numpy as np

MAGIC = b"OG01"


def save_grid(cells: np.ndarray, resolution: float, origin, path):
    cells = np.ascontiguousarray(cells, dtype=np.uint8)
    h, w = cells.shape
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{resolution!r}\n".encode())
        f.write(f"{origin[0]!r} {origin[1]!r}\n".encode())
        f.write(cells.tobytes())


def load_grid(path):
    """Returns (cells, resolution, origin)."""
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.readline().strip() != MAGIC:
        raise ValueError(f"{path}: bad grid magic")
    w, h = (int(v) for v in buf.readline().split())
    resolution = float(buf.readline())
    ox, oy = (float(v) for v in buf.readline().split())
    body = buf.read()
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} cell bytes, got {len(body)}")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
    if cells.max(initial=0) > 2:
        raise ValueError(f"{path}: cell byte outside 0..2")
    return cells, resolution, (ox, oy)


def load_pairs(directory):
    """Load (input, target) cell arrays from a collect-style directory."""
    from pathlib import Path

    directory = Path(directory)
    pairs = []
    for inp in sorted(directory.glob("pair_*_input.og")):
        tgt = directory / inp.name.replace("_input", "_target")
        a, _, _ = load_grid(inp)
        b, _, _ = load_grid(tgt)
        pairs.append((a, b))
    return pairs
