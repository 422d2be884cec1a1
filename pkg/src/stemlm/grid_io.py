"""Token-grid container format.

Layout of a ``.tok`` file (all integers little-endian):

    bytes 0..7    magic ``b"STEMGRID"``
    uint32        format version (currently 1)
    uint32        header length N
    N bytes       UTF-8 JSON header: layout dict (see ``layout_to_dict``),
                  ``n_frames`` and optional ``effective_frame_rate_hz``
    S*T*int32     row-major tokens (stream-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .layout import TokenGrid, layout_from_dict, layout_to_dict

GRID_MAGIC = b"STEMGRID"
GRID_FORMAT_VERSION = 1


def save_grid(grid: TokenGrid, path: str | Path) -> None:
    header = layout_to_dict(grid.layout)
    header["n_frames"] = grid.n_frames
    header["effective_frame_rate_hz"] = grid.frame_rate_hz
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tokens = np.ascontiguousarray(grid.tokens, dtype="<i4")
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", GRID_FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(tokens.tobytes())


def load_grid(path: str | Path) -> TokenGrid:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != GRID_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != GRID_FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported grid format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        layout = layout_from_dict(header)
        n_frames = int(header["n_frames"])
        payload = f.read()
    expected = layout.n_streams * n_frames * 4
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    tokens = np.frombuffer(payload, dtype="<i4").reshape(layout.n_streams, n_frames)
    rate = header.get("effective_frame_rate_hz")
    return TokenGrid(layout, tokens.astype(np.int64), rate)
