"""Partial delay pattern over token streams.

Residual streams are shifted right by their per-stream delay so that, under
causal decoding, a residual token is predicted after the coarse tokens of the
same frame. Vacated cells hold the stream's PAD_DELAY id; every stream is
also tail-padded so all streams end aligned at T + max(delay) frames, which
keeps batch shapes fixed.

``remove_delay`` is the exact inverse and rejects grids whose PAD_DELAY
placement does not match the layout's delays.
"""

from __future__ import annotations

import numpy as np

from .errors import MalformedGridError
from .layout import TokenGrid


def apply_delay(grid: TokenGrid) -> TokenGrid:
    layout = grid.layout
    T = grid.n_frames
    max_d = layout.max_delay
    out = np.empty((layout.n_streams, T + max_d), dtype=np.int64)
    for i, d in enumerate(layout.delays):
        pad = layout.pad_id(i)
        out[i, :d] = pad
        out[i, d : d + T] = grid.tokens[i]
        out[i, d + T :] = pad
    return TokenGrid(layout, out, grid.frame_rate_hz)


def remove_delay(delayed: TokenGrid) -> TokenGrid:
    layout = delayed.layout
    max_d = layout.max_delay
    T = delayed.n_frames - max_d
    if T < 0:
        raise MalformedGridError(
            f"delayed grid has {delayed.n_frames} frames, fewer than max delay {max_d}"
        )
    out = np.empty((layout.n_streams, T), dtype=np.int64)
    for i, d in enumerate(layout.delays):
        pad = layout.pad_id(i)
        row = delayed.tokens[i]
        head, payload, tail = row[:d], row[d : d + T], row[d + T :]
        if not np.all(head == pad) or not np.all(tail == pad):
            frame = _first_bad_pad(head, tail, pad, d, T)
            raise MalformedGridError(
                f"stream {i}: expected PAD_DELAY at frame {frame} (delay {d})"
            )
        inside = np.flatnonzero(payload == pad)
        if inside.size:
            raise MalformedGridError(
                f"stream {i}: PAD_DELAY inside payload at frame {int(inside[0]) + d}"
            )
        out[i] = payload
    return TokenGrid(layout, out, delayed.frame_rate_hz)


def _first_bad_pad(head: np.ndarray, tail: np.ndarray, pad: int, d: int, T: int) -> int:
    bad = np.flatnonzero(head != pad)
    if bad.size:
        return int(bad[0])
    bad = np.flatnonzero(tail != pad)
    return int(bad[0]) + d + T
