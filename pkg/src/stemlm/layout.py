"""Multi-stem, multi-stream token-grid data model.

A song is represented as S parallel integer token streams over T frames.
Streams are grouped into stems (bass, drums, other, ...); a stem may own
several streams when its tokenizer has multiple residual stages. Streams are
flattened in stem order, then stage order, so stream index <-> (stem, stage)
is a bijection.

Every stream reserves four special ids outside its codebook range:
PAD_DELAY (structural padding introduced by the delay pattern), MASK (hidden
prefix cells), SEP (prefix/body separator) and BOS (decoder start). By
default they sit densely at the top of the id space, ``codebook_size + k``,
but the offsets are part of the layout so alternative placements validate
correctly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import LayoutError, UnknownStemError

SPECIAL_KINDS = ("pad_delay", "mask", "sep", "bos")
N_SPECIALS = len(SPECIAL_KINDS)

DEFAULT_CODEBOOK_SIZE = 64
DEFAULT_FRAME_RATE_HZ = 50.0


@dataclass(frozen=True)
class StemSpec:
    """One instrument group: how many token streams it owns and their vocabulary."""

    name: str
    n_streams: int
    codebook_size: int

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "").isalnum():
            raise LayoutError(f"stem name must be a simple identifier, got {self.name!r}")
        if self.n_streams < 1:
            raise LayoutError(f"stem {self.name!r}: n_streams must be >= 1, got {self.n_streams}")
        if self.codebook_size < 2:
            raise LayoutError(
                f"stem {self.name!r}: codebook_size must be >= 2, got {self.codebook_size}"
            )


@dataclass(frozen=True)
class LayoutSpec:
    """Stem/stream structure shared by every grid, model and file in a run.

    ``delays`` has one entry per flattened stream. The first stream of every
    stem is a coarse stream and must have delay 0; residual streams may be
    shifted so that, under causal decoding, they are predicted after the
    coarse tokens they refine.
    """

    stems: tuple[StemSpec, ...]
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ
    delays: tuple[int, ...] = ()
    special_offsets: tuple[int, int, int, int] = (0, 1, 2, 3)

    def __post_init__(self):
        if not self.stems:
            raise LayoutError("layout needs at least one stem")
        names = [s.name for s in self.stems]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate stem names in layout: {names}")
        if self.frame_rate_hz <= 0:
            raise LayoutError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        if len(self.delays) != self.n_streams:
            raise LayoutError(
                f"expected {self.n_streams} delays (one per stream), got {len(self.delays)}"
            )
        if any(d < 0 for d in self.delays):
            raise LayoutError(f"delays must be non-negative, got {self.delays}")
        first = 0
        for stem in self.stems:
            if self.delays[first] != 0:
                raise LayoutError(
                    f"first stream of stem {stem.name!r} must have delay 0, "
                    f"got {self.delays[first]}"
                )
            first += stem.n_streams
        offs = self.special_offsets
        if len(offs) != N_SPECIALS or len(set(offs)) != N_SPECIALS or min(offs) < 0:
            raise LayoutError(f"special_offsets must be {N_SPECIALS} distinct non-negative ints")

    @property
    def n_streams(self) -> int:
        return sum(s.n_streams for s in self.stems)

    @property
    def max_delay(self) -> int:
        return max(self.delays)

    @property
    def stem_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.stems)

    def stem(self, name: str) -> StemSpec:
        for s in self.stems:
            if s.name == name:
                return s
        raise UnknownStemError(f"unknown stem {name!r}; layout has {self.stem_names}")

    def codebook_size(self, stream: int) -> int:
        name, _ = stem_stage(self, stream)
        return self.stem(name).codebook_size

    def special_id(self, stream: int, kind: str) -> int:
        return self.codebook_size(stream) + self.special_offsets[SPECIAL_KINDS.index(kind)]

    def pad_id(self, stream: int) -> int:
        return self.special_id(stream, "pad_delay")

    def mask_id(self, stream: int) -> int:
        return self.special_id(stream, "mask")

    def sep_id(self, stream: int) -> int:
        return self.special_id(stream, "sep")

    def bos_id(self, stream: int) -> int:
        return self.special_id(stream, "bos")

    def special_ids(self, stream: int) -> tuple[int, ...]:
        cb = self.codebook_size(stream)
        return tuple(cb + off for off in self.special_offsets)

    def vocab_size(self, stream: int) -> int:
        """Head/embedding size for a stream: codebook ids plus the special range."""
        return self.codebook_size(stream) + max(self.special_offsets) + 1


def make_layout(
    stem_specs: Iterable[StemSpec | tuple],
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
    delay_rule: str | Sequence[int] = "residual",
    special_offsets: tuple[int, int, int, int] = (0, 1, 2, 3),
) -> LayoutSpec:
    """Build a validated layout.

    ``delay_rule`` is either ``"residual"`` (stage k of a multi-stream stem is
    delayed by k-1 frames, the MusicGen-style partial pattern), ``"none"``
    (all zeros), or an explicit per-stream delay sequence.
    """
    stems = tuple(s if isinstance(s, StemSpec) else StemSpec(*s) for s in stem_specs)
    n_streams = sum(s.n_streams for s in stems)
    if isinstance(delay_rule, str):
        if delay_rule == "residual":
            delays = []
            for stem in stems:
                delays.extend(range(stem.n_streams))
            delays = tuple(delays)
        elif delay_rule == "none":
            delays = (0,) * n_streams
        else:
            raise LayoutError(f"unknown delay_rule {delay_rule!r}")
    else:
        delays = tuple(int(d) for d in delay_rule)
    return LayoutSpec(
        stems=stems,
        frame_rate_hz=frame_rate_hz,
        delays=delays,
        special_offsets=special_offsets,
    )


def default_layout(
    codebook_size: int = DEFAULT_CODEBOOK_SIZE,
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
) -> LayoutSpec:
    """The paper-shaped layout: bass (1 stream), drums (1), other (4 RVQ stages)."""
    return make_layout(
        [
            StemSpec("bass", 1, codebook_size),
            StemSpec("drums", 1, codebook_size),
            StemSpec("other", 4, codebook_size),
        ],
        frame_rate_hz=frame_rate_hz,
    )


def stream_index(layout: LayoutSpec, stem_name: str, stage: int) -> int:
    """Flattened stream index of (stem, stage). Stages are 1-based."""
    base = 0
    for stem in layout.stems:
        if stem.name == stem_name:
            if not 1 <= stage <= stem.n_streams:
                raise LayoutError(
                    f"stem {stem_name!r} has stages 1..{stem.n_streams}, got {stage}"
                )
            return base + stage - 1
        base += stem.n_streams
    raise UnknownStemError(f"unknown stem {stem_name!r}; layout has {layout.stem_names}")


def stem_stage(layout: LayoutSpec, stream: int) -> tuple[str, int]:
    """Inverse of :func:`stream_index`: (stem_name, stage) of a flat stream index."""
    if stream < 0:
        raise LayoutError(f"stream index must be non-negative, got {stream}")
    base = 0
    for stem in layout.stems:
        if stream < base + stem.n_streams:
            return stem.name, stream - base + 1
        base += stem.n_streams
    raise LayoutError(f"stream index {stream} out of range for {base} streams")


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """S x T integer token matrix plus the layout that gives it meaning.

    ``frame_rate_hz`` overrides the layout rate for downsampled grids; None
    means the layout's native rate. Token arrays are frozen after
    construction so grids can be shared across threads.
    """

    layout: LayoutSpec
    tokens: np.ndarray
    frame_rate_hz: float | None = None

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64)
        if arr.ndim != 2:
            raise LayoutError(f"tokens must be a 2-D array, got shape {arr.shape}")
        if arr.shape[0] != self.layout.n_streams:
            raise LayoutError(
                f"tokens have {arr.shape[0]} rows but layout has "
                f"{self.layout.n_streams} streams"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_streams(self) -> int:
        return self.tokens.shape[0]

    @property
    def effective_frame_rate_hz(self) -> float:
        return self.layout.frame_rate_hz if self.frame_rate_hz is None else self.frame_rate_hz

    def with_tokens(self, tokens: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.layout, tokens, self.frame_rate_hz)

    def crop(self, start: int, n_frames: int) -> "TokenGrid":
        if start < 0 or start + n_frames > self.n_frames:
            raise LayoutError(
                f"crop [{start}, {start + n_frames}) outside grid of {self.n_frames} frames"
            )
        return self.with_tokens(self.tokens[:, start : start + n_frames])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.effective_frame_rate_hz == other.effective_frame_rate_hz
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass(frozen=True)
class GridViolation:
    stream: int
    frame: int
    token: int
    reason: str


@dataclass(frozen=True)
class GridReport:
    """Outcome of :func:`validate_grid`. Never raised; inspect ``ok``."""

    violations: tuple[GridViolation, ...]
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first(self) -> GridViolation | None:
        return self.violations[0] if self.violations else None


_MAX_REPORTED = 64


def validate_grid(grid: TokenGrid) -> GridReport:
    """Check that every token is a valid codebook id or declared special id.

    Returns a structured report with the violating (stream, frame) cells in
    scan order (stream-major); collection stops after a fixed cap.
    """
    layout = grid.layout
    violations: list[GridViolation] = []
    truncated = False
    for i in range(layout.n_streams):
        cb = layout.codebook_size(i)
        specials = np.array(layout.special_ids(i))
        row = grid.tokens[i]
        valid = (row >= 0) & (row < cb) | np.isin(row, specials)
        bad = np.flatnonzero(~valid)
        for t in bad:
            if len(violations) >= _MAX_REPORTED:
                truncated = True
                break
            violations.append(
                GridViolation(
                    stream=i,
                    frame=int(t),
                    token=int(row[t]),
                    reason=f"token {int(row[t])} outside [0, {cb}) and not a special id",
                )
            )
        if truncated:
            break
    return GridReport(tuple(violations), truncated)


# --- serialization helpers shared by the container formats ---------------


def layout_to_dict(layout: LayoutSpec) -> dict:
    return {
        "stems": [
            {"name": s.name, "n_streams": s.n_streams, "codebook_size": s.codebook_size}
            for s in layout.stems
        ],
        "frame_rate_hz": layout.frame_rate_hz,
        "delays": list(layout.delays),
        "special_offsets": list(layout.special_offsets),
    }


def layout_from_dict(d: dict) -> LayoutSpec:
    return LayoutSpec(
        stems=tuple(
            StemSpec(s["name"], int(s["n_streams"]), int(s["codebook_size"]))
            for s in d["stems"]
        ),
        frame_rate_hz=float(d["frame_rate_hz"]),
        delays=tuple(int(x) for x in d["delays"]),
        special_offsets=tuple(int(x) for x in d.get("special_offsets", (0, 1, 2, 3))),
    )


def layout_json(layout: LayoutSpec) -> str:
    return json.dumps(layout_to_dict(layout), sort_keys=True)
