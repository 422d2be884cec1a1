"""Objective editing metrics: rhythm match (beat F-measure), harmonic match
(chord-tone ratio), and stem preservation.

At desk scale the learned beat tracker and pitch estimator are replaced by
exact symbolic extraction, but the confidence and loudness gates stay in the
interface so real estimators can be plugged in later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .editing import EditPlan
from .errors import LayoutError
from .layout import TokenGrid
from .synth import (
    BASS_ONSET_OFFSET,
    BASS_REST_CODE,
    CHORD_REST_CODE,
    ChordSymbol,
    N_CHORDS,
    SymbolicSong,
)

DEFAULT_BEAT_TOLERANCE_S = 0.07
DEFAULT_CONFIDENCE_THRESHOLD = 0.75
DEFAULT_LOUDNESS_GATE_DB = -35.0

ACTIVE_DB = 0.0
SILENT_DB = -80.0


@dataclass(frozen=True)
class BeatScore:
    f_measure: float
    precision: float
    recall: float
    n_reference: int
    n_estimated: int
    n_matched: int


def beat_f_measure(
    reference_beats,
    estimated_beats,
    tolerance_s: float = DEFAULT_BEAT_TOLERANCE_S,
) -> BeatScore:
    """Greedy one-to-one matching of sorted beat lists within +-tolerance.

    Both lists empty scores F=1; exactly one empty scores F=0.
    """
    ref = np.asarray(reference_beats, dtype=float)
    est = np.asarray(estimated_beats, dtype=float)
    if tolerance_s <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance_s}")
    for name, arr in (("reference", ref), ("estimated", est)):
        if arr.size > 1 and np.any(np.diff(arr) < 0):
            raise ValueError(f"{name} beats must be sorted")
    if ref.size == 0 and est.size == 0:
        return BeatScore(1.0, 1.0, 1.0, 0, 0, 0)
    if ref.size == 0 or est.size == 0:
        return BeatScore(0.0, 0.0, 0.0, int(ref.size), int(est.size), 0)
    i = j = matched = 0
    while i < ref.size and j < est.size:
        if abs(est[j] - ref[i]) <= tolerance_s:
            matched += 1
            i += 1
            j += 1
        elif est[j] < ref[i] - tolerance_s:
            j += 1
        else:
            i += 1
    precision = matched / est.size
    recall = matched / ref.size
    f = 2 * precision * recall / (precision + recall) if matched else 0.0
    return BeatScore(f, precision, recall, int(ref.size), int(est.size), matched)


@dataclass(frozen=True)
class HarmonicScore:
    """Chord-tone ratio over gated frames; ``ratio`` is None when no frame
    survives the gates (absent, not zero)."""

    ratio: float | None
    n_frames: int
    n_matched: int


def harmonic_match(
    bass_pitch_class: np.ndarray,
    bass_confidence: np.ndarray,
    bass_loudness_db: np.ndarray,
    chord_pitch_classes: np.ndarray,
    chord_loudness_db: np.ndarray,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    loudness_gate_db: float = DEFAULT_LOUDNESS_GATE_DB,
) -> HarmonicScore:
    """Ratio of frames where the bass plays a chord tone.

    ``bass_pitch_class`` holds -1 on inactive frames; ``chord_pitch_classes``
    is a (T, 12) boolean mask. Frames failing any gate (inactive bass,
    confidence <= threshold, either stem below the loudness gate) are
    excluded from numerator and denominator.
    """
    bass_pc = np.asarray(bass_pitch_class)
    conf = np.asarray(bass_confidence, dtype=float)
    bass_db = np.asarray(bass_loudness_db, dtype=float)
    chords = np.asarray(chord_pitch_classes, dtype=bool)
    chord_db = np.asarray(chord_loudness_db, dtype=float)
    T = len(bass_pc)
    if not (len(conf) == len(bass_db) == chords.shape[0] == len(chord_db) == T):
        raise ValueError("harmonic_match inputs must share the same frame count")
    if chords.shape[1] != 12:
        raise ValueError(f"chord masks must have 12 pitch classes, got {chords.shape}")
    gated = (
        (bass_pc >= 0)
        & (conf > confidence_threshold)
        & (bass_db > loudness_gate_db)
        & (chord_db > loudness_gate_db)
    )
    idx = np.flatnonzero(gated)
    if idx.size == 0:
        return HarmonicScore(None, 0, 0)
    hits = chords[idx, bass_pc[idx]]
    return HarmonicScore(float(hits.mean()), int(idx.size), int(hits.sum()))


@dataclass(frozen=True)
class PreservationReport:
    per_stream: tuple[float, ...]
    masked_streams: tuple[int, ...]

    @property
    def unmasked_streams(self) -> tuple[int, ...]:
        return tuple(i for i in range(len(self.per_stream)) if i not in self.masked_streams)

    @property
    def unmasked_rates(self) -> tuple[float, ...]:
        return tuple(self.per_stream[i] for i in self.unmasked_streams)

    @property
    def min_unmasked(self) -> float:
        rates = self.unmasked_rates
        return min(rates) if rates else 1.0


def preservation_rate(
    source: TokenGrid, edited: TokenGrid, plan: EditPlan
) -> PreservationReport:
    """Per-stream fraction of token-identical frames between source and edit."""
    if source.layout != edited.layout:
        raise LayoutError("preservation_rate needs grids over the same layout")
    if source.tokens.shape != edited.tokens.shape:
        raise LayoutError(
            f"shape mismatch: {source.tokens.shape} vs {edited.tokens.shape}"
        )
    same = source.tokens == edited.tokens
    rates = tuple(float(row.mean()) for row in same)
    return PreservationReport(rates, plan.masked_stream_indices(source.layout))


def symbolic_beats(
    source: TokenGrid | SymbolicSong, frame_rate_hz: float | None = None
) -> np.ndarray:
    """Beat estimates from symbolic drums: kick/snare onset times, deduplicated
    within one frame."""
    if isinstance(source, SymbolicSong):
        rate = frame_rate_hz or 50.0
        frames = sorted(
            {round(e.time * rate) for e in source.drum_events if e.drum in ("kick", "snare")}
        )
        return np.array([f / rate for f in frames])
    rate = source.effective_frame_rate_hz
    codes = source.tokens[1]
    onsets = np.flatnonzero((codes >= 1) & (codes <= 7) & ((codes & 3) > 0))
    return onsets / rate


def bass_onset_times(grid: TokenGrid) -> np.ndarray:
    """Note-onset times of the symbolic bass stream."""
    codes = grid.tokens[0]
    onsets = np.flatnonzero(
        (codes >= BASS_ONSET_OFFSET) & (codes < BASS_REST_CODE)
    )
    return onsets / grid.effective_frame_rate_hz


def grid_harmonic_inputs(bass_grid: TokenGrid, chord_grid: TokenGrid | None = None):
    """Per-frame HAR inputs from symbolic grids.

    In the symbolic pipeline confidence is 1.0 for active notes and loudness
    is a binary activity proxy (0 dB active, -80 dB silent). ``chord_grid``
    defaults to ``bass_grid`` (chords read from other stage 1).
    """
    chord_grid = chord_grid if chord_grid is not None else bass_grid
    if bass_grid.n_frames != chord_grid.n_frames:
        raise LayoutError("bass and chord grids must share the frame count")
    bass = bass_grid.tokens[0]
    active = (bass >= 0) & (bass < BASS_REST_CODE)
    pc = np.where(active, bass % BASS_ONSET_OFFSET, -1)
    conf = np.where(active, 1.0, 0.0)
    bass_db = np.where(active, ACTIVE_DB, SILENT_DB)
    chord_codes = chord_grid.tokens[2]
    T = chord_grid.n_frames
    masks = np.zeros((T, 12), dtype=bool)
    chord_db = np.full(T, SILENT_DB)
    valid = (chord_codes >= 0) & (chord_codes < N_CHORDS)
    for cid in np.unique(chord_codes[valid]):
        sel = chord_codes == cid
        for p in ChordSymbol.from_id(int(cid)).pitch_classes:
            masks[sel, p] = True
        chord_db[sel] = ACTIVE_DB
    return pc, conf, bass_db, masks, chord_db


def harmonic_match_grids(
    bass_grid: TokenGrid,
    chord_grid: TokenGrid | None = None,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    loudness_gate_db: float = DEFAULT_LOUDNESS_GATE_DB,
) -> HarmonicScore:
    """HAR between a symbolic bass stream and a chord stream."""
    pc, conf, bass_db, masks, chord_db = grid_harmonic_inputs(bass_grid, chord_grid)
    return harmonic_match(
        pc, conf, bass_db, masks, chord_db, confidence_threshold, loudness_gate_db
    )
