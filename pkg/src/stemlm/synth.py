"""Synthetic multi-stem songs with known cross-stem structure.

Songs are generated on an exact frame grid (tempo is drawn as an integer
number of frames per beat) so the symbolic tokenizer round-trips exactly:

* bass stream: 0..11 sustained pitch class, 12..23 note onset, 24 rest;
* drums stream: bitmask of {kick=1, snare=2, hat=4} onsets, 0 = silence;
* other stage 1: chord id (root * 2 + minor), i.e. the harmony;
* other stages 2..4: texture codes derived from the bar's voicing
  (inversion, strum pattern, intensity) and the position within the bar,
  so regenerating only the residual stages changes texture, not harmony.

The generator enforces the cross-stem couplings the evaluation metrics
measure: bass pitches are chord tones with probability ``p_chord_tone`` and
drum events sit on the beat grid with probability ``p_on_beat``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError, LayoutError
from .grid_io import load_grid, save_grid
from .layout import LayoutSpec, TokenGrid, default_layout, layout_from_dict, layout_to_dict, stream_index
from .rvq import FrameSequence

BASS_REST_CODE = 24
BASS_ONSET_OFFSET = 12
N_PITCH_CLASSES = 12
DRUM_BITS = {"kick": 1, "snare": 2, "hat": 4}
CHORD_REST_CODE = 24
N_CHORDS = 24
BEATS_PER_BAR = 4
PHASE_BUCKETS = 16
BASS_LAG_FRAMES = 1  # bass plays behind the beat, after the bar's chord lands

DATASET_FORMAT_VERSION = 1
SPLIT_RULE = "id_mod_20_val18_test19"

MAJOR_INTERVALS = (0, 4, 7)
MINOR_INTERVALS = (0, 3, 7)


@dataclass(frozen=True)
class ChordSymbol:
    root: int
    quality: str  # "maj" | "min"

    def __post_init__(self):
        if not 0 <= self.root < N_PITCH_CLASSES or self.quality not in ("maj", "min"):
            raise DatasetError(f"bad chord ({self.root}, {self.quality!r})")

    @property
    def pitch_classes(self) -> frozenset[int]:
        intervals = MAJOR_INTERVALS if self.quality == "maj" else MINOR_INTERVALS
        return frozenset((self.root + i) % N_PITCH_CLASSES for i in intervals)

    @property
    def chord_id(self) -> int:
        return self.root * 2 + (self.quality == "min")

    @classmethod
    def from_id(cls, chord_id: int) -> "ChordSymbol":
        return cls(chord_id // 2, "min" if chord_id % 2 else "maj")


@dataclass(frozen=True)
class Voicing:
    inversion: int  # 0..2
    strum: int  # 0..3
    intensity: int  # 0..3


@dataclass(frozen=True)
class BassEvent:
    time: float
    pitch_class: int
    active: bool


@dataclass(frozen=True)
class DrumEvent:
    time: float
    drum: str


@dataclass(frozen=True)
class VoicingEvent:
    time: float
    voicing: Voicing


@dataclass(frozen=True)
class SymbolicSong:
    bpm: float
    beat_grid: tuple[float, ...]
    chords: tuple[ChordSymbol | None, ...]
    bass_events: tuple[BassEvent, ...]
    drum_events: tuple[DrumEvent, ...]
    other_events: tuple[VoicingEvent, ...]
    condition_id: int
    decode_warning_count: int = field(default=0, compare=False)


@dataclass(frozen=True)
class StyleParams:
    """Knobs of the song generator.

    The condition id encodes (tempo class, hat style); the model can
    therefore be steered by the discrete condition the way the paper's model
    is steered by text.
    """

    frame_rate_hz: float = 50.0
    frames_per_beat_choices: tuple[int, ...] = (16, 20, 25, 32)
    n_bars_range: tuple[int, int] = (4, 8)
    p_chord_tone: float = 1.0
    p_on_beat: float = 1.0
    bass_rest_prob: float = 0.1

    def __post_init__(self):
        if not self.frames_per_beat_choices or min(self.frames_per_beat_choices) < PHASE_BUCKETS:
            raise DatasetError(
                f"frames_per_beat must be >= {PHASE_BUCKETS}, got {self.frames_per_beat_choices}"
            )
        lo, hi = self.n_bars_range
        if lo < 1 or hi < lo:
            raise DatasetError(f"bad n_bars_range {self.n_bars_range}")
        for p in (self.p_chord_tone, self.p_on_beat, self.bass_rest_prob):
            if not 0.0 <= p <= 1.0:
                raise DatasetError(f"probabilities must be in [0, 1], got {p}")

    @property
    def n_conditions(self) -> int:
        return len(self.frames_per_beat_choices) * 2

    @property
    def min_frames(self) -> int:
        return min(self.frames_per_beat_choices) * BEATS_PER_BAR * self.n_bars_range[0]


def generate_song(style: StyleParams, rng: np.random.Generator) -> SymbolicSong:
    rate = style.frame_rate_hz
    tempo_class = int(rng.integers(len(style.frames_per_beat_choices)))
    fpb = style.frames_per_beat_choices[tempo_class]
    hat_style = int(rng.integers(2))  # 0: hats on every beat, 1: no hats
    condition_id = tempo_class * 2 + hat_style
    n_bars = int(rng.integers(style.n_bars_range[0], style.n_bars_range[1] + 1))
    n_beats = n_bars * BEATS_PER_BAR
    total_frames = n_beats * fpb

    beat_grid = tuple((b * fpb) / rate for b in range(n_beats))
    chords = tuple(ChordSymbol.from_id(int(rng.integers(N_CHORDS))) for _ in range(n_bars))
    other_events = tuple(
        VoicingEvent(
            (i * BEATS_PER_BAR * fpb) / rate,
            Voicing(int(rng.integers(3)), int(rng.integers(4)), int(rng.integers(4))),
        )
        for i in range(n_bars)
    )

    # leading silence covers the lag before the first onset
    bass_events: list[BassEvent] = [BassEvent(0.0, 0, False)]
    resting = True
    for b in range(n_beats):
        t = (b * fpb + BASS_LAG_FRAMES) / rate
        if rng.random() < style.bass_rest_prob:
            if not resting:
                bass_events.append(BassEvent(t, 0, False))
            resting = True
            continue
        chord = chords[b // BEATS_PER_BAR]
        if rng.random() < style.p_chord_tone:
            tones = sorted(chord.pitch_classes)
            pc = tones[int(rng.integers(len(tones)))]
        else:
            pc = int(rng.integers(N_PITCH_CLASSES))
        bass_events.append(BassEvent(t, pc, True))
        resting = False

    def jittered_frame(frame: int) -> int:
        if rng.random() < style.p_on_beat:
            return frame
        delta = int(rng.choice([-2, -1, 1, 2]))
        return int(np.clip(frame + delta, 0, total_frames - 1))

    drum_events: list[DrumEvent] = []
    for b in range(n_beats):
        frame = jittered_frame(b * fpb)
        drum_events.append(DrumEvent(frame / rate, "kick" if b % 2 == 0 else "snare"))
        if hat_style == 0:
            frame = jittered_frame(b * fpb)
            drum_events.append(DrumEvent(frame / rate, "hat"))
    # canonical order: time, then kick < snare < hat (jitter may reorder)
    drum_events.sort(key=lambda e: (e.time, DRUM_BITS[e.drum]))

    return SymbolicSong(
        bpm=rate * 60.0 / fpb,
        beat_grid=beat_grid,
        chords=chords,
        bass_events=tuple(bass_events),
        drum_events=tuple(drum_events),
        other_events=other_events,
        condition_id=condition_id,
    )


def _check_symbolic_layout(layout: LayoutSpec) -> None:
    names = layout.stem_names
    if names != ("bass", "drums", "other") or [s.n_streams for s in layout.stems] != [1, 1, 4]:
        raise LayoutError(
            "symbolic tokenizer needs the default bass(1)/drums(1)/other(4) layout, "
            f"got {[(s.name, s.n_streams) for s in layout.stems]}"
        )
    needed = (BASS_REST_CODE + 1, 8, CHORD_REST_CODE + 1, 3 * PHASE_BUCKETS, 16, 16)
    for i, n in enumerate(needed):
        if layout.codebook_size(i) < n:
            raise LayoutError(
                f"stream {i} needs a codebook of at least {n} ids, "
                f"got {layout.codebook_size(i)}"
            )


def _song_frames_per_beat(song: SymbolicSong, rate: float) -> int:
    if len(song.beat_grid) < 2:
        raise DatasetError("song needs at least two beats to infer its frame grid")
    spacing = (song.beat_grid[1] - song.beat_grid[0]) * rate
    fpb = round(spacing)
    if abs(spacing - fpb) > 1e-6 or fpb < 1:
        raise DatasetError(f"beat spacing {spacing} frames is not an integer frame count")
    return fpb


def _accent(p: int, fpb: int) -> int:
    if p == 0:
        return 1
    if p == fpb // 2:
        return 2
    return 0


def symbolic_tokenize(
    song: SymbolicSong, layout: LayoutSpec | None = None, n_frames: int | None = None
) -> TokenGrid:
    """Deterministic, invertible encoding of a song onto the default layout."""
    layout = layout or default_layout()
    _check_symbolic_layout(layout)
    rate = layout.frame_rate_hz
    fpb = _song_frames_per_beat(song, rate)
    total = len(song.chords) * BEATS_PER_BAR * fpb
    if n_frames is None:
        n_frames = total
    if n_frames > total:
        raise DatasetError(f"requested {n_frames} frames but song has {total}")
    if len(song.other_events) != len(song.chords):
        raise DatasetError("need one voicing event per bar")

    tokens = np.zeros((layout.n_streams, total), dtype=np.int64)

    bass = np.full(total, BASS_REST_CODE, dtype=np.int64)
    events = sorted(song.bass_events, key=lambda e: e.time)
    frames = [round(e.time * rate) for e in events]
    for f in frames:
        if not 0 <= f < total:
            raise DatasetError(f"bass event at frame {f} outside grid of {total} frames")
    frames.append(total)
    for k, e in enumerate(events):
        f, nxt = frames[k], frames[k + 1]
        if e.active:
            bass[f] = BASS_ONSET_OFFSET + e.pitch_class
            bass[f + 1 : nxt] = e.pitch_class
        else:
            bass[f:nxt] = BASS_REST_CODE
    tokens[0] = bass

    for e in song.drum_events:
        f = round(e.time * rate)
        if not 0 <= f < total:
            raise DatasetError(f"drum event at frame {f} outside grid of {total} frames")
        tokens[1, f] |= DRUM_BITS[e.drum]

    t = np.arange(total)
    bar = t // (BEATS_PER_BAR * fpb)
    t_in_bar = t % (BEATS_PER_BAR * fpb)
    p = t_in_bar % fpb
    beat_in_bar = t_in_bar // fpb
    chord_ids = np.array(
        [c.chord_id if c is not None else CHORD_REST_CODE for c in song.chords]
    )
    inv = np.array([ev.voicing.inversion for ev in song.other_events])
    strum = np.array([ev.voicing.strum for ev in song.other_events])
    inten = np.array([ev.voicing.intensity for ev in song.other_events])
    accent = np.where(p == 0, 1, np.where(p == fpb // 2, 2, 0))
    tokens[2] = chord_ids[bar]
    tokens[3] = inv[bar] * PHASE_BUCKETS + (p * PHASE_BUCKETS) // fpb
    tokens[4] = strum[bar] * 4 + beat_in_bar
    tokens[5] = inten[bar] * 4 + accent

    return TokenGrid(layout, tokens[:, :n_frames])


def _run_starts(frames: np.ndarray) -> np.ndarray:
    if frames.size == 0:
        return frames
    keep = np.ones(len(frames), dtype=bool)
    keep[1:] = np.diff(frames) > 1
    return frames[keep]


def _majority(values: np.ndarray) -> int | None:
    if values.size == 0:
        return None
    counts = Counter(values.tolist())
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return int(best[0])


def symbolic_detokenize(grid: TokenGrid, condition_id: int = -1) -> SymbolicSong:
    """Inverse of :func:`symbolic_tokenize`.

    Robust to model-generated grids: unknown or implausible codes decode to
    rests and are tallied in ``decode_warning_count`` instead of aborting.
    """
    _check_symbolic_layout(grid.layout)
    rate = grid.effective_frame_rate_hz
    T = grid.n_frames
    warnings = 0

    bass_codes = grid.tokens[0]
    bass_events: list[BassEvent] = []
    current_pc = None  # None while resting
    for t in range(T):
        c = int(bass_codes[t])
        if c > BASS_REST_CODE or c < 0:
            warnings += 1
            c = BASS_REST_CODE
        if c == BASS_REST_CODE:
            if current_pc is not None or t == 0:
                bass_events.append(BassEvent(t / rate, 0, False))
            current_pc = None
        elif c >= BASS_ONSET_OFFSET:
            current_pc = c - BASS_ONSET_OFFSET
            bass_events.append(BassEvent(t / rate, current_pc, True))
        else:
            if current_pc != c:
                # sustain without a matching onset; treat as an onset
                if t > 0:
                    warnings += 1
                bass_events.append(BassEvent(t / rate, c, True))
                current_pc = c

    drum_events: list[DrumEvent] = []
    for t in range(T):
        c = int(grid.tokens[1, t])
        if c < 0 or c > 7:
            warnings += 1
            continue
        for name, bit in DRUM_BITS.items():
            if c & bit:
                drum_events.append(DrumEvent(t / rate, name))

    o2, o3, o4 = grid.tokens[3], grid.tokens[4], grid.tokens[5]
    accent = np.where((o4 >= 0) & (o4 < 16), o4 % 4, 0)
    beat_frames = _run_starts(np.flatnonzero(accent == 1))
    if beat_frames.size >= 2:
        fpb = int(Counter(np.diff(beat_frames).tolist()).most_common(1)[0][0])
        bpm = rate * 60.0 / fpb
    else:
        fpb = 0
        bpm = 0.0
    beat_grid = tuple(int(f) / rate for f in beat_frames)

    bar_starts = [int(f) for f in beat_frames if 0 <= o3[f] < 16 and o3[f] % 4 == 0]
    if not bar_starts or bar_starts[0] != 0:
        bar_starts = [0] + bar_starts  # leading partial bar
    bounds = bar_starts + [T]

    chords: list[ChordSymbol | None] = []
    voicings: list[VoicingEvent] = []
    for k in range(len(bar_starts)):
        lo, hi = bounds[k], bounds[k + 1]
        seg1, seg2 = grid.tokens[2, lo:hi], o2[lo:hi]
        seg3, seg4 = o3[lo:hi], o4[lo:hi]
        chord_code = _majority(seg1[(seg1 >= 0) & (seg1 < N_CHORDS)])
        warnings += int(np.sum((seg1 < 0) | (seg1 > CHORD_REST_CODE)))
        chords.append(ChordSymbol.from_id(chord_code) if chord_code is not None else None)
        inv = _majority(seg2[(seg2 >= 0) & (seg2 < 3 * PHASE_BUCKETS)] // PHASE_BUCKETS)
        strum = _majority(seg3[(seg3 >= 0) & (seg3 < 16)] // 4)
        inten = _majority(seg4[(seg4 >= 0) & (seg4 < 16)] // 4)
        warnings += int(np.sum((seg2 < 0) | (seg2 >= 3 * PHASE_BUCKETS)))
        warnings += int(np.sum((seg3 < 0) | (seg3 >= 16)))
        warnings += int(np.sum((seg4 < 0) | (seg4 >= 16)))
        voicings.append(
            VoicingEvent(lo / rate, Voicing(inv or 0, strum or 0, inten or 0))
        )

    return SymbolicSong(
        bpm=bpm,
        beat_grid=beat_grid,
        chords=tuple(chords),
        bass_events=tuple(bass_events),
        drum_events=tuple(drum_events),
        other_events=tuple(voicings),
        condition_id=condition_id,
        decode_warning_count=warnings,
    )


# --- continuous feature rendering (material for the RVQ codec path) -------


def code_feature_basis(n_codes: int, dim: int, seed: int) -> np.ndarray:
    """Fixed random unit vectors, one per code; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((n_codes, dim))
    return basis / np.linalg.norm(basis, axis=1, keepdims=True)


def render_stem_frames(
    grid: TokenGrid,
    stem_name: str,
    dim: int = 8,
    noise_scale: float = 0.02,
    rng: np.random.Generator | None = None,
    basis_seed: int = 1234,
) -> FrameSequence:
    """Continuous stand-in features for one stem of a symbolic grid.

    Stage codes contribute at geometrically decreasing scales so a fitted
    RVQ recovers coarse-to-fine structure across its stages.
    """
    layout = grid.layout
    stem = layout.stem(stem_name)
    out = np.zeros((grid.n_frames, dim))
    for stage in range(1, stem.n_streams + 1):
        i = stream_index(layout, stem_name, stage)
        basis = code_feature_basis(layout.vocab_size(i), dim, basis_seed + 31 * i)
        out += (0.5 ** (stage - 1)) * basis[grid.tokens[i]]
    if noise_scale > 0:
        rng = rng or np.random.default_rng(0)
        out = out + noise_scale * rng.standard_normal(out.shape)
    return FrameSequence(out)


# --- dataset directory ----------------------------------------------------


def split_of(song_id: int) -> str:
    r = song_id % 20
    if r == 18:
        return "val"
    if r == 19:
        return "test"
    return "train"


def style_to_dict(style: StyleParams) -> dict:
    return {
        "frame_rate_hz": style.frame_rate_hz,
        "frames_per_beat_choices": list(style.frames_per_beat_choices),
        "n_bars_range": list(style.n_bars_range),
        "p_chord_tone": style.p_chord_tone,
        "p_on_beat": style.p_on_beat,
        "bass_rest_prob": style.bass_rest_prob,
    }


def style_from_dict(d: dict) -> StyleParams:
    return StyleParams(
        frame_rate_hz=float(d["frame_rate_hz"]),
        frames_per_beat_choices=tuple(int(x) for x in d["frames_per_beat_choices"]),
        n_bars_range=tuple(int(x) for x in d["n_bars_range"]),
        p_chord_tone=float(d["p_chord_tone"]),
        p_on_beat=float(d["p_on_beat"]),
        bass_rest_prob=float(d["bass_rest_prob"]),
    )


def song_to_dict(song: SymbolicSong) -> dict:
    return {
        "bpm": song.bpm,
        "beat_grid": list(song.beat_grid),
        "chords": [
            None if c is None else {"root": c.root, "quality": c.quality} for c in song.chords
        ],
        "bass_events": [[e.time, e.pitch_class, e.active] for e in song.bass_events],
        "drum_events": [[e.time, e.drum] for e in song.drum_events],
        "other_events": [
            [e.time, e.voicing.inversion, e.voicing.strum, e.voicing.intensity]
            for e in song.other_events
        ],
        "condition_id": song.condition_id,
    }


def song_from_dict(d: dict) -> SymbolicSong:
    return SymbolicSong(
        bpm=float(d["bpm"]),
        beat_grid=tuple(float(t) for t in d["beat_grid"]),
        chords=tuple(
            None if c is None else ChordSymbol(int(c["root"]), c["quality"])
            for c in d["chords"]
        ),
        bass_events=tuple(BassEvent(float(t), int(pc), bool(a)) for t, pc, a in d["bass_events"]),
        drum_events=tuple(DrumEvent(float(t), str(name)) for t, name in d["drum_events"]),
        other_events=tuple(
            VoicingEvent(float(t), Voicing(int(i), int(s), int(n)))
            for t, i, s, n in d["other_events"]
        ),
        condition_id=int(d["condition_id"]),
    )


def _song_path(root: Path, song_id: int) -> Path:
    return root / "songs" / f"song_{song_id:05d}.tok"


def _sidecar_path(root: Path, song_id: int) -> Path:
    return root / "songs" / f"song_{song_id:05d}.json"


def write_dataset(
    out_dir: str | Path,
    n_songs: int,
    style: StyleParams,
    seed: int,
    layout: LayoutSpec | None = None,
) -> dict:
    """Generate and persist a dataset; returns the manifest."""
    layout = layout or default_layout(frame_rate_hz=style.frame_rate_hz)
    root = Path(out_dir)
    (root / "songs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for song_id in range(n_songs):
        song = generate_song(style, rng)
        grid = symbolic_tokenize(song, layout)
        save_grid(grid, _song_path(root, song_id))
        sidecar = song_to_dict(song)
        sidecar["split"] = split_of(song_id)
        with open(_sidecar_path(root, song_id), "w") as f:
            json.dump(sidecar, f)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "stemlm-dataset",
        "n_songs": n_songs,
        "seed": seed,
        "style": style_to_dict(style),
        "layout": layout_to_dict(layout),
        "split_rule": SPLIT_RULE,
        "n_conditions": style.n_conditions,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


class SongDataset:
    """Read access to a dataset directory written by :func:`write_dataset`."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest.json under {self.root}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("kind") != "stemlm-dataset":
            raise DatasetError(f"{manifest_path} is not a stemlm dataset manifest")
        self.layout = layout_from_dict(self.manifest["layout"])
        self.style = style_from_dict(self.manifest["style"])
        self.n_songs = int(self.manifest["n_songs"])
        self.n_conditions = int(self.manifest["n_conditions"])

    def ids(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(self.n_songs))
        return [i for i in range(self.n_songs) if split_of(i) == split]

    def grid(self, song_id: int) -> TokenGrid:
        return load_grid(_song_path(self.root, song_id))

    def song(self, song_id: int) -> SymbolicSong:
        with open(_sidecar_path(self.root, song_id)) as f:
            return song_from_dict(json.load(f))

    def condition(self, song_id: int) -> int:
        return self.song(song_id).condition_id
