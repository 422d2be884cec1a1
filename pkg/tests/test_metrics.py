import numpy as np
import pytest

from stemlm.editing import EditPlan
from stemlm.errors import LayoutError
from stemlm.layout import TokenGrid, default_layout
from stemlm.metrics import (
    BeatScore,
    beat_f_measure,
    bass_onset_times,
    grid_harmonic_inputs,
    harmonic_match,
    harmonic_match_grids,
    preservation_rate,
    symbolic_beats,
)
from stemlm.synth import StyleParams, generate_song, symbolic_tokenize

LAYOUT = default_layout()


# --- beat F-measure --------------------------------------------------------


def test_beat_identical_lists():
    score = beat_f_measure([0.5, 1.0, 1.5], [0.5, 1.0, 1.5])
    assert score.f_measure == 1.0
    assert score.precision == 1.0 and score.recall == 1.0


def test_beat_empty_estimate():
    score = beat_f_measure([0.5, 1.0], [])
    assert score.f_measure == 0.0
    score = beat_f_measure([], [0.5])
    assert score.f_measure == 0.0


def test_beat_both_empty():
    assert beat_f_measure([], []).f_measure == 1.0


def test_beat_hand_matching_example():
    score = beat_f_measure([1.0, 2.0, 3.0], [1.05, 2.2, 3.0], tolerance_s=0.07)
    assert score.n_matched == 2
    p = r = 2 / 3
    assert score.precision == p and score.recall == r
    assert score.f_measure == 2 * p * r / (p + r)


def test_beat_one_to_one_matching():
    # two estimates near one reference: only one may match
    score = beat_f_measure([1.0], [0.98, 1.02], tolerance_s=0.07)
    assert score.n_matched == 1
    assert score.precision == 0.5 and score.recall == 1.0


def test_beat_unsorted_rejected():
    with pytest.raises(ValueError):
        beat_f_measure([2.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        beat_f_measure([1.0], [2.0, 1.0])


def test_beat_swapping_roles_swaps_p_and_r():
    a = beat_f_measure([1.0, 2.0, 3.0], [1.0, 2.5], tolerance_s=0.07)
    b = beat_f_measure([1.0, 2.5], [1.0, 2.0, 3.0], tolerance_s=0.07)
    assert a.precision == b.recall and a.recall == b.precision
    assert a.f_measure == b.f_measure


# --- harmonic match --------------------------------------------------------


def _har_inputs(pcs, chord_masks, conf=None, bass_db=None, chord_db=None):
    T = len(pcs)
    return (
        np.asarray(pcs),
        np.ones(T) if conf is None else np.asarray(conf),
        np.zeros(T) if bass_db is None else np.asarray(bass_db),
        np.asarray(chord_masks),
        np.zeros(T) if chord_db is None else np.asarray(chord_db),
    )


def c_major_masks(T):
    masks = np.zeros((T, 12), dtype=bool)
    masks[:, [0, 4, 7]] = True
    return masks


def test_har_always_root_is_one():
    T = 50
    score = harmonic_match(*_har_inputs([0] * T, c_major_masks(T)))
    assert score.ratio == 1.0
    assert score.n_frames == T


def test_har_uniform_pitches_near_quarter():
    rng = np.random.default_rng(0)
    T = 200000
    pcs = rng.integers(0, 12, size=T)
    score = harmonic_match(*_har_inputs(pcs, c_major_masks(T)))
    assert abs(score.ratio - 0.25) < 0.01


def test_har_cycling_pitches_exact_quarter():
    pcs = np.arange(48) % 12  # each class 4 times; 3 of 12 are chord tones
    score = harmonic_match(*_har_inputs(pcs, c_major_masks(48)))
    assert score.ratio == 0.25


def test_har_all_below_gate_absent():
    T = 10
    score = harmonic_match(
        *_har_inputs([0] * T, c_major_masks(T), bass_db=[-50.0] * T)
    )
    assert score.ratio is None
    assert score.n_frames == 0


def test_har_gated_frames_do_not_change_ratio():
    T = 20
    pcs = np.array([0] * 10 + [1] * 10)
    conf = np.array([1.0] * 10 + [0.1] * 10)  # second half fails the gate
    with_gated = harmonic_match(*_har_inputs(pcs, c_major_masks(T), conf=conf))
    alone = harmonic_match(*_har_inputs(pcs[:10], c_major_masks(10)))
    assert with_gated.ratio == alone.ratio == 1.0


def test_har_confidence_threshold_is_strict():
    T = 4
    score = harmonic_match(
        *_har_inputs([0] * T, c_major_masks(T), conf=[0.75] * T)
    )
    assert score.ratio is None  # 0.75 is not > 0.75


def test_har_inactive_frames_excluded():
    pcs = np.array([0, -1, 0, -1])
    score = harmonic_match(*_har_inputs(pcs, c_major_masks(4)))
    assert score.n_frames == 2 and score.ratio == 1.0


# --- preservation ----------------------------------------------------------


def test_preservation_self_is_one():
    rng = np.random.default_rng(1)
    grid = TokenGrid(LAYOUT, rng.integers(0, 64, size=(6, 30)))
    report = preservation_rate(grid, grid, EditPlan(("drums",)))
    assert report.per_stream == (1.0,) * 6
    assert report.min_unmasked == 1.0


def test_preservation_random_near_chance():
    rng = np.random.default_rng(2)
    T = 20000
    a = TokenGrid(LAYOUT, rng.integers(0, 64, size=(6, T)))
    b_tokens = a.tokens.copy()
    b_tokens[1] = rng.integers(0, 64, size=T)
    b = TokenGrid(LAYOUT, b_tokens)
    report = preservation_rate(a, b, EditPlan(("drums",)))
    assert abs(report.per_stream[1] - 1 / 64) < 0.01
    assert report.min_unmasked == 1.0


def test_preservation_shape_mismatch():
    rng = np.random.default_rng(3)
    a = TokenGrid(LAYOUT, rng.integers(0, 64, size=(6, 10)))
    b = TokenGrid(LAYOUT, rng.integers(0, 64, size=(6, 12)))
    with pytest.raises(LayoutError):
        preservation_rate(a, b, EditPlan(("bass",)))


# --- symbolic extraction ---------------------------------------------------


def test_symbolic_beats_on_grid_spacing():
    rng = np.random.default_rng(4)
    style = StyleParams(p_on_beat=1.0, frames_per_beat_choices=(25,))
    song = generate_song(style, rng)
    assert song.bpm == 120.0
    beats = symbolic_beats(song)
    np.testing.assert_allclose(np.diff(beats), 0.5)
    grid = symbolic_tokenize(song)
    grid_beats = symbolic_beats(grid)
    np.testing.assert_allclose(grid_beats, beats)


def test_symbolic_beats_silent_drums():
    lay = default_layout()
    tokens = np.zeros((6, 40), dtype=np.int64)
    tokens[0, :] = 24  # bass rest
    assert symbolic_beats(TokenGrid(lay, tokens)).size == 0


def test_symbolic_beats_jitter_stays_within_a_frame_scale():
    rng = np.random.default_rng(5)
    style = StyleParams(p_on_beat=0.0, frames_per_beat_choices=(25,))
    song = generate_song(style, rng)
    grid = symbolic_tokenize(song)
    est = symbolic_beats(grid)
    ref = np.asarray(song.beat_grid)
    # jitter is at most 2 frames = 0.04 s
    score = beat_f_measure(ref, est, tolerance_s=0.05)
    assert score.recall > 0.9


def test_harmonic_match_grids_on_generated_song():
    rng = np.random.default_rng(6)
    song = generate_song(StyleParams(p_chord_tone=1.0), rng)
    grid = symbolic_tokenize(song)
    score = harmonic_match_grids(grid)
    assert score.ratio == 1.0

    song0 = generate_song(StyleParams(p_chord_tone=0.0, bass_rest_prob=0.0), rng)
    grid0 = symbolic_tokenize(song0)
    score0 = harmonic_match_grids(grid0)
    assert score0.ratio < 0.8  # random pitches sit near triad chance level


def test_bass_onsets_on_beats():
    rng = np.random.default_rng(7)
    song = generate_song(StyleParams(bass_rest_prob=0.0, frames_per_beat_choices=(20,)), rng)
    grid = symbolic_tokenize(song)
    onsets = bass_onset_times(grid)
    assert set(np.round(onsets * 50).astype(int) % 20) == {0}


def test_grid_harmonic_inputs_shapes():
    rng = np.random.default_rng(8)
    song = generate_song(StyleParams(), rng)
    grid = symbolic_tokenize(song)
    pc, conf, bass_db, masks, chord_db = grid_harmonic_inputs(grid)
    T = grid.n_frames
    assert pc.shape == (T,) and masks.shape == (T, 12)
    active = pc >= 0
    assert np.all(conf[active] == 1.0) and np.all(bass_db[~active] == -80.0)
