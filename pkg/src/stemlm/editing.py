"""Masked 10Hz prefix construction and training-sequence assembly.

An editing example prepends a temporally downsampled copy of the song's
tokens to the body: selected stems (and, for the multi-stage "other" stem, a
suffix of its streams) are replaced by MASK across the whole prefix, a SEP
frame separates prefix from body, and the cross-entropy loss covers only the
body. The delay pattern is applied to the concatenated sequence afterwards,
so prefix and body share one delayed coordinate system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .delay import apply_delay
from .errors import CropError, PlanError
from .layout import LayoutSpec, TokenGrid, default_layout, stream_index

DEFAULT_DOWNSAMPLE_FACTOR = 5
PAPER_PLAIN_CROP_FRAMES = 1500  # 30 s at 50 Hz
PAPER_EDIT_CROP_FRAMES = 1250  # 25 s at 50 Hz


@dataclass(frozen=True)
class EditPlan:
    """Which stems are hidden in the prefix, plus the downsample factor.

    ``other_masked_stages`` is meaningful only when the stem named "other" is
    masked; it must then be a contiguous run of stages ending at the last
    stage (the four options for a 4-stage stem are {4}, {3,4}, {2,3,4},
    {1,2,3,4}). Other multi-stream stems are always masked in full.
    """

    masked_stems: tuple[str, ...]
    other_masked_stages: tuple[int, ...] = ()
    downsample_factor: int = DEFAULT_DOWNSAMPLE_FACTOR

    def __post_init__(self):
        stems = tuple(self.masked_stems)
        object.__setattr__(self, "masked_stems", stems)
        if len(set(stems)) != len(stems):
            raise PlanError(f"duplicate stems in plan: {stems}")
        stages = tuple(sorted(int(s) for s in self.other_masked_stages))
        object.__setattr__(self, "other_masked_stages", stages)
        if "other" in stems:
            if not stages:
                raise PlanError("plan masks 'other' but names no stages")
        elif stages:
            raise PlanError("other_masked_stages given but 'other' is not masked")
        if stages:
            if stages[0] < 1 or list(stages) != list(range(stages[0], stages[-1] + 1)):
                raise PlanError(f"masked stages must be contiguous, got {stages}")
        if self.downsample_factor < 1:
            raise PlanError(f"downsample_factor must be >= 1, got {self.downsample_factor}")

    def validate_for_training(self) -> None:
        if not 1 <= len(self.masked_stems) <= 2:
            raise PlanError(
                f"training plans mask 1 or 2 stems, got {len(self.masked_stems)}"
            )

    def masked_stream_indices(self, layout: LayoutSpec) -> tuple[int, ...]:
        """Flat stream indices hidden by this plan under ``layout``."""
        indices: list[int] = []
        for name in self.masked_stems:
            stem = layout.stem(name)  # raises UnknownStemError
            if name == "other" and stem.n_streams > 1:
                stages = self.other_masked_stages
                if stages[-1] != stem.n_streams:
                    raise PlanError(
                        f"masked stages {stages} must end at the last stage "
                        f"({stem.n_streams})"
                    )
                indices.extend(stream_index(layout, name, s) for s in stages)
            else:
                indices.extend(
                    stream_index(layout, name, s) for s in range(1, stem.n_streams + 1)
                )
        return tuple(sorted(indices))


def sample_edit_plan(
    rng: np.random.Generator,
    layout: LayoutSpec | None = None,
    downsample_factor: int = DEFAULT_DOWNSAMPLE_FACTOR,
) -> EditPlan:
    """Draw a training plan: 1 or 2 stems uniformly, stems uniform without
    replacement, and a uniform stage suffix when "other" is selected."""
    layout = layout or default_layout()
    names = layout.stem_names
    n_masked = int(rng.integers(1, 3))
    chosen_idx = rng.choice(len(names), size=n_masked, replace=False)
    chosen = tuple(names[i] for i in sorted(chosen_idx))
    stages: tuple[int, ...] = ()
    if "other" in chosen:
        n_stages = layout.stem("other").n_streams
        k = int(rng.integers(1, n_stages + 1))
        stages = tuple(range(n_stages - k + 1, n_stages + 1))
    return EditPlan(chosen, stages, downsample_factor)


def downsample_grid(grid: TokenGrid, factor: int) -> TokenGrid:
    """Keep frames 0, factor, 2*factor, ...; length floor(T / factor)."""
    if factor < 1:
        raise CropError(f"downsample factor must be >= 1, got {factor}")
    if factor > grid.n_frames:
        raise CropError(
            f"downsample factor {factor} exceeds grid length {grid.n_frames}"
        )
    n_out = grid.n_frames // factor
    idx = np.arange(n_out) * factor
    return TokenGrid(
        grid.layout,
        grid.tokens[:, idx],
        grid.effective_frame_rate_hz / factor,
    )


@dataclass(frozen=True)
class ConditioningSequence:
    """Masked low-rate prefix + full-rate body + loss mask over their join.

    ``loss_mask`` covers the undelayed concatenated sequence
    [prefix | SEP | body]: False on every prefix frame and the separator,
    True on body frames.
    """

    prefix: TokenGrid
    body: TokenGrid
    loss_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.body.n_streams, self.prefix.n_frames + 1 + self.body.n_frames)
        if self.loss_mask.shape != expected:
            raise PlanError(
                f"loss_mask shape {self.loss_mask.shape} != expected {expected}"
            )

    def concatenated(self) -> TokenGrid:
        layout = self.body.layout
        sep = np.array([[layout.sep_id(i)] for i in range(layout.n_streams)], dtype=np.int64)
        tokens = np.concatenate([self.prefix.tokens, sep, self.body.tokens], axis=1)
        return TokenGrid(layout, tokens)

    def segment_flags(self) -> np.ndarray:
        """1 on prefix frames and the separator, 0 on body frames."""
        flags = np.zeros(self.prefix.n_frames + 1 + self.body.n_frames, dtype=np.uint8)
        flags[: self.prefix.n_frames + 1] = 1
        return flags


def build_conditioning(body: TokenGrid, plan: EditPlan) -> ConditioningSequence:
    """Downsample the body, blank the planned streams with MASK, set the loss mask."""
    masked = plan.masked_stream_indices(body.layout)
    prefix = downsample_grid(body, plan.downsample_factor)
    tokens = prefix.tokens.copy()
    for i in masked:
        tokens[i, :] = body.layout.mask_id(i)
    prefix = TokenGrid(body.layout, tokens, prefix.frame_rate_hz)
    S = body.n_streams
    loss_mask = np.zeros((S, prefix.n_frames + 1 + body.n_frames), dtype=bool)
    loss_mask[:, prefix.n_frames + 1 :] = True
    return ConditioningSequence(prefix, body, loss_mask)


def delayed_segment_flags(flags: np.ndarray, max_delay: int) -> np.ndarray:
    """Extend per-frame segment flags over the delay tail (tail counts as body)."""
    return np.concatenate([flags, np.zeros(max_delay, dtype=np.uint8)])


@dataclass(frozen=True)
class TrainingExample:
    """Delayed model input with its target loss mask and per-frame segment flags.

    ``loss_mask[i, t]`` marks whether the token at (stream i, frame t) counts
    as a prediction target; PAD_DELAY cells and the whole prefix are False.
    """

    tokens: np.ndarray
    loss_mask: np.ndarray
    segment_flags: np.ndarray
    is_edit: bool
    plan: EditPlan | None


def to_training_example(
    concat: TokenGrid,
    loss_mask: np.ndarray,
    segment_flags: np.ndarray,
    is_edit: bool,
    plan: EditPlan | None,
) -> TrainingExample:
    """Apply the delay pattern to an assembled sequence and realign its masks."""
    layout = concat.layout
    delayed = apply_delay(concat)
    L0 = concat.n_frames
    dmask = np.zeros(delayed.tokens.shape, dtype=bool)
    for i, d in enumerate(layout.delays):
        dmask[i, d : d + L0] = loss_mask[i]
    return TrainingExample(
        tokens=delayed.tokens,
        loss_mask=dmask,
        segment_flags=delayed_segment_flags(segment_flags, layout.max_delay),
        is_edit=is_edit,
        plan=plan,
    )


def assemble_training_example(
    grid: TokenGrid,
    rng: np.random.Generator,
    p_edit: float = 0.5,
    plain_frames: int = PAPER_PLAIN_CROP_FRAMES,
    edit_frames: int = PAPER_EDIT_CROP_FRAMES,
    downsample_factor: int = DEFAULT_DOWNSAMPLE_FACTOR,
) -> TrainingExample:
    """Draw one training sequence from a song grid.

    With probability ``p_edit`` the example is an editing task: the crop is
    shortened to ``edit_frames`` (taken from the start of the sampled
    window), a masked prefix is prepended and the loss covers only the body.
    Otherwise the example is a plain crop with a full loss mask. The delay
    pattern is applied to the final concatenated sequence.
    """
    if not 0.0 <= p_edit <= 1.0:
        raise PlanError(f"p_edit must be in [0, 1], got {p_edit}")
    if edit_frames > plain_frames:
        raise CropError(f"edit crop {edit_frames} exceeds plain crop {plain_frames}")
    if edit_frames < downsample_factor:
        raise CropError(
            f"edit crop {edit_frames} shorter than one downsample group "
            f"({downsample_factor})"
        )
    if grid.n_frames < plain_frames:
        raise CropError(
            f"grid has {grid.n_frames} frames, need {plain_frames} for a crop"
        )
    is_edit = rng.random() < p_edit
    start = int(rng.integers(0, grid.n_frames - plain_frames + 1))
    window = grid.crop(start, plain_frames)
    if is_edit:
        body = window.crop(0, edit_frames)
        plan = sample_edit_plan(rng, grid.layout, downsample_factor)
        seq = build_conditioning(body, plan)
        return to_training_example(
            seq.concatenated(), seq.loss_mask, seq.segment_flags(), True, plan
        )
    loss_mask = np.ones(window.tokens.shape, dtype=bool)
    flags = np.zeros(window.n_frames, dtype=np.uint8)
    return to_training_example(window, loss_mask, flags, False, None)
