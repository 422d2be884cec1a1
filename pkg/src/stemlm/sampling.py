"""Autoregressive decoding: text-to-music style generation and stem editing.

Decoding happens in the delayed domain. Structural cells (PAD_DELAY heads
and tails, the masked 10Hz prefix, the separator) and — in forced mode —
every unmasked stream's body tokens are pinned by a logit override: the
pinned token gets probability one, so the model's context always contains
the true forced tokens. Free cells are sampled with temperature + top-k,
constrained to codebook ids so the output grid never contains specials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .delay import apply_delay, remove_delay
from .editing import EditPlan, build_conditioning, delayed_segment_flags
from .errors import (
    CodecError,
    CropError,
    DecodeParamError,
    LayoutError,
    SequenceTooLongError,
)
from .layout import LayoutSpec, TokenGrid
from .model import StemTransformer
from .rvq import CodebookSet, FrameSequence, rvq_encode

DEFAULT_TOP_K = 250
DEFAULT_TEMPERATURE = 1.0
DEFAULT_CFG_SCALE = 3.0


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = DEFAULT_TEMPERATURE
    top_k: int = DEFAULT_TOP_K
    cfg_scale: float | None = DEFAULT_CFG_SCALE  # None disables guidance

    def __post_init__(self):
        if self.temperature <= 0:
            raise DecodeParamError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k < 1:
            raise DecodeParamError(f"top_k must be >= 1, got {self.top_k}")
        if self.cfg_scale is not None and self.cfg_scale <= 0:
            raise DecodeParamError(f"cfg_scale must be > 0, got {self.cfg_scale}")


def sample_from_logits(
    logits: np.ndarray, params: DecodeParams, rng: np.random.Generator
) -> int:
    """Temperature + top-k sampling; numerically stable down to tiny
    temperatures (the limit is greedy argmax)."""
    logits = np.asarray(logits, dtype=np.float64)
    finite_max = logits.max()
    if not np.isfinite(finite_max):
        raise DecodeParamError("no admissible token: all logits are -inf")
    order = np.argsort(-logits, kind="stable")
    keep = order[: min(params.top_k, len(order))]
    scaled = (logits[keep] - finite_max) / params.temperature
    probs = np.exp(scaled)
    total = probs.sum()
    if total == 0.0:  # extreme temperature underflow: fall back to argmax
        return int(keep[0])
    probs /= total
    return int(keep[rng.choice(len(keep), p=probs)])


def _pinned_logits(vocab_size: int, token: int) -> np.ndarray:
    out = np.full(vocab_size, -np.inf)
    out[token] = 0.0
    return out


def _codebook_only(logits: np.ndarray, codebook_size: int) -> np.ndarray:
    out = logits.copy()
    out[codebook_size:] = -np.inf
    return out


class _Decoder:
    """One decoding session; drives the model incrementally over columns."""

    def __init__(
        self,
        model: StemTransformer,
        condition_id: int | None,
        params: DecodeParams,
        rng: np.random.Generator,
    ):
        self.model = model
        self.params = params
        self.rng = rng
        self.layout = model.config.layout
        null_id = model.config.null_condition_id
        self.guided = (
            condition_id is not None
            and params.cfg_scale is not None
            and params.cfg_scale != 1.0
        )
        if condition_id is None:
            cond_rows = [null_id]
        elif self.guided:
            cond_rows = [condition_id, null_id]
        else:
            cond_rows = [condition_id]
        self.cond_ids = torch.tensor(cond_rows, dtype=torch.long)
        self.batch = len(cond_rows)

    def _combine(self, logits: list[torch.Tensor]) -> list[np.ndarray]:
        rows = [l.double().numpy() for l in logits]
        if not self.guided:
            return [r[0] for r in rows]
        scale = self.params.cfg_scale
        return [r[1] + scale * (r[0] - r[1]) for r in rows]

    def run(self, known: np.ndarray, segment_flags: np.ndarray) -> np.ndarray:
        """Fill every -1 cell of ``known`` by constrained sampling."""
        model, layout = self.model, self.layout
        S, L = known.shape
        if L > model.config.max_frames:
            raise SequenceTooLongError(
                f"decoding {L} columns exceeds max_frames={model.config.max_frames}"
            )
        out = known.copy()
        unknown_any = (out == -1).any(axis=0)
        if not unknown_any.any():
            return out
        start = int(np.argmax(unknown_any))
        flags_t = torch.from_numpy(
            np.broadcast_to(segment_flags, (self.batch, L)).copy()
        ).long()
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                cache = model.new_cache()
                logits = self._prefill(cache, out[:, :start], flags_t[:, :start])
                for t in range(start, L):
                    combined = self._combine(logits)
                    for i in range(S):
                        if out[i, t] >= 0:
                            stream_logits = _pinned_logits(
                                layout.vocab_size(i), out[i, t]
                            )
                        else:
                            stream_logits = _codebook_only(
                                combined[i], layout.codebook_size(i)
                            )
                        out[i, t] = sample_from_logits(
                            stream_logits, self.params, self.rng
                        )
                    if t + 1 < L:
                        prev = torch.from_numpy(
                            np.broadcast_to(out[:, t], (self.batch, S)).copy()
                        ).long()
                        logits = model.step_logits(
                            cache, self.cond_ids, prev, flags_t[:, t]
                        )
        finally:
            model.train(was_training)
        return out

    def _prefill(
        self, cache: list[dict], columns: np.ndarray, flags: torch.Tensor
    ) -> list[torch.Tensor]:
        model = self.model
        K = columns.shape[1]
        first = model.first_slot(self.cond_ids)
        if K > 0:
            toks = torch.from_numpy(
                np.broadcast_to(columns, (self.batch,) + columns.shape).copy()
            ).long()
            e = torch.cat([first, model.token_slot(toks, flags)], dim=1)
        else:
            e = first
        e = e + model.positions[: K + 1].to(model.dtype)
        h = model.backbone(e, cache)
        return [l[:, -1, :] for l in model.head_logits(h)]


def generate(
    model: StemTransformer,
    condition_id: int | None,
    n_frames: int,
    params: DecodeParams = DecodeParams(),
    seed: int = 0,
) -> TokenGrid:
    """Sample all streams frame-by-frame in the delayed domain, then remove
    the delay. NULL condition (None) gives unconditional generation."""
    layout = model.config.layout
    if n_frames < 1:
        raise CropError(f"n_frames must be >= 1, got {n_frames}")
    max_d = layout.max_delay
    L = n_frames + max_d
    if L > model.config.max_frames:
        raise SequenceTooLongError(
            f"n_frames + max delay = {L} exceeds max_frames={model.config.max_frames}"
        )
    known = np.full((layout.n_streams, L), -1, dtype=np.int64)
    for i, d in enumerate(layout.delays):
        known[i, :d] = layout.pad_id(i)
        known[i, n_frames + d :] = layout.pad_id(i)
    flags = np.zeros(L, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    decoder = _Decoder(model, condition_id, params, rng)
    delayed = decoder.run(known, flags)
    return remove_delay(TokenGrid(layout, delayed))


def edit(
    model: StemTransformer,
    source: TokenGrid,
    plan: EditPlan,
    condition_id: int | None = None,
    mode: str = "forced",
    params: DecodeParams = DecodeParams(),
    seed: int = 0,
) -> TokenGrid:
    """Regenerate the planned stems of ``source`` behind a masked 10Hz prefix.

    In forced mode every unmasked stream's body token is pinned to the
    source; in free mode all streams are resampled (a variation of the
    source, reconstructed from the prefix). The prefix itself is input in
    both modes, never regenerated.
    """
    if mode not in ("forced", "free"):
        raise DecodeParamError(f"mode must be 'forced' or 'free', got {mode!r}")
    layout = model.config.layout
    if source.layout != layout:
        raise LayoutError("source grid layout differs from the model's layout")
    if source.n_frames < plan.downsample_factor:
        raise CropError(
            f"source has {source.n_frames} frames, shorter than one downsample "
            f"group ({plan.downsample_factor})"
        )
    masked = plan.masked_stream_indices(layout)
    seq = build_conditioning(source, plan)
    concat = seq.concatenated()
    delayed = apply_delay(concat)
    P = seq.prefix.n_frames
    T = source.n_frames
    L = delayed.n_frames
    if L > model.config.max_frames:
        raise SequenceTooLongError(
            f"edit sequence of {L} columns exceeds max_frames={model.config.max_frames}"
        )
    known = delayed.tokens.copy()
    for i, d in enumerate(layout.delays):
        if mode == "free" or i in masked:
            known[i, P + 1 + d : P + 1 + T + d] = -1
    flags = delayed_segment_flags(seq.segment_flags(), layout.max_delay)
    rng = np.random.default_rng(seed)
    decoder = _Decoder(model, condition_id, params, rng)
    sampled = decoder.run(known, flags)
    undelayed = remove_delay(TokenGrid(layout, sampled))
    return undelayed.crop(P + 1, T)


def tokenize_external(
    stem_frames: dict[str, FrameSequence],
    codebooks: dict[str, CodebookSet],
    layout: LayoutSpec,
) -> tuple[TokenGrid, EditPlan]:
    """Encode the provided stems with their fitted codecs; absent stems are
    filled with MASK and named in the returned edit plan."""
    if not stem_frames:
        raise CodecError("no stems provided")
    lengths = {name: len(f) for name, f in stem_frames.items()}
    if len(set(lengths.values())) != 1:
        raise CodecError(f"stem lengths differ: {lengths}")
    T = next(iter(lengths.values()))
    for name in stem_frames:
        layout.stem(name)  # raises UnknownStemError
        if name not in codebooks:
            raise CodecError(f"no fitted codebooks for stem {name!r}")
    tokens = np.zeros((layout.n_streams, T), dtype=np.int64)
    base = 0
    absent = []
    for stem in layout.stems:
        rows = slice(base, base + stem.n_streams)
        if stem.name in stem_frames:
            cbs = codebooks[stem.name]
            if cbs.n_stages != stem.n_streams:
                raise CodecError(
                    f"stem {stem.name!r}: codec has {cbs.n_stages} stages but the "
                    f"layout expects {stem.n_streams}"
                )
            encoded = rvq_encode(
                stem_frames[stem.name], cbs, stem.name, layout.frame_rate_hz
            )
            tokens[rows] = encoded.tokens
        else:
            absent.append(stem.name)
            for i in range(base, base + stem.n_streams):
                tokens[i, :] = layout.mask_id(i)
        base += stem.n_streams
    stages: tuple[int, ...] = ()
    if "other" in absent:
        stages = tuple(range(1, layout.stem("other").n_streams + 1))
    plan = EditPlan(tuple(absent), stages) if absent else EditPlan(())
    return TokenGrid(layout, tokens), plan
