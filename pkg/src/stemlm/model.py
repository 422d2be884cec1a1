"""Decoder-only transformer over parallel token streams.

Per frame, the input embedding is the sum over streams of that stream's
token embedding, plus a sinusoidal position, plus a learned segment flag
(prefix vs body). The first slot carries a learned BOS vector plus the
condition embedding, so the logits at frame t depend only on frames < t,
the condition, and the segment flags. One classification head per stream
(stream vocabularies differ, so heads cannot be shared); heads are
zero-initialized, which makes an untrained model exactly uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, SequenceTooLongError, StemLMError
from .layout import LayoutSpec, layout_from_dict, layout_to_dict

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layout: LayoutSpec
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    n_conditions: int = 8
    condition_dropout: float = 0.1
    max_frames: int = 2048

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise StemLMError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        for name in ("d_model", "n_layers", "n_heads", "ff_mult", "n_conditions", "max_frames"):
            if getattr(self, name) < 1:
                raise StemLMError(f"{name} must be positive")
        if not 0.0 <= self.condition_dropout <= 1.0:
            raise StemLMError(f"condition_dropout must be in [0, 1]")

    @property
    def null_condition_id(self) -> int:
        return self.n_conditions


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "layout": layout_to_dict(config.layout),
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "ff_mult": config.ff_mult,
        "n_conditions": config.n_conditions,
        "condition_dropout": config.condition_dropout,
        "max_frames": config.max_frames,
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        layout=layout_from_dict(d["layout"]),
        d_model=int(d["d_model"]),
        n_layers=int(d["n_layers"]),
        n_heads=int(d["n_heads"]),
        ff_mult=int(d["ff_mult"]),
        n_conditions=int(d["n_conditions"]),
        condition_dropout=float(d["condition_dropout"]),
        max_frames=int(d["max_frames"]),
    )


def sinusoidal_positions(n_positions: int, d_model: int) -> torch.Tensor:
    pos = np.arange(n_positions)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * dim / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return torch.from_numpy(table)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, layer_cache: dict | None = None) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        past = 0
        if layer_cache is not None:
            if layer_cache["k"] is not None:
                k = torch.cat([layer_cache["k"], k], dim=2)
                v = torch.cat([layer_cache["v"], v], dim=2)
            layer_cache["k"], layer_cache["v"] = k, v
            past = k.shape[2] - T
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if T > 1 or past == 0:
            # query i may attend keys j <= past + i
            qi = torch.arange(T, device=x.device)[:, None]
            kj = torch.arange(past + T, device=x.device)[None, :]
            att = att.masked_fill(kj > past + qi, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )

    def forward(self, x: torch.Tensor, layer_cache: dict | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), layer_cache)
        x = x + self.mlp(self.ln2(x))
        return x


class StemTransformer(nn.Module):
    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        layout = config.layout
        d = config.d_model
        self.token_embeddings = nn.ModuleList(
            [nn.Embedding(layout.vocab_size(i), d) for i in range(layout.n_streams)]
        )
        self.condition_embedding_table = nn.Embedding(config.n_conditions + 1, d)
        self.segment_embedding = nn.Embedding(2, d)
        self.bos = nn.Parameter(torch.zeros(d))
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_frames, d), persistent=False
        )
        self.blocks = nn.ModuleList(
            [Block(d, config.n_heads, config.ff_mult) for _ in range(config.n_layers)]
        )
        self.ln_out = nn.LayerNorm(d)
        self.heads = nn.ModuleList(
            [nn.Linear(d, layout.vocab_size(i)) for i in range(layout.n_streams)]
        )
        self._init_weights()
        self.to(dtype)

    def _init_weights(self):
        for emb in self.token_embeddings:
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.condition_embedding_table.weight, std=0.02)
        nn.init.normal_(self.segment_embedding.weight, std=0.02)
        nn.init.normal_(self.bos, std=0.02)
        # zero heads: the untrained model is exactly uniform over each vocabulary
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.bos.dtype

    def _check_condition(self, condition_ids: torch.Tensor) -> None:
        if condition_ids.numel() == 0:
            return
        hi = int(condition_ids.max())
        lo = int(condition_ids.min())
        if lo < 0 or hi > self.config.n_conditions:
            raise StemLMError(
                f"condition id out of range [0, {self.config.n_conditions}] "
                f"(the maximum is the NULL condition): got {lo}..{hi}"
            )

    def condition_embedding(self, condition_id: int, dropout_active: bool = False) -> torch.Tensor:
        """Embedding of a condition; the learned NULL vector when dropped."""
        cid = self.config.null_condition_id if dropout_active else condition_id
        ids = torch.tensor([cid])
        self._check_condition(ids)
        return self.condition_embedding_table(ids)[0]

    def first_slot(self, condition_ids: torch.Tensor) -> torch.Tensor:
        """(B, 1, d) embedding of the BOS/condition slot."""
        self._check_condition(condition_ids)
        e = self.bos + self.condition_embedding_table(condition_ids)
        return e[:, None, :]

    def token_slot(
        self, frame_tokens: torch.Tensor, segment_flags: torch.Tensor
    ) -> torch.Tensor:
        """(B, T, d) embeddings for slots fed by token frames.

        ``frame_tokens`` is (B, S, T): the frames *preceding* the slots being
        embedded. ``segment_flags`` is (B, T) with the same alignment.
        """
        B, S, T = frame_tokens.shape
        e = torch.zeros(B, T, self.config.d_model, dtype=self.dtype)
        for i, emb in enumerate(self.token_embeddings):
            e = e + emb(frame_tokens[:, i, :])
        e = e + self.segment_embedding(segment_flags.long())
        return e

    def backbone(self, x: torch.Tensor, cache: list[dict] | None = None) -> torch.Tensor:
        for idx, block in enumerate(self.blocks):
            x = block(x, cache[idx] if cache is not None else None)
        return self.ln_out(x)

    def head_logits(self, h: torch.Tensor) -> list[torch.Tensor]:
        return [head(h) for head in self.heads]

    def new_cache(self) -> list[dict]:
        return [{"k": None, "v": None} for _ in self.blocks]

    @staticmethod
    def cache_length(cache: list[dict]) -> int:
        return 0 if cache[0]["k"] is None else cache[0]["k"].shape[2]

    def forward(
        self,
        tokens: torch.Tensor,
        condition_ids: torch.Tensor,
        segment_flags: torch.Tensor,
    ) -> list[torch.Tensor]:
        """Per-stream logits (B, T, vocab_i); logits at frame t see frames < t.

        ``tokens`` is (B, S, T); ``segment_flags`` is (T,) or (B, T).
        """
        if tokens.ndim != 3:
            raise StemLMError(f"tokens must be (B, S, T), got shape {tuple(tokens.shape)}")
        B, S, T = tokens.shape
        if T > self.config.max_frames:
            raise SequenceTooLongError(
                f"sequence of {T} frames exceeds max_frames={self.config.max_frames}"
            )
        if segment_flags.ndim == 1:
            segment_flags = segment_flags[None, :].expand(B, -1)
        first = self.first_slot(condition_ids)
        if T > 1:
            rest = self.token_slot(tokens[:, :, :-1], segment_flags[:, :-1])
            e = torch.cat([first, rest], dim=1)
        else:
            e = first
        e = e + self.positions[:T].to(self.dtype)
        h = self.backbone(e)
        return self.head_logits(h)

    def step_logits(
        self,
        cache: list[dict],
        condition_ids: torch.Tensor,
        prev_frame: torch.Tensor | None,
        prev_flag: torch.Tensor | None,
    ) -> list[torch.Tensor]:
        """Feed one slot incrementally; returns logits (B, vocab_i) for the
        frame about to be sampled. ``prev_frame`` is None for the first slot."""
        pos = self.cache_length(cache)
        if pos >= self.config.max_frames:
            raise SequenceTooLongError(
                f"decoding past max_frames={self.config.max_frames}"
            )
        if prev_frame is None:
            e = self.first_slot(condition_ids)
        else:
            e = self.token_slot(prev_frame[:, :, None], prev_flag[:, None])
        e = e + self.positions[pos : pos + 1].to(self.dtype)
        h = self.backbone(e, cache)
        return [logit[:, 0, :] for logit in self.head_logits(h)]


def apply_condition_dropout(
    condition_ids: np.ndarray, rng: np.random.Generator, p: float, null_id: int
) -> np.ndarray:
    """Replace each id with the NULL id with probability ``p``."""
    drop = rng.random(len(condition_ids)) < p
    return np.where(drop, null_id, condition_ids)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_stream: tuple[float, ...]
    n_positions: tuple[int, ...]


def cross_entropy_loss(
    logits: list[torch.Tensor], targets: torch.Tensor, loss_mask: torch.Tensor
) -> LossBreakdown:
    """Mean cross-entropy over cells where ``loss_mask`` is True.

    The mask must already exclude prefix frames and PAD_DELAY targets.
    Returns the overall mean (differentiable) plus per-stream means.
    """
    if targets.shape != loss_mask.shape:
        raise StemLMError("targets and loss_mask must have the same shape")
    total_sum = None
    total_count = 0
    per_stream = []
    counts = []
    for i, stream_logits in enumerate(logits):
        mask = loss_mask[:, i, :]
        n = int(mask.sum())
        counts.append(n)
        if n == 0:
            per_stream.append(float("nan"))
            continue
        sel_logits = stream_logits[mask]
        sel_targets = targets[:, i, :][mask]
        s = F.cross_entropy(sel_logits, sel_targets, reduction="sum")
        per_stream.append(float(s.detach()) / n)
        total_sum = s if total_sum is None else total_sum + s
        total_count += n
    if total_count == 0:
        raise StemLMError("loss_mask selects no positions")
    return LossBreakdown(total_sum / total_count, tuple(per_stream), tuple(counts))


@dataclass
class Checkpoint:
    config: ModelConfig
    model_state: dict
    optimizer_state: dict | None
    step: int
    rng_state: dict | None

    def build_model(self, dtype: torch.dtype | None = None) -> StemTransformer:
        saved_dtype = next(iter(self.model_state.values())).dtype
        model = StemTransformer(self.config, dtype=saved_dtype)
        model.load_state_dict(self.model_state)
        if dtype is not None and dtype != saved_dtype:
            model.to(dtype)
        return model


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": config_to_dict(checkpoint.config),
            "model_state": checkpoint.model_state,
            "optimizer_state": checkpoint.optimizer_state,
            "step": checkpoint.step,
            "rng_state": checkpoint.rng_state,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - normalize to our error type
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise CheckpointError(f"{path} is not a stemlm checkpoint")
    if blob["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {blob['format_version']}"
        )
    return Checkpoint(
        config=config_from_dict(blob["config"]),
        model_state=blob["model_state"],
        optimizer_state=blob.get("optimizer_state"),
        step=int(blob.get("step", 0)),
        rng_state=blob.get("rng_state"),
    )
