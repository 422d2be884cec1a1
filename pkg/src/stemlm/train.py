"""Optimization loop: data sampling, edit-task conditioning, AdamW updates,
checkpoints and held-out evaluation.

Every source of randomness flows through one numpy Generator whose state is
checkpointed, so an interrupted run resumes on the same trajectory. Each
step flips the task coin once (plain generation vs editing, probability
``p_edit``), which keeps the batch sequence length homogeneous; edit plans
are still drawn independently per example.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .editing import assemble_training_example
from .errors import DatasetError, StemLMError, TrainingDivergedError
from .grid_io import GRID_FORMAT_VERSION
from .model import (
    CHECKPOINT_FORMAT_VERSION,
    Checkpoint,
    ModelConfig,
    StemTransformer,
    apply_condition_dropout,
    cross_entropy_loss,
    load_checkpoint,
    save_checkpoint,
)
from .synth import SongDataset

DEFAULT_LEARNING_RATE = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Schema of the training config file (model / data / optimization /
    editing sections); see README for the documented JSON layout."""

    # model
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    condition_dropout: float = 0.1
    max_frames: int = 2048
    # data
    plain_crop_frames: int = 150
    edit_crop_frames: int = 125
    # optimization
    steps: int = 2000
    batch_size: int = 16
    lr: float = DEFAULT_LEARNING_RATE
    warmup_steps: int = 500
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    precision: int = 32
    log_every: int = 50
    eval_every: int = 500
    eval_songs: int = 64
    checkpoint_every: int = 1000
    # editing task
    p_edit: float = 0.5
    downsample_factor: int = 5
    # the delay pattern is applied to the concatenated prefix+body sequence;
    # recorded here so the choice travels with every run manifest
    delay_scope: str = "concatenated"

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise StemLMError(f"precision must be 32 or 64, got {self.precision}")
        if self.edit_crop_frames > self.plain_crop_frames:
            raise StemLMError("edit_crop_frames cannot exceed plain_crop_frames")
        if not 0.0 <= self.p_edit <= 1.0:
            raise StemLMError(f"p_edit must be in [0, 1], got {self.p_edit}")
        if self.steps < 1 or self.batch_size < 1:
            raise StemLMError("steps and batch_size must be positive")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == 32 else torch.float64


_SECTIONS = {
    "model": ("d_model", "n_layers", "n_heads", "ff_mult", "condition_dropout", "max_frames"),
    "data": ("plain_crop_frames", "edit_crop_frames"),
    "optimization": (
        "steps",
        "batch_size",
        "lr",
        "warmup_steps",
        "weight_decay",
        "grad_clip",
        "seed",
        "precision",
        "log_every",
        "eval_every",
        "eval_songs",
        "checkpoint_every",
    ),
    "editing": ("p_edit", "downsample_factor", "delay_scope"),
}


def train_config_from_dict(d: dict) -> TrainConfig:
    kwargs = {}
    for section, keys in _SECTIONS.items():
        body = d.get(section, {})
        unknown = set(body) - set(keys)
        if unknown:
            raise StemLMError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
        kwargs.update(body)
    return TrainConfig(**kwargs)


def train_config_to_dict(config: TrainConfig) -> dict:
    flat = asdict(config)
    return {section: {k: flat[k] for k in keys} for section, keys in _SECTIONS.items()}


def load_train_config(path: str | Path) -> TrainConfig:
    with open(path) as f:
        return train_config_from_dict(json.load(f))


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    span = max(config.steps - config.warmup_steps, 1)
    progress = min((step - config.warmup_steps) / span, 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(train_config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _model_config(config: TrainConfig, dataset: SongDataset) -> ModelConfig:
    return ModelConfig(
        layout=dataset.layout,
        d_model=config.d_model,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        ff_mult=config.ff_mult,
        n_conditions=dataset.n_conditions,
        condition_dropout=config.condition_dropout,
        max_frames=config.max_frames,
    )


class _TrainData:
    """Train-split grids and condition ids held in memory."""

    def __init__(self, dataset: SongDataset, min_frames: int):
        self.ids = dataset.ids("train")
        if not self.ids:
            raise DatasetError("dataset has an empty train split")
        self.grids = []
        self.conditions = []
        for song_id in self.ids:
            grid = dataset.grid(song_id)
            if grid.n_frames < min_frames:
                raise DatasetError(
                    f"song {song_id} has {grid.n_frames} frames; the configured "
                    f"crop needs {min_frames}"
                )
            self.grids.append(grid)
            self.conditions.append(dataset.condition(song_id))
        self.conditions = np.array(self.conditions)

    def __len__(self) -> int:
        return len(self.grids)


def _assemble_batch(data: _TrainData, config: TrainConfig, rng: np.random.Generator):
    is_edit = rng.random() < config.p_edit
    idx = rng.integers(0, len(data), size=config.batch_size)
    examples = [
        assemble_training_example(
            data.grids[j],
            rng,
            p_edit=1.0 if is_edit else 0.0,
            plain_frames=config.plain_crop_frames,
            edit_frames=config.edit_crop_frames,
            downsample_factor=config.downsample_factor,
        )
        for j in idx
    ]
    tokens = torch.from_numpy(np.stack([e.tokens for e in examples]))
    loss_mask = torch.from_numpy(np.stack([e.loss_mask for e in examples]))
    flags = torch.from_numpy(np.stack([e.segment_flags for e in examples])).long()
    conditions = data.conditions[idx]
    return tokens, loss_mask, flags, conditions, is_edit


def train(
    config: TrainConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Checkpoint:
    dataset = SongDataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_config = _model_config(config, dataset)
    data = _TrainData(dataset, config.plain_crop_frames)

    torch.manual_seed(config.seed)
    model = StemTransformer(model_config, dtype=config.dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != model_config:
            raise DatasetError("checkpoint config does not match the dataset/config")
        model.load_state_dict(ckpt.model_state)
        model.to(config.dtype)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step

    with open(out / "run_manifest.json", "w") as f:
        json.dump(
            {
                "command": "train-lm",
                "config": train_config_to_dict(config),
                "config_hash": config_hash(config),
                "seed": config.seed,
                "dataset": str(dataset_dir),
                "format_versions": {
                    "grid": GRID_FORMAT_VERSION,
                    "checkpoint": CHECKPOINT_FORMAT_VERSION,
                },
            },
            f,
            indent=2,
            sort_keys=True,
        )

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=model_config,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=optimizer.state_dict(),
            step=step,
            rng_state=rng.bit_generator.state,
        )

    log_path = out / "metrics.jsonl"
    log_mode = "a" if resume_from is not None else "w"
    with open(log_path, log_mode) as log:
        for step in range(start_step, config.steps):
            lr = lr_at(config, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            tokens, loss_mask, flags, conditions, is_edit = _assemble_batch(
                data, config, rng
            )
            conditions = apply_condition_dropout(
                conditions, rng, config.condition_dropout, model_config.null_condition_id
            )
            logits = model(tokens, torch.from_numpy(conditions).long(), flags)
            breakdown = cross_entropy_loss(logits, tokens, loss_mask)
            loss_value = float(breakdown.total.detach())
            if not math.isfinite(loss_value):
                save_checkpoint(snapshot(step), out / "ckpt_diverged.pt")
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at step {step}; diagnostic "
                    f"checkpoint written to {out / 'ckpt_diverged.pt'}"
                )
            optimizer.zero_grad()
            breakdown.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            done = step + 1
            if config.log_every > 0 and (done % config.log_every == 0 or done == config.steps):
                log.write(
                    json.dumps(
                        {
                            "kind": "train",
                            "step": done,
                            "loss": loss_value,
                            "per_stream": list(breakdown.per_stream),
                            "lr": lr,
                            "task": "edit" if is_edit else "plain",
                        }
                    )
                    + "\n"
                )
                log.flush()
            if config.eval_every > 0 and done % config.eval_every == 0:
                report = evaluate_heldout(
                    model,
                    dataset,
                    split="val",
                    crop_frames=config.plain_crop_frames,
                    max_songs=config.eval_songs,
                )
                log.write(
                    json.dumps(
                        {
                            "kind": "eval",
                            "step": done,
                            "ce_per_stream": list(report.ce_per_stream),
                            "unigram_per_stream": list(report.unigram_per_stream),
                        }
                    )
                    + "\n"
                )
                log.flush()
            if config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
                save_checkpoint(snapshot(done), out / f"ckpt_{done:07d}.pt")

    final = snapshot(config.steps)
    save_checkpoint(final, out / "ckpt_final.pt")
    return final


def unigram_entropy(tokens) -> float:
    """Entropy (nats) of the empirical distribution, by brute-force counting.

    This is the oracle baseline for held-out cross-entropy: a model ignoring
    context cannot do better than this on the same tokens.
    """
    counts: dict[int, int] = {}
    n = 0
    for t in tokens:
        t = int(t)
        counts[t] = counts.get(t, 0) + 1
        n += 1
    if n == 0:
        raise StemLMError("cannot compute unigram entropy of an empty stream")
    h = 0.0
    for c in counts.values():
        p = c / n
        h -= p * math.log(p)
    return h


@dataclass(frozen=True)
class HeldoutReport:
    ce_per_stream: tuple[float, ...]
    unigram_per_stream: tuple[float, ...]
    n_positions: tuple[int, ...]
    n_songs: int

    @property
    def margins(self) -> tuple[float, ...]:
        """Fractional CE improvement over the unigram baseline, per stream."""
        return tuple(
            1.0 - ce / base if base > 0 else float("nan")
            for ce, base in zip(self.ce_per_stream, self.unigram_per_stream)
        )


def evaluate_heldout(
    model: StemTransformer,
    dataset: SongDataset | str | Path,
    split: str = "val",
    crop_frames: int | None = None,
    max_songs: int | None = None,
) -> HeldoutReport:
    """Per-stream held-out CE (plain framing, true conditions) and the
    unigram counting-oracle baseline over the same target positions."""
    if not isinstance(dataset, SongDataset):
        dataset = SongDataset(dataset)
    ids = dataset.ids(split)
    if max_songs is not None:
        ids = ids[:max_songs]
    if not ids:
        raise DatasetError(f"empty {split!r} split")
    S = model.config.layout.n_streams
    ce_sums = np.zeros(S)
    counts = np.zeros(S, dtype=np.int64)
    stream_tokens: list[list[int]] = [[] for _ in range(S)]
    rng = np.random.default_rng(0)  # consumed only by the assembly API; p_edit=0
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for song_id in ids:
                grid = dataset.grid(song_id)
                T = grid.n_frames if crop_frames is None else min(crop_frames, grid.n_frames)
                example = assemble_training_example(
                    grid.crop(0, T), rng, p_edit=0.0, plain_frames=T, edit_frames=T
                )
                tokens = torch.from_numpy(example.tokens[None].copy())
                mask = torch.from_numpy(example.loss_mask[None])
                flags = torch.from_numpy(example.segment_flags[None]).long()
                cond = torch.tensor([dataset.condition(song_id)])
                logits = model(tokens, cond, flags)
                breakdown = cross_entropy_loss(logits, tokens, mask)
                for i in range(S):
                    ce_sums[i] += breakdown.per_stream[i] * breakdown.n_positions[i]
                    counts[i] += breakdown.n_positions[i]
                    stream_tokens[i].extend(
                        example.tokens[i][example.loss_mask[i]].tolist()
                    )
    finally:
        model.train(was_training)
    ce = tuple(float(s / c) for s, c in zip(ce_sums, counts))
    unigram = tuple(unigram_entropy(toks) for toks in stream_tokens)
    return HeldoutReport(ce, unigram, tuple(int(c) for c in counts), len(ids))
