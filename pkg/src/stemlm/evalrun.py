"""Evaluation driver: runs a trained model over a held-out split and reports
editing metrics (HAR, BEAT, preservation) or held-out CE for the plain
generation task. Produces a machine-readable report plus a text table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .editing import EditPlan
from .errors import StemLMError
from .layout import TokenGrid
from .metrics import (
    beat_f_measure,
    bass_onset_times,
    harmonic_match_grids,
    preservation_rate,
    symbolic_beats,
)
from .model import StemTransformer
from .sampling import DecodeParams, edit
from .synth import SongDataset
from .train import evaluate_heldout

EDIT_TASKS = {
    "edit:bass": EditPlan(("bass",)),
    "edit:drums": EditPlan(("drums",)),
    "edit:other": EditPlan(("other",), (1, 2, 3, 4)),
    "edit:other-residual": EditPlan(("other",), (2, 3, 4)),
}
TASKS = ("t2m",) + tuple(EDIT_TASKS)


def _mean_stderr(values) -> dict:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    n = len(vals)
    if n == 0:
        return {"mean": None, "stderr": None, "n": 0}
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "stderr": stderr, "n": n}


def crop_beats(song_beats, n_frames: int, frame_rate_hz: float) -> np.ndarray:
    """Reference beats falling inside the first ``n_frames`` of the song."""
    horizon = n_frames / frame_rate_hz
    beats = np.asarray(song_beats, dtype=float)
    return beats[beats < horizon - 1e-9]


def max_edit_body_frames(model: StemTransformer, factor: int = 5) -> int:
    """Longest body crop whose edit sequence fits the model's max_frames."""
    budget = model.config.max_frames - model.config.layout.max_delay - 1
    # body + floor(body/factor) + 1 (SEP) <= budget
    body = (budget - 1) * factor // (factor + 1)
    return max(body, factor)


def random_stream_tokens(
    grid: TokenGrid, stream: int, code_space: int, rng: np.random.Generator
) -> TokenGrid:
    """Replace one stream with uniform random tokens over its symbolic code
    space — the chance-level baseline for the editing metrics."""
    tokens = grid.tokens.copy()
    tokens[stream] = rng.integers(0, code_space, size=grid.n_frames)
    return grid.with_tokens(tokens)


def run_evaluation(
    model: StemTransformer,
    dataset: SongDataset | str | Path,
    task: str,
    n_songs: int = 20,
    seed: int = 0,
    params: DecodeParams = DecodeParams(),
    split: str = "test",
    condition_id: int | None = None,
    body_frames: int | None = None,
) -> dict:
    """Evaluate one task over the held-out split; returns the report dict."""
    if not isinstance(dataset, SongDataset):
        dataset = SongDataset(dataset)
    if task == "t2m":
        report = evaluate_heldout(model, dataset, split=split, max_songs=n_songs)
        return {
            "task": task,
            "split": split,
            "n_songs": report.n_songs,
            "metrics": {
                "ce_per_stream": list(report.ce_per_stream),
                "unigram_per_stream": list(report.unigram_per_stream),
                "margin_per_stream": list(report.margins),
            },
        }
    if task not in EDIT_TASKS:
        raise StemLMError(f"unknown task {task!r}; choose from {TASKS}")
    plan = EDIT_TASKS[task]
    ids = dataset.ids(split)[:n_songs]
    if not ids:
        raise StemLMError(f"empty {split!r} split")
    body = body_frames or max_edit_body_frames(model, plan.downsample_factor)
    rate = dataset.layout.frame_rate_hz
    per_song = []
    for k, song_id in enumerate(ids):
        grid = dataset.grid(song_id)
        song = dataset.song(song_id)
        T = min(body, grid.n_frames)
        source = grid.crop(0, T)
        edited = edit(
            model,
            source,
            plan,
            condition_id=condition_id,
            mode="forced",
            params=params,
            seed=seed + k,
        )
        pres = preservation_rate(source, edited, plan)
        ref_beats = crop_beats(song.beat_grid, T, rate)
        row = {"song_id": song_id, "preservation_min": pres.min_unmasked}
        if task == "edit:bass":
            row["har"] = harmonic_match_grids(edited, source).ratio
            row["beat"] = beat_f_measure(ref_beats, bass_onset_times(edited)).f_measure
        elif task == "edit:drums":
            row["beat"] = beat_f_measure(ref_beats, symbolic_beats(edited)).f_measure
        else:  # other variants: harmony read from the regenerated chord stream
            row["har"] = harmonic_match_grids(source, edited).ratio
        per_song.append(row)
    metric_names = sorted({k for row in per_song for k in row if k != "song_id"})
    return {
        "task": task,
        "split": split,
        "n_songs": len(ids),
        "seed": seed,
        "metrics": {
            name: _mean_stderr([row.get(name) for row in per_song])
            for name in metric_names
        },
        "per_song": per_song,
    }


def render_report(report: dict) -> str:
    lines = [f"task: {report['task']}   split: {report['split']}   songs: {report['n_songs']}"]
    metrics = report["metrics"]
    if report["task"] == "t2m":
        lines.append(f"{'stream':>8} {'CE':>8} {'unigram':>8} {'margin':>8}")
        for i, (ce, base, margin) in enumerate(
            zip(
                metrics["ce_per_stream"],
                metrics["unigram_per_stream"],
                metrics["margin_per_stream"],
            )
        ):
            lines.append(f"{i:>8} {ce:>8.4f} {base:>8.4f} {margin:>8.2%}")
        return "\n".join(lines)
    lines.append(f"{'metric':>18} {'mean':>8} {'stderr':>8} {'n':>5}")
    for name, stats in metrics.items():
        mean = "absent" if stats["mean"] is None else f"{stats['mean']:.4f}"
        err = "-" if stats["stderr"] is None else f"{stats['stderr']:.4f}"
        lines.append(f"{name:>18} {mean:>8} {err:>8} {stats['n']:>5}")
    return "\n".join(lines)


def save_report(report: dict, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
