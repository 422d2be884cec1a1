"""Command-line entry point: data synthesis, codec fitting, LM training,
generation, editing, evaluation, and file inspection.

Exit codes: 0 success; 2 usage; 3 missing file; 4 bad file format or layout
mismatch; 5 invalid data, plan, or decode parameters; 6 training diverged;
7 other package errors. Environment overrides: ``STEMLM_OUT_ROOT`` (prefix
for relative output paths) and ``STEMLM_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .editing import EditPlan
from .errors import (
    CheckpointError,
    CodecError,
    CropError,
    DatasetError,
    DecodeParamError,
    FileFormatError,
    LayoutError,
    MalformedGridError,
    PlanError,
    SequenceTooLongError,
    StemLMError,
    TrainingDivergedError,
)
from .grid_io import GRID_MAGIC, load_grid, save_grid
from .layout import validate_grid
from .model import load_checkpoint
from .rvq import CODEBOOK_MAGIC, fit_codebooks, load_codebooks, save_codebooks
from .sampling import DecodeParams, edit, generate
from .synth import SongDataset, StyleParams, render_stem_frames, write_dataset
from .evalrun import TASKS, render_report, run_evaluation, save_report
from .train import load_train_config, train, TrainConfig

log = logging.getLogger("stemlm")


def _out_path(path: str) -> Path:
    root = os.environ.get("STEMLM_OUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def parse_mask_flag(values: list[str]) -> EditPlan:
    """Parse repeated --mask flags: ``drums``, ``other:4`` or ``other:2-4``."""
    stems: list[str] = []
    stages: tuple[int, ...] = ()
    for value in values:
        if ":" in value:
            name, spec = value.split(":", 1)
            if name != "other":
                raise PlanError(f"stage masks are only valid for 'other', got {value!r}")
            if "-" in spec:
                lo, hi = spec.split("-", 1)
                stages = tuple(range(int(lo), int(hi) + 1))
            else:
                stages = (int(spec),)
            stems.append(name)
        else:
            stems.append(value)
    return EditPlan(tuple(stems), stages)


def _decode_params(args) -> DecodeParams:
    cfg = None if args.cfg_scale is not None and args.cfg_scale <= 0 else args.cfg_scale
    return DecodeParams(temperature=args.temperature, top_k=args.top_k, cfg_scale=cfg)


def _add_decode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=250)
    p.add_argument(
        "--cfg-scale",
        type=float,
        default=3.0,
        help="classifier-free guidance scale; <= 0 disables guidance",
    )
    p.add_argument("--seed", type=int, default=0)


def cmd_synth_data(args) -> int:
    style = StyleParams(
        frame_rate_hz=args.frame_rate,
        p_chord_tone=args.p_chord_tone,
        p_on_beat=args.p_on_beat,
        bass_rest_prob=args.bass_rest_prob,
        n_bars_range=(args.min_bars, args.max_bars),
    )
    manifest = write_dataset(_out_path(args.out), args.n, style, args.seed)
    print(f"wrote {manifest['n_songs']} songs to {_out_path(args.out)}")
    return 0


def cmd_train_codec(args) -> int:
    dataset = SongDataset(args.dataset)
    ids = dataset.ids("train")[: args.songs]
    if not ids:
        raise DatasetError("dataset has no train songs")
    rng = np.random.default_rng(args.seed)
    frames = np.concatenate(
        [
            render_stem_frames(dataset.grid(i), args.stem, dim=args.dim, rng=rng).frames
            for i in ids
        ]
    )
    codebooks = fit_codebooks(frames, args.stages, args.codebook_size, seed=args.seed)
    out = _out_path(args.out)
    save_codebooks(codebooks, out)
    mses = ", ".join(f"{m:.5f}" for m in codebooks.stage_mse)
    print(f"fitted {args.stages} stages on {len(frames)} frames; per-stage MSE: {mses}")
    print(f"wrote {out}")
    return 0


def cmd_train_lm(args) -> int:
    config = load_train_config(args.config) if args.config else TrainConfig()
    final = train(config, args.dataset, _out_path(args.out), resume_from=args.resume)
    print(f"trained to step {final.step}; checkpoints under {_out_path(args.out)}")
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    grid = generate(
        model,
        condition_id=args.cond,
        n_frames=args.frames,
        params=_decode_params(args),
        seed=args.seed,
    )
    out = _out_path(args.out)
    save_grid(grid, out)
    print(f"wrote {grid.n_streams}x{grid.n_frames} grid to {out}")
    return 0


def cmd_edit(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    source = load_grid(args.infile)
    plan = parse_mask_flag(args.mask)
    edited = edit(
        model,
        source,
        plan,
        condition_id=args.cond,
        mode=args.mode,
        params=_decode_params(args),
        seed=args.seed,
    )
    out = _out_path(args.out)
    save_grid(edited, out)
    print(
        f"edited stems {','.join(plan.masked_stems)} in {args.mode} mode; wrote {out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    report = run_evaluation(
        model,
        args.dataset,
        args.task,
        n_songs=args.n_songs,
        seed=args.seed,
        split=args.split,
        condition_id=args.cond,
    )
    print(render_report(report))
    if args.out:
        save_report(report, _out_path(args.out))
        print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == GRID_MAGIC:
        grid = load_grid(path)
        report = validate_grid(grid)
        print(f"token grid: {grid.n_streams} streams x {grid.n_frames} frames")
        print(f"frame rate: {grid.effective_frame_rate_hz} Hz")
        print(f"delays: {list(grid.layout.delays)}")
        for i, stem in enumerate(grid.layout.stems):
            print(f"  stem {stem.name}: {stem.n_streams} stream(s), codebook {stem.codebook_size}")
        print(f"valid: {report.ok}" + ("" if report.ok else f" (first: {report.first})"))
        head = min(grid.n_frames, 16)
        for i in range(grid.n_streams):
            row = " ".join(f"{t:3d}" for t in grid.tokens[i, :head])
            print(f"  stream {i}: {row}{' ...' if grid.n_frames > head else ''}")
        return 0
    if magic == CODEBOOK_MAGIC:
        cbs = load_codebooks(path)
        print(f"codebooks: {cbs.n_stages} stages x {cbs.codebook_size} codes x dim {cbs.dim}")
        if cbs.stage_mse:
            print(f"training MSE per stage: {[round(m, 6) for m in cbs.stage_mse]}")
        return 0
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError:
        raise FileFormatError(f"{path}: not a stemlm grid, codebook, or checkpoint")
    n_params = sum(int(np.prod(v.shape)) for v in ckpt.model_state.values())
    print(f"checkpoint at step {ckpt.step}; {n_params} parameters")
    print(json.dumps({"config": {
        "d_model": ckpt.config.d_model,
        "n_layers": ckpt.config.n_layers,
        "n_heads": ckpt.config.n_heads,
        "n_conditions": ckpt.config.n_conditions,
        "stems": [s.name for s in ckpt.config.layout.stems],
    }}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stemlm",
        description="Multi-stem music token LM: synthesis, training, editing, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"stemlm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic symbolic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--frame-rate", type=float, default=50.0)
    p.add_argument("--p-chord-tone", type=float, default=1.0)
    p.add_argument("--p-on-beat", type=float, default=1.0)
    p.add_argument("--bass-rest-prob", type=float, default=0.1)
    p.add_argument("--min-bars", type=int, default=4)
    p.add_argument("--max-bars", type=int, default=8)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-codec", help="fit RVQ codebooks for one stem")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stem", required=True)
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--songs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-lm", help="train the transformer")
    p.add_argument("--config", help="JSON config; defaults apply when omitted")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("generate", help="sample a new multi-stem grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--cond", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_decode_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("edit", help="regenerate masked stems of a token file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument(
        "--mask",
        action="append",
        required=True,
        help="stem to regenerate; repeatable; 'other' accepts :N or :N-M stages",
    )
    p.add_argument("--mode", choices=("forced", "free"), default="forced")
    p.add_argument("--cond", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_decode_args(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="run objective metrics on a held-out split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n-songs", type=int, default=20)
    p.add_argument("--split", default="test")
    p.add_argument("--cond", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="pretty-print a token/codebook/checkpoint file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


_EXIT_CODES = (
    (FileNotFoundError, 3),
    ((FileFormatError, CheckpointError, LayoutError), 4),
    (
        (
            DatasetError,
            PlanError,
            CodecError,
            MalformedGridError,
            CropError,
            DecodeParamError,
            SequenceTooLongError,
        ),
        5,
    ),
    (TrainingDivergedError, 6),
    (StemLMError, 7),
)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STEMLM_LOG_LEVEL", "WARNING").upper())
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(exc for exc, _ in _EXIT_CODES) as err:
        for exc_types, code in _EXIT_CODES:
            if isinstance(err, exc_types):
                print(f"error: {err}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
