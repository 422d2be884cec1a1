"""stemlm: a desk-scale multi-stem music token language model.

Parallel per-stem token streams, a partial delay pattern over residual
streams, masked low-rate prefix conditioning for stem editing, constrained
autoregressive decoding, and objective editing metrics, trained and verified
on a synthetic symbolic corpus with known cross-stem structure.
"""

__version__ = "0.1.0"

from .layout import (
    LayoutSpec,
    StemSpec,
    TokenGrid,
    default_layout,
    make_layout,
    stem_stage,
    stream_index,
    validate_grid,
)
from .delay import apply_delay, remove_delay
from .editing import (
    ConditioningSequence,
    EditPlan,
    assemble_training_example,
    build_conditioning,
    downsample_grid,
    sample_edit_plan,
)
from .grid_io import load_grid, save_grid
from .metrics import beat_f_measure, harmonic_match, preservation_rate, symbolic_beats
from .model import Checkpoint, ModelConfig, StemTransformer, cross_entropy_loss
from .rvq import CodebookSet, FrameSequence, fit_codebooks, rvq_decode, rvq_encode
from .sampling import DecodeParams, edit, generate, tokenize_external
from .synth import StyleParams, SymbolicSong, generate_song, symbolic_detokenize, symbolic_tokenize
from .train import TrainConfig, evaluate_heldout, train

__all__ = [
    "LayoutSpec",
    "StemSpec",
    "TokenGrid",
    "default_layout",
    "make_layout",
    "stem_stage",
    "stream_index",
    "validate_grid",
    "apply_delay",
    "remove_delay",
    "ConditioningSequence",
    "EditPlan",
    "assemble_training_example",
    "build_conditioning",
    "downsample_grid",
    "sample_edit_plan",
    "load_grid",
    "save_grid",
    "beat_f_measure",
    "harmonic_match",
    "preservation_rate",
    "symbolic_beats",
    "Checkpoint",
    "ModelConfig",
    "StemTransformer",
    "cross_entropy_loss",
    "CodebookSet",
    "FrameSequence",
    "fit_codebooks",
    "rvq_decode",
    "rvq_encode",
    "DecodeParams",
    "edit",
    "generate",
    "tokenize_external",
    "StyleParams",
    "SymbolicSong",
    "generate_song",
    "symbolic_detokenize",
    "symbolic_tokenize",
    "TrainConfig",
    "evaluate_heldout",
    "train",
]
