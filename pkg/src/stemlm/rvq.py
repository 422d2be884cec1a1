"""Toy per-stem tokenizer: residual vector quantization over feature frames.

Stage s encodes the residual left by stages < s with its own codebook;
decoding sums the selected codewords. Codebooks are fitted with stage-wise
k-means (Lloyd iterations on successive residuals). Everything is plain
numpy and bit-reproducible given (inputs, seed); nearest-codeword ties break
to the lowest code id.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CodecError, FileFormatError
from .layout import DEFAULT_FRAME_RATE_HZ, StemSpec, TokenGrid, make_layout

CODEBOOK_MAGIC = b"STEMCBK\x00"
CODEBOOK_FORMAT_VERSION = 1

_ASSIGN_BLOCK = 4096  # frames per distance block, bounds peak memory


@dataclass(frozen=True)
class FrameSequence:
    """T x dim real feature frames (the stand-in for codec latents)."""

    frames: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2:
            raise CodecError(f"frames must be a T x dim matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise CodecError("frames contain non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class CodebookSet:
    """n_stages x codebook_size x dim codewords, plus per-stage training MSE."""

    codebooks: np.ndarray
    stage_mse: tuple[float, ...] | None = None

    def __post_init__(self):
        arr = np.asarray(self.codebooks, dtype=np.float64)
        if arr.ndim != 3:
            raise CodecError(f"codebooks must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise CodecError("codebooks contain non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "codebooks", arr)

    @property
    def n_stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dim(self) -> int:
        return self.codebooks.shape[2]


def _assign(points: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Nearest codeword per point (squared Euclidean, lowest id on ties)."""
    codes = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), _ASSIGN_BLOCK):
        block = points[start : start + _ASSIGN_BLOCK]
        d2 = np.square(block[:, None, :] - codebook[None, :, :]).sum(axis=2)
        codes[start : start + len(block)] = np.argmin(d2, axis=1)
    return codes


def rvq_encode(
    frames: FrameSequence | np.ndarray,
    codebooks: CodebookSet,
    stem_name: str = "stem",
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
) -> TokenGrid:
    """Quantize frames into a single-stem grid with one stream per stage."""
    if not isinstance(frames, FrameSequence):
        frames = FrameSequence(frames)
    if len(frames) == 0:
        raise CodecError("cannot encode an empty frame sequence")
    if frames.dim != codebooks.dim:
        raise CodecError(
            f"frame dim {frames.dim} != codebook dim {codebooks.dim}"
        )
    residual = frames.frames.copy()
    tokens = np.empty((codebooks.n_stages, len(frames)), dtype=np.int64)
    for s in range(codebooks.n_stages):
        codes = _assign(residual, codebooks.codebooks[s])
        tokens[s] = codes
        residual -= codebooks.codebooks[s][codes]
    layout = make_layout(
        [StemSpec(stem_name, codebooks.n_stages, codebooks.codebook_size)],
        frame_rate_hz=frame_rate_hz,
    )
    return TokenGrid(layout, tokens)


def rvq_decode(grid: TokenGrid, codebooks: CodebookSet) -> FrameSequence:
    """Sum the codewords selected by each stage. Rejects special tokens."""
    if grid.n_streams != codebooks.n_stages:
        raise CodecError(
            f"grid has {grid.n_streams} streams but codebooks have "
            f"{codebooks.n_stages} stages"
        )
    tokens = grid.tokens
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= codebooks.codebook_size:
        bad = np.argwhere((tokens < 0) | (tokens >= codebooks.codebook_size))[0]
        raise CodecError(
            f"special or out-of-range token {int(tokens[tuple(bad)])} at "
            f"(stream {int(bad[0])}, frame {int(bad[1])}); strip specials before decoding"
        )
    out = np.zeros((grid.n_frames, codebooks.dim))
    for s in range(codebooks.n_stages):
        out += codebooks.codebooks[s][tokens[s]]
    return FrameSequence(out)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, n_iters: int) -> np.ndarray:
    n = len(points)
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(n_iters):
        codes = _assign(points, centroids)
        for j in range(k):
            members = points[codes == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        # relocate empty clusters to the worst-fit points, deterministically
        counts = np.bincount(codes, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            err = np.square(points - centroids[codes]).sum(axis=1)
            worst = np.argsort(-err, kind="stable")
            for j, p in zip(empty, worst):
                centroids[j] = points[p]
    return centroids


def fit_codebooks(
    training_frames: FrameSequence | np.ndarray,
    n_stages: int,
    codebook_size: int,
    seed: int,
    n_iters: int = 10,
) -> CodebookSet:
    """Stage-wise k-means on successive residuals.

    Returns codebooks with the post-stage training MSE (mean squared entry of
    the residual) recorded in ``stage_mse``; it is non-increasing by stage on
    the training data.
    """
    if not isinstance(training_frames, FrameSequence):
        training_frames = FrameSequence(training_frames)
    if len(training_frames) < codebook_size:
        raise CodecError(
            f"need at least codebook_size={codebook_size} frames, got {len(training_frames)}"
        )
    if n_stages < 1 or codebook_size < 2:
        raise CodecError("n_stages must be >= 1 and codebook_size >= 2")
    rng = np.random.default_rng(seed)
    residual = training_frames.frames.copy()
    if np.all(residual == residual[0]):
        warnings.warn(
            "all training frames are identical; falling back to a single-cluster codebook",
            stacklevel=2,
        )
        codebooks = np.broadcast_to(
            residual[0], (n_stages, codebook_size, training_frames.dim)
        ).copy()
        codebooks[1:] = 0.0
        mse = [0.0] * n_stages
        return CodebookSet(codebooks, tuple(mse))
    codebooks = np.empty((n_stages, codebook_size, training_frames.dim))
    mse = []
    for s in range(n_stages):
        centroids = _kmeans(residual, codebook_size, rng, n_iters)
        codebooks[s] = centroids
        codes = _assign(residual, centroids)
        residual -= centroids[codes]
        mse.append(float(np.mean(np.square(residual))))
    return CodebookSet(codebooks, tuple(mse))


def reconstruction_mse(
    frames: FrameSequence | np.ndarray,
    codebooks: CodebookSet,
    n_stages: int | None = None,
) -> float:
    """Decode MSE using only the first ``n_stages`` stages (all by default)."""
    if not isinstance(frames, FrameSequence):
        frames = FrameSequence(frames)
    k = codebooks.n_stages if n_stages is None else n_stages
    if not 1 <= k <= codebooks.n_stages:
        raise CodecError(f"n_stages must be in 1..{codebooks.n_stages}, got {k}")
    truncated = CodebookSet(codebooks.codebooks[:k])
    grid = rvq_encode(frames, truncated)
    recon = rvq_decode(grid, truncated)
    return float(np.mean(np.square(frames.frames - recon.frames)))


def save_codebooks(codebooks: CodebookSet, path: str | Path) -> None:
    header = {
        "n_stages": codebooks.n_stages,
        "codebook_size": codebooks.codebook_size,
        "dim": codebooks.dim,
        "stage_mse": list(codebooks.stage_mse) if codebooks.stage_mse else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<II", CODEBOOK_FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(codebooks.codebooks, dtype="<f8").tobytes())


def load_codebooks(path: str | Path) -> CodebookSet:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CODEBOOK_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CODEBOOK_FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported codebook format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    shape = (int(header["n_stages"]), int(header["codebook_size"]), int(header["dim"]))
    expected = shape[0] * shape[1] * shape[2] * 8
    if len(payload) != expected:
        raise FileFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
    mse = header.get("stage_mse")
    return CodebookSet(arr, tuple(mse) if mse else None)
