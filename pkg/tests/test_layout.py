import numpy as np
import pytest

from stemlm.errors import LayoutError, UnknownStemError
from stemlm.grid_io import load_grid, save_grid
from stemlm.layout import (
    LayoutSpec,
    StemSpec,
    TokenGrid,
    default_layout,
    make_layout,
    stem_stage,
    stream_index,
    validate_grid,
)


def test_default_layout_matches_paper_shape():
    lay = default_layout()
    assert lay.n_streams == 6
    assert lay.delays == (0, 0, 0, 1, 2, 3)
    assert lay.stem_names == ("bass", "drums", "other")


def test_make_layout_residual_rule():
    lay = make_layout([("a", 2, 8), ("b", 3, 8)])
    assert lay.delays == (0, 1, 0, 1, 2)
    assert lay.n_streams == 5


def test_make_layout_single_stream():
    lay = make_layout([("solo", 1, 16)])
    assert lay.delays == (0,)
    assert lay.n_streams == 1


def test_make_layout_is_pure():
    a = make_layout([("bass", 1, 64), ("drums", 1, 64), ("other", 4, 64)])
    b = make_layout([("bass", 1, 64), ("drums", 1, 64), ("other", 4, 64)])
    assert a == b


def test_make_layout_rejects_bad_specs():
    with pytest.raises(LayoutError):
        make_layout([("a", 1, 8), ("a", 1, 8)])  # duplicate names
    with pytest.raises(LayoutError):
        make_layout([("a", 0, 8)])  # zero streams
    with pytest.raises(LayoutError):
        make_layout([("a", 1, 1)])  # codebook too small
    with pytest.raises(LayoutError):
        make_layout([])


def test_explicit_delays_must_zero_first_stages():
    make_layout([("a", 2, 8)], delay_rule=[0, 3])  # ok
    with pytest.raises(LayoutError):
        make_layout([("a", 2, 8)], delay_rule=[1, 0])


def test_stream_index_examples():
    lay = default_layout()
    assert stream_index(lay, "other", 1) == 2
    assert stream_index(lay, "bass", 1) == 0
    ab = make_layout([("a", 2, 8), ("b", 3, 8)])
    assert stream_index(ab, "b", 3) == 4


def test_stream_index_errors():
    lay = default_layout()
    with pytest.raises(UnknownStemError):
        stream_index(lay, "vocals", 1)
    with pytest.raises(LayoutError):
        stream_index(lay, "other", 5)
    with pytest.raises(LayoutError):
        stream_index(lay, "bass", 0)


@pytest.mark.parametrize(
    "specs",
    [
        [("bass", 1, 64), ("drums", 1, 64), ("other", 4, 64)],
        [("a", 2, 8), ("b", 3, 16)],
        [("one", 1, 4)],
        [("x", 5, 7), ("y", 1, 9), ("z", 2, 33)],
    ],
)
def test_stream_index_roundtrip_exhaustive(specs):
    lay = make_layout(specs)
    for i in range(lay.n_streams):
        name, stage = stem_stage(lay, i)
        assert stream_index(lay, name, stage) == i
    for stem in lay.stems:
        for stage in range(1, stem.n_streams + 1):
            i = stream_index(lay, stem.name, stage)
            assert stem_stage(lay, i) == (stem.name, stage)


def test_special_ids_dense_at_top_by_default():
    lay = default_layout(codebook_size=64)
    assert lay.pad_id(0) == 64
    assert lay.mask_id(0) == 65
    assert lay.sep_id(0) == 66
    assert lay.bos_id(0) == 67
    assert lay.vocab_size(0) == 68


def test_validate_grid_all_zeros_ok():
    lay = default_layout()
    report = validate_grid(TokenGrid(lay, np.zeros((6, 8), dtype=np.int64)))
    assert report.ok
    assert report.first is None


def test_validate_grid_boundary_token():
    # with specials placed above codebook_size, the id `codebook_size` itself
    # is not a special and must be flagged
    lay = make_layout(
        [("bass", 1, 64), ("drums", 1, 64), ("other", 4, 64)],
        special_offsets=(1, 2, 3, 4),
    )
    tokens = np.zeros((6, 8), dtype=np.int64)
    tokens[0, 5] = 64
    report = validate_grid(TokenGrid(lay, tokens))
    assert not report.ok
    assert (report.first.stream, report.first.frame) == (0, 5)
    assert report.first.token == 64


def test_validate_grid_specials_are_legal():
    lay = default_layout()
    tokens = np.zeros((6, 8), dtype=np.int64)
    tokens[2, 3] = lay.mask_id(2)
    tokens[4, 0] = lay.pad_id(4)
    assert validate_grid(TokenGrid(lay, tokens)).ok


def test_validate_grid_negative_token():
    lay = default_layout()
    tokens = np.zeros((6, 8), dtype=np.int64)
    tokens[1, 2] = -1
    report = validate_grid(TokenGrid(lay, tokens))
    assert not report.ok
    assert (report.first.stream, report.first.frame) == (1, 2)


def test_grid_tokens_are_frozen():
    lay = default_layout()
    grid = TokenGrid(lay, np.zeros((6, 4), dtype=np.int64))
    with pytest.raises(ValueError):
        grid.tokens[0, 0] = 1


def test_grid_shape_checked():
    lay = default_layout()
    with pytest.raises(LayoutError):
        TokenGrid(lay, np.zeros((5, 4), dtype=np.int64))
    with pytest.raises(LayoutError):
        TokenGrid(lay, np.zeros(4, dtype=np.int64))


def test_grid_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    lay = make_layout([("a", 2, 10), ("b", 1, 200)])
    grid = TokenGrid(lay, rng.integers(0, 10, size=(3, 17)))
    path = tmp_path / "grid.tok"
    save_grid(grid, path)
    back = load_grid(path)
    assert back == grid
    assert back.layout == lay


def test_grid_file_roundtrip_preserves_effective_rate(tmp_path):
    lay = default_layout()
    grid = TokenGrid(lay, np.zeros((6, 5), dtype=np.int64), frame_rate_hz=10.0)
    path = tmp_path / "g.tok"
    save_grid(grid, path)
    assert load_grid(path).effective_frame_rate_hz == 10.0


def test_grid_file_bad_magic(tmp_path):
    from stemlm.errors import FileFormatError

    path = tmp_path / "bad.tok"
    path.write_bytes(b"NOTAGRID" + b"\x00" * 32)
    with pytest.raises(FileFormatError):
        load_grid(path)
