"""Grid file format and canonical hashing tests."""

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carbon_fbsde.errors import ArtifactError
from carbon_fbsde.gridio import (
    canonical_json,
    file_sha256,
    jsonable,
    read_grid,
    sha256_hex,
    start_slice_csv,
    write_grid,
)
from carbon_fbsde.pde_kernel import ValueGrid


def sample_grid(with_axes: bool = False) -> ValueGrid:
    rng = np.random.default_rng(42)
    times = np.linspace(0.0, 1.0, 6)
    e = np.linspace(-1.0, 1.0, 9)
    if with_axes:
        p = np.linspace(-2.0, 2.0, 4)
        ep = np.linspace(0.0, 1.0, 3)
        values = rng.random((6, 4, 9, 3))
        return ValueGrid(times=times, e_nodes=e, values=values, rate=0.05,
                         p_nodes=p, eparam_nodes=ep,
                         meta={"label": "sample", "n_steps": 5})
    values = rng.random((6, 9))
    return ValueGrid(times=times, e_nodes=e, values=values, rate=0.05,
                     meta={"label": "sample"})


@pytest.mark.parametrize("with_axes", [False, True])
def test_grid_round_trip(tmp_path, with_axes):
    grid = sample_grid(with_axes)
    path = tmp_path / "g.grid"
    digest = write_grid(grid, path)
    assert digest == file_sha256(path)

    back = read_grid(path)
    assert np.array_equal(back.values, grid.values)
    assert np.array_equal(back.times, grid.times)
    assert back.rate == grid.rate
    assert back.meta == grid.meta
    if with_axes:
        assert np.array_equal(back.p_nodes, grid.p_nodes)
        assert np.array_equal(back.eparam_nodes, grid.eparam_nodes)


def test_grid_bytes_are_deterministic(tmp_path):
    grid = sample_grid(True)
    d1 = write_grid(grid, tmp_path / "a.grid")
    d2 = write_grid(grid, tmp_path / "b.grid")
    assert d1 == d2
    assert (tmp_path / "a.grid").read_bytes() == (tmp_path / "b.grid").read_bytes()


def test_read_grid_rejects_foreign_files(tmp_path):
    junk = tmp_path / "junk.grid"
    junk.write_bytes(b"PNG\x89 definitely not a grid")
    with pytest.raises(ArtifactError):
        read_grid(junk)


def test_read_grid_rejects_truncation(tmp_path):
    path = tmp_path / "g.grid"
    write_grid(sample_grid(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(ArtifactError):
        read_grid(path)


def test_canonical_json_is_order_insensitive():
    a = canonical_json({"b": 1, "a": [1, 2], "c": {"y": 0, "x": 1}})
    b = canonical_json({"c": {"x": 1, "y": 0}, "a": [1, 2], "b": 1})
    assert a == b
    assert " " not in a, "canonical form must be compact"


def test_jsonable_handles_numpy():
    out = jsonable({"x": np.float64(0.5), "n": np.int64(3),
                    "v": np.array([1.0, 2.0]), "t": (1, 2)})
    assert out == {"x": 0.5, "n": 3, "v": [1.0, 2.0], "t": [1, 2]}


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=0, max_size=256))
def test_sha256_hex_matches_hashlib(blob):
    assert sha256_hex(blob) == hashlib.sha256(blob).hexdigest()


def test_start_slice_csv(tmp_path):
    grid = sample_grid()
    out = tmp_path / "slice.csv"
    start_slice_csv(grid, out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + grid.e_nodes.size
