import numpy as np
import pytest

from taconv.basis import BasisSpec, eval_basis, identity_bank
from taconv.dataio import read_pnm
from taconv.layers import assemble, desk_config
from taconv.render import export_filter_grid, filter_rows, read_sidecar, tile_at, tile_grid
from taconv.transforms import TransformSpec, build_transform_bank, make_bank


def _invert(gray, meta):
    return meta["min"] + gray.astype(np.float64) * (meta["max"] - meta["min"]) / 255.0


def test_identity_bank_single_row():
    bank = identity_bank(BasisSpec())
    tiles = filter_rows(bank)
    assert tiles.shape == (1, 25, 5, 5)
    np.testing.assert_array_equal(tiles[0], eval_basis(BasisSpec()))


def test_zero_strength_rows_identical():
    base = eval_basis(BasisSpec())
    bank = build_transform_bank(base, [TransformSpec("elastic", alpha=0.0, seed=s) for s in range(3)])
    canvas, meta = tile_grid(filter_rows(bank))
    for r in range(1, 4):
        for c in range(25):
            np.testing.assert_array_equal(tile_at(canvas, meta, r, c), tile_at(canvas, meta, 0, c))


def test_inverse_map_within_one_gray_level(tmp_path):
    bank = make_bank("rotation_scaling", BasisSpec())
    info = export_filter_grid(bank, tmp_path / "bank.pgm", zoom=3, pad=2)
    meta = read_sidecar(tmp_path / "bank.pgm")
    assert meta["rows"] == 5 and meta["cols"] == 25 and info["zoom"] == 3
    canvas = np.rint(read_pnm(tmp_path / "bank.pgm")[0] * 255).astype(np.uint8)
    tiles = np.asarray(bank.branches)
    lsb = (meta["max"] - meta["min"]) / 255.0
    for r in range(meta["rows"]):
        for c in range(meta["cols"]):
            back = _invert(tile_at(canvas, meta, r, c), meta)
            assert np.max(np.abs(back - tiles[r, c])) <= lsb * (0.5 + 1e-9)


def test_network_filters_and_errors(tmp_path):
    net = assemble(desk_config("snow", widths=(3, 4, 4, 4)))
    tiles = filter_rows(net)
    assert tiles.shape == (5, 3, 5, 5)
    np.testing.assert_allclose(tiles, net.layers[0].branch_kernels()[:, :, 0])
    with pytest.raises(ValueError):
        filter_rows(assemble(desk_config(widths=(3, 4, 4, 4))))
    with pytest.raises(TypeError):
        filter_rows(np.zeros((2, 2)))


def test_constant_tiles_do_not_divide_by_zero():
    canvas, meta = tile_grid(np.ones((1, 2, 3, 3)), zoom=1, pad=0)
    assert canvas.shape == (3, 6) and np.all(canvas == 0)
