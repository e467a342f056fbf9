"""Render basis banks and synthesized filters as tiled grayscale images."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .basis import BasisBank
from .dataio import write_pgm_raw
from .layers import Network, TAConvLayer, TAResBlock, canonical_json


def filter_rows(source, layer: int | None = None) -> np.ndarray:
    """[rows, cols, k, k] tiles: one row per branch.

    A bank contributes its basis functions; a TAConv layer (or the first one
    in a network) contributes its synthesized filters for input channel 0.
    """
    if isinstance(source, BasisBank):
        return np.asarray(source.branches)
    if isinstance(source, Network):
        ta = [i for i, l in enumerate(source.layers) if isinstance(l, (TAConvLayer, TAResBlock))]
        if not ta:
            raise ValueError("network has no transform-augmented layer to render")
        source = source.layers[ta[0] if layer is None else layer]
    if isinstance(source, TAConvLayer):
        return source.branch_kernels()[:, :, 0]
    if isinstance(source, TAResBlock):
        from .layers import synthesize_bank_kernels
        from .tensor import no_grad
        with no_grad():
            return synthesize_bank_kernels(source.w1, source.bank).data[:, :, 0]
    raise TypeError(f"cannot render {type(source).__name__}")


def tile_grid(tiles: np.ndarray, zoom: int = 4, pad: int = 1) -> tuple[np.ndarray, dict]:
    """Map tiles affinely to 0..255 (global min to 0, max to 255) and lay them out."""
    rows, cols, k, _ = tiles.shape
    lo, hi = float(tiles.min()), float(tiles.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = np.rint((tiles - lo) * scale).astype(np.uint8)
    step = k * zoom + pad
    canvas = np.full((rows * step + pad, cols * step + pad), 128, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            big = np.kron(gray[r, c], np.ones((zoom, zoom), dtype=np.uint8))
            y, x = pad + r * step, pad + c * step
            canvas[y:y + k * zoom, x:x + k * zoom] = big
    meta = {"min": lo, "max": hi, "rows": rows, "cols": cols, "tile": k, "zoom": zoom, "pad": pad}
    return canvas, meta


def tile_at(canvas: np.ndarray, meta: dict, r: int, c: int) -> np.ndarray:
    """Gray levels of tile (r, c) at native resolution."""
    k, zoom, pad = meta["tile"], meta["zoom"], meta["pad"]
    step = k * zoom + pad
    y, x = pad + r * step, pad + c * step
    return canvas[y:y + k * zoom:zoom, x:x + k * zoom:zoom]


def export_filter_grid(source, path, zoom: int = 4, pad: int = 1, layer: int | None = None) -> dict:
    """Write a tiled PGM plus a sidecar ``<path>.json`` with the value mapping."""
    path = Path(path)
    canvas, meta = tile_grid(filter_rows(source, layer), zoom, pad)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_pgm_raw(path, canvas)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(canonical_json(meta))
    return {"image": str(path), "sidecar": str(sidecar), **meta}


def read_sidecar(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
