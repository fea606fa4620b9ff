"""Overlapping tile grids and deterministic stitching of tile predictions.

The training/prediction grid uses fixed-size tiles with fractional overlap
(default 500 px tiles, 50% overlap). Tiles at the far edge are clamped
inside the slide instead of padded, so every block is full-sized and no
fake background is synthesized. Overlapping predictions merge by per-pixel
majority vote with ties broken toward the lowest class index, which is
deterministic and independent of prediction order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import MaskTile


class TilingError(Exception):
    pass


@dataclass
class TileGrid:
    """Row-major plan of (origin, size) windows covering a slide level.

    Origins and sizes are in pixels at ``scale``; ``base_origin`` converts a
    window to base-level coordinates.
    """

    width: int
    height: int
    tile_size: int
    overlap_fraction: float
    scale: int
    stride: int
    windows: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    def base_origin(self, window) -> tuple[int, int]:
        (x, y), _ = window
        return (x * self.scale, y * self.scale)

    def window_index(self, window) -> int:
        try:
            return self.windows.index(window)
        except ValueError:
            raise TilingError(f"window {window} is not part of the grid") from None


def _axis_starts(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    starts = list(range(0, dim - tile + 1, stride))
    if starts[-1] + tile < dim:
        starts.append(dim - tile)
    return starts


def plan_tiles(dims: tuple[int, int], tile_size: int = 500,
               overlap_fraction: float = 0.5, scale: int = 1) -> TileGrid:
    """Plan a deterministic row-major grid of overlapping windows.

    Tile starts run 0, stride, 2*stride, ... with the final start clamped to
    dim - tile_size; dimensions smaller than the tile yield one clamped
    window.
    """
    w, h = int(dims[0]), int(dims[1])
    if w <= 0 or h <= 0:
        raise TilingError(f"zero-area dims {(w, h)}")
    if tile_size < 1:
        raise TilingError(f"tile_size must be >= 1, got {tile_size}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise TilingError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")

    stride = max(1, int(round(tile_size * (1.0 - overlap_fraction))))
    xs = _axis_starts(w, tile_size, stride)
    ys = _axis_starts(h, tile_size, stride)
    tw, th = min(tile_size, w), min(tile_size, h)
    windows = [((x, y), (tw, th)) for y in ys for x in xs]
    return TileGrid(width=w, height=h, tile_size=tile_size,
                    overlap_fraction=overlap_fraction, scale=int(scale),
                    stride=stride, windows=windows)


def stitch(predictions, grid: TileGrid, n_classes: int,
           band_height: int | None = None) -> MaskTile:
    """Merge per-tile class predictions into one slide-level mask.

    ``predictions`` is an iterable of (window, MaskTile) where each window
    belongs to the grid. Each output pixel is the argmax of per-class vote
    counts over the tiles covering it; exact ties go to the lowest class
    index, so background wins ties against foreground. Pixels covered by no
    prediction stay background.

    Votes are accumulated in horizontal bands (default height = tile_size)
    so the vote array stays O(width x band x n_classes); banding does not
    change the result.
    """
    if n_classes < 1:
        raise TilingError("n_classes must be >= 1")
    preds = list(predictions)
    for window, tile in preds:
        if window not in grid.windows:
            raise TilingError(f"window {window} is not part of the grid")
        (_, _), (tw, th) = window
        if tile.values.shape != (th, tw):
            raise TilingError(
                f"prediction shape {tile.values.shape} does not match window {window}")

    H, W = grid.height, grid.width
    band = band_height or grid.tile_size
    band = max(1, min(band, H))
    out = np.zeros((H, W), dtype=np.uint8)

    for b0 in range(0, H, band):
        b1 = min(b0 + band, H)
        votes = np.zeros((b1 - b0, W, n_classes), dtype=np.int32)
        touched = np.zeros((b1 - b0, W), dtype=bool)
        for window, tile in preds:
            (x, y), (tw, th) = window
            y0, y1 = max(y, b0), min(y + th, b1)
            if y0 >= y1:
                continue
            sub = tile.values[y0 - y:y1 - y]
            counts = np.bincount(sub.ravel(), minlength=n_classes)
            if len(counts) > n_classes:
                raise TilingError(
                    f"prediction for window {window} contains class >= {n_classes}")
            view = votes[y0 - b0:y1 - b0, x:x + tw]
            for cls in np.flatnonzero(counts):
                view[..., cls] += sub == cls
            touched[y0 - b0:y1 - b0, x:x + tw] = True
        labels = votes.argmax(axis=2).astype(np.uint8)  # argmax -> lowest index on ties
        labels[~touched] = 0
        out[b0:b1] = labels

    return MaskTile(origin=(0, 0), scale=grid.scale, width=W, height=H, values=out)
