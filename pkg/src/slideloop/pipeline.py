"""The prediction engine.

Two modes. "full" segments every tissue-bearing tile of the slide grid at
base resolution. "deepzoom" first segments the slide at 1/16 linear scale,
stitches those predictions into a hotspot map, dilates it, and only then
runs the base-resolution model on grid tiles that intersect the hotspot
footprint (each low-res hotspot pixel maps to a base window padded by a
safety margin so structures straddling low-res pixel borders are not
truncated). Both modes apply the same luminance tissue pre-filter to every
tile they would otherwise segment, so with oracle backends they produce
identical masks while deepzoom does a fraction of the high-res work.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationDocument, ClassMap
from .backends import BackendError, SegmenterBackend
from .raster import MaskTile, load_mask_png, mask_to_annotations, rasterize_window
from .slide_io import ImageTile, SlideHandle, read_region
from .tiling import TileGrid, plan_tiles, stitch

_OPEN_CLOSE_STRUCT = np.ones((3, 3), dtype=bool)

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class PredictOptions:
    tile_size: int = 500
    overlap_fraction: float = 0.5
    lowres_scale: int = 16
    luminance_threshold: float = 224.0
    min_tissue_fraction: float = 0.01
    hotspot_dilation: int = 1
    hotspot_margin: int = 16
    workers: int = 1


@dataclass
class HotspotMap:
    """Stitched low-resolution class map plus the base-grid windows that
    full-resolution segmentation must visit."""

    class_map: MaskTile  # at lowres scale
    windows: list  # subset of the high-res TileGrid windows
    dilation_radius: int
    margin: int
    lowres_tiles_evaluated: int = 0


@dataclass
class PredictionReport:
    document: AnnotationDocument
    mask: MaskTile
    mode: str
    highres_tiles_evaluated: int = 0
    highres_tiles_total: int = 0
    lowres_tiles_evaluated: int = 0
    hotspot_windows: int = 0
    seconds: float = 0.0


def tissue_mask(tile: ImageTile | np.ndarray, luminance_threshold: float = 224.0,
                min_tissue_fraction: float = 0.01) -> tuple[np.ndarray, bool]:
    """Binary tissue map of a tile plus whether the tile is worth segmenting.

    A pixel is tissue when its luma falls below the threshold (scanned slide
    background is near-white); the raw map is cleaned with a 3x3 binary open
    then close.
    """
    pixels = tile.pixels if isinstance(tile, ImageTile) else np.asarray(tile)
    luma = pixels.astype(np.float64) @ _LUMA
    raw = (luma < luminance_threshold).astype(np.uint8)
    if raw.any() and not raw.all():
        # 3x3 open then close via separable min/max filters (borders replicate)
        opened = ndimage.maximum_filter(
            ndimage.minimum_filter(raw, size=3, mode="nearest"), size=3,
            mode="nearest")
        cleaned = ndimage.minimum_filter(
            ndimage.maximum_filter(opened, size=3, mode="nearest"), size=3,
            mode="nearest").astype(bool)
    else:
        cleaned = raw.astype(bool)
    keep = bool(cleaned.mean() >= min_tissue_fraction) if cleaned.size else False
    return cleaned, keep


def _predict_tiles(handle: SlideHandle, backend: SegmenterBackend,
                   grid: TileGrid, windows, options: PredictOptions,
                   ) -> tuple[list, int]:
    """Read, filter and segment the given grid windows. Returns the
    (window, prediction) list for stitching plus the evaluated-tile count.
    Worker count never changes the result: predictions are keyed by window
    and merged by commutative vote counting."""

    def work(window):
        (x, y), (tw, th) = window
        origin = (x * grid.scale, y * grid.scale)
        tile = read_region(handle, origin, (tw, th), grid.scale)
        _, keep = tissue_mask(tile, options.luminance_threshold,
                              options.min_tissue_fraction)
        if not keep:
            return window, None
        return window, backend.predict(tile)

    windows = list(windows)
    if options.workers > 1:
        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(work, windows))
    else:
        results = [work(w) for w in windows]
    predictions = [(w, p) for w, p in results if p is not None]
    return predictions, len(predictions)


def build_hotspot_map(handle: SlideHandle, lowres_backend: SegmenterBackend,
                      grid_lowres: TileGrid, highres_grid: TileGrid,
                      options: PredictOptions) -> HotspotMap:
    """Low-resolution pass: segment the slide at the low-res scale, stitch
    into a class map, dilate its footprint, and derive the high-res grid
    windows that intersect the footprint's padded base boxes."""
    if lowres_backend.scale != grid_lowres.scale:
        raise BackendError(
            f"low-res backend scale {lowres_backend.scale} does not match "
            f"grid scale {grid_lowres.scale}")
    predictions, n_eval = _predict_tiles(handle, lowres_backend, grid_lowres,
                                         grid_lowres.windows, options)
    lowres_map = stitch(predictions, grid_lowres, lowres_backend.n_classes)

    hot = lowres_map.values > 0
    if options.hotspot_dilation > 0 and hot.any():
        hot = ndimage.binary_dilation(hot, structure=_OPEN_CLOSE_STRUCT,
                                      iterations=options.hotspot_dilation)

    windows = _windows_touching(hot, highres_grid, grid_lowres.scale,
                                options.hotspot_margin)
    return HotspotMap(class_map=lowres_map, windows=windows,
                      dilation_radius=options.hotspot_dilation,
                      margin=options.hotspot_margin,
                      lowres_tiles_evaluated=n_eval)


def _windows_touching(hot: np.ndarray, grid: TileGrid, lowres_scale: int,
                      margin: int) -> list:
    """Grid windows whose base-level rectangle intersects any padded box
    [s*j - margin, s*j + s + margin) x [s*i - margin, s*i + s + margin)
    of a hot low-res pixel (i, j)."""
    if not hot.any():
        return []
    s = lowres_scale
    nh, nw = hot.shape
    out = []
    for window in grid.windows:
        (x, y), (tw, th) = window
        bx0, by0 = x * grid.scale, y * grid.scale
        bx1, by1 = bx0 + tw * grid.scale, by0 + th * grid.scale
        j0 = max(0, (bx0 - s - margin) // s + 1)
        j1 = min(nw - 1, -(-(bx1 + margin) // s) - 1)
        i0 = max(0, (by0 - s - margin) // s + 1)
        i1 = min(nh - 1, -(-(by1 + margin) // s) - 1)
        if j0 <= j1 and i0 <= i1 and hot[i0:i1 + 1, j0:j1 + 1].any():
            out.append(window)
    return out


def predict_slide_report(handle: SlideHandle, highres_backend: SegmenterBackend,
                         class_map: ClassMap, mode: str = "deepzoom",
                         lowres_backend: SegmenterBackend | None = None,
                         options: PredictOptions | None = None,
                         ) -> PredictionReport:
    """Segment a whole slide and return the annotation document together
    with the slide-level mask and work/timing instrumentation."""
    options = options or PredictOptions()
    if mode not in ("deepzoom", "full"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "deepzoom" and lowres_backend is None:
        raise BackendError("deepzoom mode requires a low-res backend")

    t0 = time.perf_counter()
    grid = plan_tiles((handle.width, handle.height), options.tile_size,
                      options.overlap_fraction, scale=1)

    lowres_evaluated = 0
    hotspot_count = 0
    if mode == "deepzoom":
        lw, lh = handle.level_dimensions(options.lowres_scale)
        grid_lowres = plan_tiles((lw, lh), options.tile_size,
                                 options.overlap_fraction,
                                 scale=options.lowres_scale)
        hotspots = build_hotspot_map(handle, lowres_backend, grid_lowres,
                                     grid, options)
        windows = hotspots.windows
        lowres_evaluated = hotspots.lowres_tiles_evaluated
        hotspot_count = len(windows)
    else:
        windows = grid.windows

    predictions, n_eval = _predict_tiles(handle, highres_backend, grid,
                                         windows, options)
    mask = stitch(predictions, grid, highres_backend.n_classes)
    document = mask_to_annotations(mask, class_map)
    seconds = time.perf_counter() - t0
    return PredictionReport(document=document, mask=mask, mode=mode,
                            highres_tiles_evaluated=n_eval,
                            highres_tiles_total=len(grid),
                            lowres_tiles_evaluated=lowres_evaluated,
                            hotspot_windows=hotspot_count, seconds=seconds)


def predict_slide(handle: SlideHandle, highres_backend: SegmenterBackend,
                  class_map: ClassMap, mode: str = "deepzoom",
                  lowres_backend: SegmenterBackend | None = None,
                  options: PredictOptions | None = None) -> AnnotationDocument:
    return predict_slide_report(handle, highres_backend, class_map, mode=mode,
                                lowres_backend=lowres_backend,
                                options=options).document


# ---------------------------------------------------------------------------
# Training-set chopping and backend training
# ---------------------------------------------------------------------------

def chop_slide(handle: SlideHandle, doc: AnnotationDocument, class_map: ClassMap,
               tile_size: int = 500, overlap_fraction: float = 0.5,
               scale: int = 1, name: str | None = None):
    """Chop a slide and its annotations into overlapping (name, image, mask)
    block pairs at the given scale. Block names carry base-level window
    coordinates."""
    name = name or handle.path.stem
    w, h = handle.level_dimensions(scale)
    grid = plan_tiles((w, h), tile_size, overlap_fraction, scale=scale)
    pairs = []
    for (x, y), (tw, th) in grid.windows:
        origin = (x * scale, y * scale)
        image = read_region(handle, origin, (tw, th), scale)
        mask = rasterize_window(doc, class_map, origin, (tw, th), scale)
        pairs.append((f"{name}_{origin[0]}_{origin[1]}", image, mask))
    return pairs


def load_training_pairs(training_dir: str | Path):
    """Load ``*.img.png`` / ``*.msk.png`` pairs in deterministic name order."""
    training_dir = Path(training_dir)
    images = sorted(training_dir.glob("*.img.png"))
    pairs = []
    for img_path in images:
        msk_path = img_path.with_name(img_path.name[:-len(".img.png")] + ".msk.png")
        if not msk_path.is_file():
            raise BackendError(f"missing mask for training image {img_path.name}")
        pixels = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        values = load_mask_png(msk_path)
        image = ImageTile(origin=(0, 0), scale=1, width=pixels.shape[1],
                          height=pixels.shape[0], pixels=pixels)
        pairs.append((image, MaskTile.from_array(values)))
    return pairs


def train_backend(backend: SegmenterBackend, training_dir: str | Path,
                  budget: int = 1, seed: int = 0) -> SegmenterBackend:
    """Train (or retrain) a backend from an augmented pair directory."""
    pairs = load_training_pairs(training_dir)
    if not pairs:
        raise BackendError(f"empty training set in {training_dir}")
    return backend.train(pairs, budget=budget, seed=seed)
