"""Read access to large tiled images at multiple scales.

Slides are flat or pyramidal TIFF, or PNG. A pyramidal TIFF is stored as a
multi-page file where page 0 is the base level and later pages are integer
downsamples of it. All region reads are pure functions of
(file, origin, size, scale); requested area outside the slide is filled
with white, matching the white background of scanned slides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import AnnotationDocument, AnnotationLayer, Region

WHITE = 255

SUPPORTED_SUFFIXES = {".tif", ".tiff", ".png"}


class SlideError(Exception):
    """Unreadable, unsupported or degenerate slide file."""


@dataclass
class SlideHandle:
    """Open slide: base dimensions plus the integer downsample levels stored
    in the file. Level factor 1 (the base) is always present. Reads never
    mutate the handle, so one handle may serve concurrent workers."""

    path: Path
    width: int
    height: int
    level_factors: list[int]
    _levels: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def level_dimensions(self, factor: int) -> tuple[int, int]:
        return (_ceil_div(self.width, factor), _ceil_div(self.height, factor))


@dataclass
class ImageTile:
    """8-bit RGB tile pinned to a slide-space window.

    ``origin`` is in base-level pixels; ``width``/``height`` are in pixels at
    the tile's scale. ``pixels`` is a (height, width, 3) uint8 array.
    """

    origin: tuple[int, int]
    scale: int
    width: int
    height: int
    pixels: np.ndarray


@dataclass
class SyntheticShape:
    """One drawn shape: an ellipse (geometry = (cx, cy, rx, ry)) or a polygon
    (geometry = vertex list). ``class_index`` >= 1; class 0 is background."""

    kind: str  # "ellipse" | "polygon"
    class_index: int
    fill_color: tuple[int, int, int]
    geometry: tuple | list


@dataclass
class SyntheticSlideSpec:
    """Recipe for a reproducible test slide.

    ``shapes`` carry class labels and become ground-truth regions.
    ``distractors`` are drawn on the image only (washes, confusable blobs)
    and stay background in the ground truth.
    """

    width: int
    height: int
    background: tuple[int, int, int] = (WHITE, WHITE, WHITE)
    shapes: list[SyntheticShape] = field(default_factory=list)
    distractors: list[SyntheticShape] = field(default_factory=list)
    seed: int = 0
    pyramid_factors: tuple[int, ...] = (1,)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def open_slide(path: str | Path) -> SlideHandle:
    """Open a TIFF (flat or pyramidal) or PNG slide and report its levels.

    Raises SlideError for missing/unreadable files, unsupported formats and
    zero-area images.
    """
    path = Path(path)
    if not path.is_file():
        raise SlideError(f"no such file: {path}")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise SlideError(f"unsupported format: {path.suffix or path.name}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise SlideError(f"unsupported format: cannot decode {path}: {exc}") from exc

    width, height = img.size
    if width == 0 or height == 0:
        raise SlideError(f"zero-area image: {path}")

    levels: dict[int, np.ndarray] = {1: _to_rgb_array(img)}
    factors = [1]
    n_frames = getattr(img, "n_frames", 1)
    for page in range(1, n_frames):
        img.seek(page)
        pw, ph = img.size
        if pw == 0 or ph == 0:
            continue
        factor = round(width / pw)
        # Accept a page as a pyramid level only if both axes agree on an
        # integer factor (within rounding of the ceil-divided extent).
        if factor < 2 or round(height / ph) != factor:
            continue
        if _ceil_div(width, factor) != pw or _ceil_div(height, factor) != ph:
            continue
        levels[factor] = _to_rgb_array(img)
        factors.append(factor)
    img.close()

    return SlideHandle(path=path, width=width, height=height,
                       level_factors=sorted(set(factors)), _levels=levels)


def _to_rgb_array(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    arr.setflags(write=False)
    return arr


def read_region(handle: SlideHandle, origin: tuple[int, int],
                size: tuple[int, int], scale: int = 1) -> ImageTile:
    """Read a region of ``size`` (w, h) pixels at ``scale`` whose top-left
    corner sits at base-level ``origin``.

    The scale must be an integer >= 1; it is served from the coarsest stored
    level that divides both the scale and the origin, box-filtered down by
    the remaining ratio (integer mean, round half up). Out-of-bounds area is
    white.
    """
    ox, oy = int(origin[0]), int(origin[1])
    w, h = int(size[0]), int(size[1])
    if w < 0 or h < 0:
        raise ValueError(f"negative size: {(w, h)}")
    if scale < 1 or int(scale) != scale:
        raise ValueError(f"scale not achievable: {scale}")
    scale = int(scale)

    out = np.full((h, w, 3), WHITE, dtype=np.uint8)
    if w == 0 or h == 0:
        return ImageTile((ox, oy), scale, w, h, out)

    src_factor = 1
    for f in handle.level_factors:
        if f <= scale and scale % f == 0 and ox % f == 0 and oy % f == 0:
            src_factor = max(src_factor, f)
    level = handle._levels[src_factor]
    ratio = scale // src_factor

    # Window in source-level pixels.
    sx, sy = ox // src_factor, oy // src_factor
    sw, sh = w * ratio, h * ratio
    lh, lw = level.shape[:2]

    x0, y0 = max(sx, 0), max(sy, 0)
    x1, y1 = min(sx + sw, lw), min(sy + sh, lh)
    if x1 <= x0 or y1 <= y0:
        return ImageTile((ox, oy), scale, w, h, out)

    if ratio == 1:
        out[y0 - sy:y1 - sy, x0 - sx:x1 - sx] = level[y0:y1, x0:x1]
        return ImageTile((ox, oy), scale, w, h, out)

    canvas = np.full((sh, sw, 3), WHITE, dtype=np.uint8)
    canvas[y0 - sy:y1 - sy, x0 - sx:x1 - sx] = level[y0:y1, x0:x1]
    out[:] = box_downsample(canvas, ratio)
    return ImageTile((ox, oy), scale, w, h, out)


def box_downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Integer box-filter: each output pixel is the round-half-up mean of a
    ``factor`` x ``factor`` block. Ragged edges are padded with white first so
    multi-scale reads stay consistent with `read_region` padding."""
    if factor == 1:
        return pixels.copy()
    h, w = pixels.shape[:2]
    H, W = _ceil_div(h, factor), _ceil_div(w, factor)
    if (H * factor, W * factor) != (h, w):
        padded = np.full((H * factor, W * factor) + pixels.shape[2:], WHITE,
                         dtype=pixels.dtype)
        padded[:h, :w] = pixels
        pixels = padded
    blocks = pixels.reshape(H, factor, W, factor, -1)
    sums = blocks.sum(axis=3, dtype=np.uint32).sum(axis=1, dtype=np.uint32)
    area = factor * factor
    means = (2 * sums + area) // (2 * area)  # round half up
    out = means.astype(np.uint8)
    return out[:, :, 0] if pixels.ndim == 2 else out


def read_whole_slide(handle: SlideHandle, scale: int = 1) -> ImageTile:
    """Whole-slide raster at the given scale (edges white-padded)."""
    w, h = handle.level_dimensions(scale)
    return read_region(handle, (0, 0), (w, h), scale)


# ---------------------------------------------------------------------------
# Synthetic slide generation (desk-scale test oracle)
# ---------------------------------------------------------------------------

def ellipse_polygon(cx: float, cy: float, rx: float, ry: float,
                    n_vertices: int = 72) -> list[tuple[float, float]]:
    """Polygonal approximation of an ellipse, vertex order clockwise in
    screen coordinates. The polygon IS the shape: the generator rasterizes
    it and the ground truth stores the same vertices, so drawn pixels and
    annotations agree exactly."""
    angles = np.linspace(0.0, 2.0 * math.pi, n_vertices, endpoint=False)
    return [(cx + rx * math.cos(a), cy + ry * math.sin(a)) for a in angles]


def _shape_vertices(shape: SyntheticShape) -> list[tuple[float, float]]:
    if shape.kind == "ellipse":
        cx, cy, rx, ry = shape.geometry
        return ellipse_polygon(cx, cy, rx, ry)
    if shape.kind == "polygon":
        return [(float(x), float(y)) for x, y in shape.geometry]
    raise ValueError(f"unknown shape kind: {shape.kind}")


def _check_bounds(vertices: list[tuple[float, float]], spec: SyntheticSlideSpec,
                  what: str) -> None:
    xs = [v[0] for v in vertices]
    ys = [v[1] for v in vertices]
    if min(xs) < 0 or min(ys) < 0 or max(xs) > spec.width - 1 or max(ys) > spec.height - 1:
        raise ValueError(f"{what} out of slide bounds "
                         f"[0,{spec.width - 1}]x[0,{spec.height - 1}]")


def generate_synthetic_slide(spec: SyntheticSlideSpec, slide_path: str | Path,
                             xml_path: str | Path | None = None,
                             ) -> AnnotationDocument:
    """Render ``spec`` to a TIFF slide plus its ground-truth annotations.

    Distractors are painted first, class shapes after (in list order), so
    annotated structure always wins the image. Each class shape becomes one
    region in the layer of its class; rasterizing the returned document over
    the full slide reproduces the drawn class pixels exactly, because both
    use the same fill convention.
    """
    from .raster import fill_polygon_mask  # local import to avoid cycle

    slide_path = Path(slide_path)
    image = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    image[:] = np.asarray(spec.background, dtype=np.uint8)

    for shape in spec.distractors:
        verts = _shape_vertices(shape)
        _check_bounds(verts, spec, "distractor")
        inside = fill_polygon_mask(verts, spec.width, spec.height)
        image[inside] = np.asarray(shape.fill_color, dtype=np.uint8)

    layers: dict[int, AnnotationLayer] = {}
    for shape in spec.shapes:
        if shape.class_index < 1:
            raise ValueError("shape class indices must be >= 1")
        verts = _shape_vertices(shape)
        _check_bounds(verts, spec, "shape")
        inside = fill_polygon_mask(verts, spec.width, spec.height)
        image[inside] = np.asarray(shape.fill_color, dtype=np.uint8)
        layer = layers.get(shape.class_index)
        if layer is None:
            r, g, b = shape.fill_color
            layer = AnnotationLayer(id=shape.class_index, name=None,
                                    line_color=(r, g, b), regions=[])
            layers[shape.class_index] = layer
        layer.regions.append(Region(id=len(layer.regions) + 1, negative=False,
                                    vertices=[(float(x), float(y)) for x, y in verts]))

    doc = AnnotationDocument(microns_per_pixel=None,
                             layers=[layers[k] for k in sorted(layers)])

    save_slide_tiff(image, slide_path, pyramid_factors=spec.pyramid_factors)
    if xml_path is not None:
        from .annotations import serialize_annotations
        Path(xml_path).write_text(serialize_annotations(doc), encoding="utf-8")
    return doc


def save_slide_tiff(image: np.ndarray, path: str | Path,
                    pyramid_factors: tuple[int, ...] = (1,)) -> None:
    """Write an RGB array as a (possibly pyramidal) deflate-compressed TIFF.
    Extra levels are box-filter downsamples, so region-read consistency
    across levels holds exactly."""
    factors = sorted(set(int(f) for f in pyramid_factors))
    if not factors or factors[0] != 1:
        factors = [1] + [f for f in factors if f != 1]
    pages = [Image.fromarray(image)]
    for f in factors[1:]:
        pages.append(Image.fromarray(box_downsample(image, f)))
    pages[0].save(Path(path), save_all=len(pages) > 1, append_images=pages[1:],
                  compression="tiff_deflate")
