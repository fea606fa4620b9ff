"""Conversion between vertex annotations and indexed class masks.

Fill convention (pinned): the pixel at mask index (i, j) of a window with
base-level origin (ox, oy) and integer scale s samples the base-coordinate
point (ox + j*s, oy + i*s). A pixel takes class c when that point lies
inside or on the boundary of a positive region of a layer bound to c and
not strictly inside any negative (hole) region of the same layer. Layers
paint in document order; a later layer overwrites only pixels it claims.
"Inside" is even-odd parity, which also gives self-touching polygons a
well-defined interior.

Tracing convention (pinned): foreground components are 8-connected,
background 4-connected. Contour vertices sit on the half-integer crack
lattice between pixels, so no pixel sample point ever lands on a traced
boundary and mask -> XML -> mask is pixel-exact, including nested
structures (islands inside holes are carved out of the hole polygon with
zero-width bridges, which even-odd parity cancels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationDocument, AnnotationLayer, ClassMap, Region

_EIGHT = np.ones((3, 3), dtype=bool)


class RasterError(Exception):
    """Unbound layers/classes or inconsistent raster inputs."""


@dataclass
class MaskTile:
    """Indexed 8-bit class raster pinned to a slide-space window."""

    origin: tuple[int, int]
    scale: int
    width: int
    height: int
    values: np.ndarray  # (height, width) uint8, 0 = background

    @classmethod
    def from_array(cls, values: np.ndarray, origin: tuple[int, int] = (0, 0),
                   scale: int = 1) -> "MaskTile":
        values = np.ascontiguousarray(values, dtype=np.uint8)
        h, w = values.shape
        return cls(origin=(int(origin[0]), int(origin[1])), scale=int(scale),
                   width=w, height=h, values=values)


@dataclass
class Contour:
    class_index: int
    polarity: str  # "outer" | "hole"
    vertices: list[tuple[float, float]]  # mask-pixel coordinates
    parent: int | None = None  # index of the outer contour a hole belongs to


@dataclass
class ContourSet:
    contours: list[Contour] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.contours)


# ---------------------------------------------------------------------------
# Scanline fill
# ---------------------------------------------------------------------------

def _first_center_ge(v: float, o: float, s: int) -> int:
    """Smallest integer j with o + j*s >= v (exact under float compare)."""
    j = math.ceil((v - o) / s)
    while o + (j - 1) * s >= v:
        j -= 1
    while o + j * s < v:
        j += 1
    return j


def _last_center_le(v: float, o: float, s: int) -> int:
    j = math.floor((v - o) / s)
    while o + (j + 1) * s <= v:
        j += 1
    while o + j * s > v:
        j -= 1
    return j


def _scan_polygon(vertices, origin: tuple[float, float], size: tuple[int, int],
                  scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Even-odd interior parity and exact boundary hits of one closed polygon
    over a sample grid. Returns (parity, boundary) bool arrays of shape
    (h, w); sample (i, j) is the point (ox + j*s, oy + i*s)."""
    ox, oy = origin
    w, h = size
    s = scale
    boundary = np.zeros((h, w), dtype=bool)
    cross_rows: list[np.ndarray] = []
    cross_cols: list[np.ndarray] = []
    n = len(vertices)

    for idx in range(n):
        x1, y1 = vertices[idx]
        x2, y2 = vertices[(idx + 1) % n]

        if y1 == y2:
            # Horizontal edge: boundary interval on its (single) exact row.
            i = _first_center_ge(y1, oy, s)
            if 0 <= i < h and oy + i * s == y1:
                xmin, xmax = (x1, x2) if x1 <= x2 else (x2, x1)
                j_lo = max(0, _first_center_ge(xmin, ox, s))
                j_hi = min(w - 1, _last_center_le(xmax, ox, s))
                if j_lo <= j_hi:
                    boundary[i, j_lo:j_hi + 1] = True
            continue

        y_lo, y_hi = (y1, y2) if y1 <= y2 else (y2, y1)
        slope = (x2 - x1) / (y2 - y1)

        # Parity: half-open [y_lo, y_hi) so shared vertices count once.
        i0 = max(0, _first_center_ge(y_lo, oy, s))
        i1 = _last_center_le(y_hi, oy, s)
        if 0 <= i1 < h and oy + i1 * s == y_hi:
            i1 -= 1
        i1 = min(h - 1, i1)
        if i0 <= i1:
            rows = np.arange(i0, i1 + 1)
            cys = oy + rows * float(s)
            xs = x1 + (cys - y1) * slope
            xs[cys == y1] = x1
            xs[cys == y2] = x2
            j = np.ceil((xs - ox) / s).astype(np.int64)
            for _ in range(2):  # ulp-correct the ceil
                j[ox + (j - 1) * s >= xs] -= 1
                j[ox + j * s < xs] += 1
            cross_rows.append(rows)
            cross_cols.append(np.clip(j, 0, w))

        # Boundary: closed [y_lo, y_hi]; exact collinearity decides hits.
        ib0 = max(0, _first_center_ge(y_lo, oy, s))
        ib1 = min(h - 1, _last_center_le(y_hi, oy, s))
        if ib0 <= ib1:
            rows = np.arange(ib0, ib1 + 1)
            cys = oy + rows * float(s)
            xs = x1 + (cys - y1) * slope
            xs[cys == y1] = x1
            xs[cys == y2] = x2
            jc = np.round((xs - ox) / s).astype(np.int64)
            dy = y2 - y1
            dx = x2 - x1
            for off in (-1, 0, 1):
                j = jc + off
                ok = (j >= 0) & (j < w)
                if not ok.any():
                    continue
                cxs = ox + j[ok] * float(s)
                hit = (cxs - x1) * dy == (cys[ok] - y1) * dx
                if hit.any():
                    boundary[rows[ok][hit], j[ok][hit]] = True

    parity = np.zeros((h, w), dtype=bool)
    if cross_rows:
        rows = np.concatenate(cross_rows)
        cols = np.concatenate(cross_cols)
        order = np.lexsort((cols, rows))
        rows = rows[order]
        cols = cols[order]
        # A closed polygon crosses each sample row an even number of times;
        # columns between crossing 2k and 2k+1 are interior.
        for k in range(0, len(rows), 2):
            c0, c1 = cols[k], cols[k + 1]
            if c0 < c1:
                parity[rows[k], c0:min(c1, w)] = True
    return parity, boundary


def fill_polygon_mask(vertices, width: int, height: int) -> np.ndarray:
    """Boundary-inclusive fill of one polygon over integer sample points
    (0..width-1, 0..height-1)."""
    bbox = _region_pixel_bbox(vertices, (0.0, 0.0), (width, height), 1)
    out = np.zeros((height, width), dtype=bool)
    if bbox is None:
        return out
    i0, i1, j0, j1 = bbox
    parity, boundary = _scan_polygon(vertices, (float(j0), float(i0)),
                                     (j1 - j0 + 1, i1 - i0 + 1), 1)
    out[i0:i1 + 1, j0:j1 + 1] = parity | boundary
    return out


def _region_pixel_bbox(vertices, origin, size, scale):
    """Index ranges of samples a polygon could affect, or None."""
    xs = [v[0] for v in vertices]
    ys = [v[1] for v in vertices]
    ox, oy = origin
    w, h = size
    j0 = max(0, _first_center_ge(min(xs), ox, scale))
    j1 = min(w - 1, _last_center_le(max(xs), ox, scale))
    i0 = max(0, _first_center_ge(min(ys), oy, scale))
    i1 = min(h - 1, _last_center_le(max(ys), oy, scale))
    if j0 > j1 or i0 > i1:
        return None
    return i0, i1, j0, j1


def rasterize_window(doc: AnnotationDocument, class_map: ClassMap,
                     origin: tuple[int, int], size: tuple[int, int],
                     scale: int = 1, on_unbound: str = "error") -> MaskTile:
    """Rasterize annotations over a window into an indexed class mask.

    ``on_unbound`` controls layers with no class binding: "error" raises,
    "skip" ignores them.
    """
    ox, oy = int(origin[0]), int(origin[1])
    w, h = int(size[0]), int(size[1])
    if w < 0 or h < 0:
        raise ValueError(f"negative window size {(w, h)}")
    if scale < 1 or int(scale) != scale:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    scale = int(scale)

    out = np.zeros((h, w), dtype=np.uint8)
    for layer in doc.layers:
        cls = class_map.class_for_layer(layer.id)
        if cls is None:
            if on_unbound == "skip":
                continue
            raise RasterError(f"layer {layer.id} has no class binding")
        pos = np.zeros((h, w), dtype=bool)
        neg = np.zeros((h, w), dtype=bool)
        for region in layer.regions:
            if not region.vertices:
                continue
            bbox = _region_pixel_bbox(region.vertices, (ox, oy), (w, h), scale)
            if bbox is None:
                continue
            i0, i1, j0, j1 = bbox
            sub_origin = (ox + j0 * scale, oy + i0 * scale)
            sub_size = (j1 - j0 + 1, i1 - i0 + 1)
            parity, boundary = _scan_polygon(region.vertices, sub_origin,
                                             sub_size, scale)
            view_pos = pos[i0:i1 + 1, j0:j1 + 1]
            view_neg = neg[i0:i1 + 1, j0:j1 + 1]
            if region.negative:
                view_neg |= parity & ~boundary
            else:
                view_pos |= parity | boundary
        claimed = pos & ~neg
        out[claimed] = cls
    return MaskTile(origin=(ox, oy), scale=scale, width=w, height=h, values=out)


# ---------------------------------------------------------------------------
# Contour tracing (crack following on the pixel-boundary lattice)
# ---------------------------------------------------------------------------

# Headings as (dx, dy) in crack coordinates; y grows downward.
_E, _S, _W, _N = (1, 0), (0, 1), (-1, 0), (0, -1)
_LEFT_OF = {_E: _N, _N: _W, _W: _S, _S: _E}
_RIGHT_OF = {_E: _S, _S: _W, _W: _N, _N: _E}


def _flank_pixels(corner: tuple[int, int], heading: tuple[int, int]):
    """(row, col) of the right-ahead and left-ahead pixels of the crack edge
    leaving ``corner`` in ``heading``."""
    x, y = corner
    if heading == _E:
        return (y, x), (y - 1, x)
    if heading == _S:
        return (y, x - 1), (y, x)
    if heading == _W:
        return (y - 1, x - 1), (y, x - 1)
    return (y - 1, x), (y - 1, x - 1)  # _N


def _trace_outer_loop(solid: np.ndarray) -> list[tuple[int, int]]:
    """Clockwise (interior on the right) crack boundary of a hole-free pixel
    set, as integer crack-lattice vertices at the turns.

    At diagonal pinch corners the walk turns left, which keeps an
    8-connected component on a single loop; the loop then visits the pinch
    corner twice, and even-odd parity still fills both diagonal pixels.
    """
    h, w = solid.shape

    def inside(r: int, c: int) -> bool:
        return 0 <= r < h and 0 <= c < w and solid[r, c]

    rows = np.flatnonzero(solid.any(axis=1))
    r0 = int(rows[0])
    c0 = int(np.flatnonzero(solid[r0])[0])
    start = (c0, r0)

    corners: list[tuple[int, int]] = []
    headings: list[tuple[int, int]] = []
    pos = start
    h_in = _E
    while True:
        a_r, a_l = _flank_pixels(pos, h_in)
        if inside(*a_l):
            h_out = _LEFT_OF[h_in]
        elif inside(*a_r):
            h_out = h_in
        else:
            h_out = _RIGHT_OF[h_in]
        corners.append(pos)
        headings.append(h_out)
        pos = (pos[0] + h_out[0], pos[1] + h_out[1])
        h_in = h_out
        if pos == start:
            break

    verts = [corners[i] for i in range(len(corners))
             if headings[i] != headings[i - 1]]
    return verts


def _bridge_loops(outer: list[tuple[int, int]],
                  islands: list[list[tuple[int, int]]]) -> list[tuple[int, int]]:
    """Join island loops to an outer loop with retraced L-shaped bridges.

    The doubled bridge edges cancel under even-odd parity, so the interior
    of the combined polygon is the outer interior minus the islands. Bridges
    run along crack lattice lines, never through a pixel sample point.
    """
    if not islands:
        return list(outer)
    verts = list(outer)
    anchor = outer[0]
    for loop in islands:
        target = loop[0]
        corner = (target[0], anchor[1])
        for p in (anchor, corner):
            if verts[-1] != p:
                verts.append(p)
        if verts[-1] != target:
            verts.append(target)
        verts.extend(loop[1:])
        for p in (target, corner):
            if verts[-1] != p:
                verts.append(p)
    # Closing edge runs corner -> anchor, retracing the first bridge leg.
    return verts


def _crack_to_mask_px(verts, dx: int = 0, dy: int = 0) -> list[tuple[float, float]]:
    return [(x + dx - 0.5, y + dy - 0.5) for x, y in verts]


def trace_contours(mask: MaskTile) -> ContourSet:
    """Outer and hole borders of every 8-connected foreground component,
    per class, with holes linked to their outer contour. Vertices are in
    mask-pixel coordinates (half-integer crack positions)."""
    values = mask.values
    result = ContourSet()
    if values.size == 0:
        return result

    # Work inside the nonzero bounding box; sparse slides trace in O(content).
    nz_rows = np.flatnonzero(values.any(axis=1))
    if len(nz_rows) == 0:
        return result
    nz_cols = np.flatnonzero(values.any(axis=0))
    r_off, c_off = int(nz_rows[0]), int(nz_cols[0])
    values = values[nz_rows[0]:nz_rows[-1] + 1, nz_cols[0]:nz_cols[-1] + 1]

    present = np.flatnonzero(np.bincount(values.ravel(), minlength=256))
    for cls in [int(c) for c in present if c != 0]:
        binary = values == cls
        fg_lab, n_fg = ndimage.label(binary, structure=_EIGHT)
        bg_lab, n_bg = ndimage.label(~binary)  # 4-connected background
        border_bg = set()
        for edge in (bg_lab[0], bg_lab[-1], bg_lab[:, 0], bg_lab[:, -1]):
            border_bg.update(int(v) for v in np.unique(edge) if v != 0)

        fg_slices = ndimage.find_objects(fg_lab)
        bg_slices = ndimage.find_objects(bg_lab)

        def top_left(lab: np.ndarray, idx: int, slices) -> tuple[int, int]:
            sl = slices[idx - 1]
            sub = lab[sl] == idx
            r_loc = int(np.flatnonzero(sub.any(axis=1))[0])
            c_loc = int(np.flatnonzero(sub[r_loc])[0])
            return sl[0].start + r_loc, sl[1].start + c_loc

        fg_anchor = {k: top_left(fg_lab, k, fg_slices) for k in range(1, n_fg + 1)}
        pockets = [p for p in range(1, n_bg + 1) if p not in border_bg]
        pocket_anchor = {p: top_left(bg_lab, p, bg_slices) for p in pockets}

        # Immediate parent of a region is the region owning the pixel just
        # above its topmost-leftmost pixel (8-fg / 4-bg duality).
        fg_parent_pocket: dict[int, int | None] = {}
        for k, (r, c) in fg_anchor.items():
            lbl = int(bg_lab[r - 1, c]) if r > 0 else 0
            fg_parent_pocket[k] = lbl if lbl in pocket_anchor else None
        pocket_parent_fg = {p: int(fg_lab[r - 1, c])
                            for p, (r, c) in pocket_anchor.items()}

        pocket_children: dict[int, list[int]] = {p: [] for p in pockets}
        for k in sorted(fg_anchor, key=fg_anchor.get):
            p = fg_parent_pocket[k]
            if p is not None:
                pocket_children[p].append(k)

        def outer_loop_of(lab: np.ndarray, idx: int, slices) -> list[tuple[int, int]]:
            sl = slices[idx - 1]
            local = lab[sl] == idx
            solid = ndimage.binary_fill_holes(local)
            loop = _trace_outer_loop(solid)
            return [(x + sl[1].start, y + sl[0].start) for x, y in loop]

        fg_loops = {k: outer_loop_of(fg_lab, k, fg_slices)
                    for k in range(1, n_fg + 1)}

        fg_pockets: dict[int, list[int]] = {k: [] for k in range(1, n_fg + 1)}
        for p in sorted(pockets, key=pocket_anchor.get):
            fg_pockets[pocket_parent_fg[p]].append(p)

        for k in sorted(fg_anchor, key=fg_anchor.get):
            outer_index = len(result.contours)
            result.contours.append(Contour(
                class_index=cls, polarity="outer",
                vertices=_crack_to_mask_px(fg_loops[k], c_off, r_off)))
            for p in fg_pockets[k]:
                loop = outer_loop_of(bg_lab, p, bg_slices)
                island_loops = [fg_loops[i] for i in pocket_children[p]]
                verts = _bridge_loops(loop, island_loops)
                result.contours.append(Contour(
                    class_index=cls, polarity="hole",
                    vertices=_crack_to_mask_px(verts, c_off, r_off),
                    parent=outer_index))
    return result


def mask_to_annotations(mask: MaskTile, class_map: ClassMap) -> AnnotationDocument:
    """Trace a mask and lift the contours into base-level slide coordinates
    as an annotation document (holes become NegativeROA regions)."""
    contours = trace_contours(mask)
    ox, oy = mask.origin
    s = mask.scale

    present = sorted({c.class_index for c in contours.contours})
    layers: dict[int, AnnotationLayer] = {}
    for cls in present:
        binding = class_map.binding_for_class(cls)
        if binding is None:
            raise RasterError(f"mask value {cls} has no class binding")
        layers[cls] = AnnotationLayer(id=binding.layer_id, name=binding.name,
                                      line_color=binding.color, regions=[])

    for contour in contours.contours:
        layer = layers[contour.class_index]
        verts = [(ox + x * s, oy + y * s) for x, y in contour.vertices]
        layer.regions.append(Region(id=len(layer.regions) + 1,
                                    negative=contour.polarity == "hole",
                                    vertices=verts))

    ordered = [layers[c] for c in present]
    return AnnotationDocument(microns_per_pixel=None, layers=ordered)


# ---------------------------------------------------------------------------
# Mask files
# ---------------------------------------------------------------------------

def save_mask_png(mask: MaskTile | np.ndarray, path: str | Path) -> None:
    """Write class indices as an 8-bit single-channel PNG."""
    values = mask.values if isinstance(mask, MaskTile) else np.asarray(mask)
    Image.fromarray(values.astype(np.uint8), mode="L").save(Path(path))


def load_mask_png(path: str | Path) -> np.ndarray:
    img = Image.open(Path(path))
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)
