"""Class-balanced augmentation of chopped image/mask training blocks.

Rarer classes get deterministically more copies instead of stochastic
oversampling: each block containing foreground is copied
round(base * max_class_count / rarest_class_count_present) times, capped at
cap_factor * base, so a fixed (blocks, seed, config) triple always produces
a byte-identical training set. Geometric ops warp image and mask with the
same field and nearest-neighbor sampling, so a pixel's class always travels
with its color; color ops touch the image only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import MaskTile, save_mask_png
from .slide_io import WHITE, ImageTile


@dataclass
class ClassCounts:
    """Per-class number of blocks containing at least one pixel of the class
    (presence counts; background is excluded from balancing)."""

    counts: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, cls: int) -> int:
        return self.counts.get(cls, 0)


@dataclass
class AugmentOp:
    """One augmentation step. ``kind`` is one of hflip, vflip, hue, lightness,
    affine. Parameter fields are bounds: hue samples uniform +-degrees,
    lightness uniform +-fraction of range, affine displaces a grid_size x
    grid_size control lattice by uniform +-max_displacement pixels."""

    kind: str
    degrees: float = 0.0
    fraction: float = 0.0
    grid_size: int = 4
    max_displacement: float = 0.0


@dataclass
class AugmentationPlan:
    base: int
    cap: int
    seed: int
    copies: list[int] = field(default_factory=list)  # per block, >= 1

    @property
    def total(self) -> int:
        return sum(self.copies)


def tabulate_classes(blocks) -> ClassCounts:
    """Count, per foreground class, how many blocks contain it."""
    counts: dict[int, int] = {}
    for block in blocks:
        values = block.values if isinstance(block, MaskTile) else np.asarray(block)
        for cls in np.unique(values):
            if cls != 0:
                counts[int(cls)] = counts.get(int(cls), 0) + 1
    return ClassCounts(counts=counts)


def plan_balanced_augmentation(counts: ClassCounts, base: int, blocks,
                               cap_factor: int = 4, seed: int = 0) -> AugmentationPlan:
    """Copy counts per block: background-only blocks get exactly ``base``
    copies, others base * (max class count / rarest class present), rounded
    and capped at cap_factor * base."""
    if base < 1:
        raise ValueError(f"base multiplier must be >= 1, got {base}")
    cap = cap_factor * base
    max_count = max(counts.counts.values(), default=0)
    copies = []
    for block in blocks:
        values = block.values if isinstance(block, MaskTile) else np.asarray(block)
        present = [int(c) for c in np.unique(values) if c != 0]
        if not present or max_count == 0:
            copies.append(base)
            continue
        rarest = min(counts[c] for c in present)
        n = int(round(base * max_count / rarest))
        copies.append(max(base, min(n, cap)))
    return AugmentationPlan(base=base, cap=cap, seed=seed, copies=copies)


# ---------------------------------------------------------------------------
# Color space helpers (vectorized RGB <-> HSL)
# ---------------------------------------------------------------------------

def _rgb_to_hsl(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    l = (maxc + minc) / 2.0
    delta = maxc - minc
    s = np.zeros_like(l)
    chrom = delta > 0
    denom = 1.0 - np.abs(2.0 * l - 1.0)
    np.divide(delta, denom, out=s, where=chrom & (denom > 0))
    h = np.zeros_like(l)
    rc = chrom & (maxc == r)
    gc = chrom & (maxc == g) & ~rc
    bc = chrom & ~rc & ~gc
    with np.errstate(invalid="ignore", divide="ignore"):
        h[rc] = np.mod((g[rc] - b[rc]) / delta[rc], 6.0)
        h[gc] = (b[gc] - r[gc]) / delta[gc] + 2.0
        h[bc] = (r[bc] - g[bc]) / delta[bc] + 4.0
    return h * 60.0, s, l


def _hsl_to_rgb(h: np.ndarray, s: np.ndarray, l: np.ndarray) -> np.ndarray:
    c = (1.0 - np.abs(2.0 * l - 1.0)) * s
    hp = (h % 360.0) / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    zeros = np.zeros_like(c)
    conds = [(hp < 1), (hp < 2), (hp < 3), (hp < 4), (hp < 5), (hp >= 5)]
    rgb_opts = [(c, x, zeros), (x, c, zeros), (zeros, c, x),
                (zeros, x, c), (x, zeros, c), (c, zeros, x)]
    r = np.select(conds, [o[0] for o in rgb_opts])
    g = np.select(conds, [o[1] for o in rgb_opts])
    b = np.select(conds, [o[2] for o in rgb_opts])
    m = l - c / 2.0
    return np.stack([r + m, g + m, b + m], axis=-1)


def _shift_colors(pixels: np.ndarray, hue_deg: float, light_shift: float) -> np.ndarray:
    rgb = pixels.astype(np.float64) / 255.0
    h, s, l = _rgb_to_hsl(rgb)
    h = h + hue_deg
    l = np.clip(l + light_shift, 0.0, 1.0)
    out = _hsl_to_rgb(h, s, l)
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Geometric warps
# ---------------------------------------------------------------------------

def _displacement_field(h: int, w: int, grid_size: int, max_disp: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation of a coarse lattice of random node shifts."""
    k = max(2, int(grid_size))
    nodes_dx = rng.uniform(-max_disp, max_disp, size=(k, k))
    nodes_dy = rng.uniform(-max_disp, max_disp, size=(k, k))
    gy = np.linspace(0.0, k - 1.0, h)
    gx = np.linspace(0.0, k - 1.0, w)
    iy = np.minimum(gy.astype(int), k - 2)
    ix = np.minimum(gx.astype(int), k - 2)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]

    def interp(nodes):
        tl = nodes[np.ix_(iy, ix)]
        tr = nodes[np.ix_(iy, ix + 1)]
        bl = nodes[np.ix_(iy + 1, ix)]
        br = nodes[np.ix_(iy + 1, ix + 1)]
        top = tl * (1 - fx) + tr * fx
        bot = bl * (1 - fx) + br * fx
        return top * (1 - fy) + bot * fy

    return interp(nodes_dx), interp(nodes_dy)


def _warp_nearest(image: np.ndarray, mask: np.ndarray, dx: np.ndarray,
                  dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_x = np.rint(xx + dx).astype(np.int64)
    src_y = np.rint(yy + dy).astype(np.int64)
    inside = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    sx = np.clip(src_x, 0, w - 1)
    sy = np.clip(src_y, 0, h - 1)
    out_img = image[sy, sx]
    out_img[~inside] = WHITE
    out_mask = mask[sy, sx]
    out_mask[~inside] = 0
    return out_img, out_mask


def apply_augmentation(image: ImageTile | np.ndarray, mask: MaskTile | np.ndarray,
                       ops: list[AugmentOp], seed: int,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Apply ops in order, sampling their parameters from ``seed``.

    Flips are deterministic involutions; hue/lightness shifts draw uniforms
    within the op's bounds (bound 0 leaves the image untouched); the
    piecewise affine warp resamples both rasters nearest-neighbor from the
    same displacement field, filling uncovered pixels with white / class 0.
    """
    img = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
    msk = mask.values if isinstance(mask, MaskTile) else np.asarray(mask)
    if img.shape[:2] != msk.shape:
        raise ValueError(f"image dims {img.shape[:2]} != mask dims {msk.shape}")
    img = img.copy()
    msk = msk.copy()
    rng = np.random.default_rng(seed)

    for op in ops:
        if op.kind == "hflip":
            img = img[:, ::-1].copy()
            msk = msk[:, ::-1].copy()
        elif op.kind == "vflip":
            img = img[::-1].copy()
            msk = msk[::-1].copy()
        elif op.kind == "hue":
            deg = rng.uniform(-op.degrees, op.degrees)
            if op.degrees != 0.0:
                img = _shift_colors(img, deg, 0.0)
        elif op.kind == "lightness":
            shift = rng.uniform(-op.fraction, op.fraction)
            if op.fraction != 0.0:
                img = _shift_colors(img, 0.0, shift)
        elif op.kind == "affine":
            dx, dy = _displacement_field(msk.shape[0], msk.shape[1],
                                         op.grid_size, op.max_displacement, rng)
            if op.max_displacement != 0.0:
                img, msk = _warp_nearest(img, msk, dx, dy)
        else:
            raise ValueError(f"unknown augmentation op {op.kind!r}")
    return img, msk


def block_seed(global_seed: int, block_index: int, copy_index: int) -> int:
    """Stable per-copy seed so results are independent of scheduling."""
    ss = np.random.SeedSequence([int(global_seed), int(block_index), int(copy_index)])
    return int(ss.generate_state(1)[0])


def default_ops(rng: np.random.Generator, hue_delta: float, lightness_delta: float,
                affine_grid: int, affine_disp: float) -> list[AugmentOp]:
    """Standard per-copy op list: coin-flipped flips plus jitter ops."""
    ops: list[AugmentOp] = []
    if rng.random() < 0.5:
        ops.append(AugmentOp("hflip"))
    if rng.random() < 0.5:
        ops.append(AugmentOp("vflip"))
    ops.append(AugmentOp("hue", degrees=hue_delta))
    ops.append(AugmentOp("lightness", fraction=lightness_delta))
    ops.append(AugmentOp("affine", grid_size=affine_grid, max_displacement=affine_disp))
    return ops


def write_training_set(pairs, out_dir: str | Path, base: int,
                       cap_factor: int = 4, seed: int = 0,
                       hue_delta: float = 10.0, lightness_delta: float = 0.08,
                       affine_grid: int = 4, affine_disp: float = 5.0,
                       ) -> AugmentationPlan:
    """Chop-output pairs -> balanced augmented training directory.

    ``pairs`` is a list of (name, ImageTile, MaskTile). Copy 0 of each block
    is the original; further copies are augmented. Files are written as
    ``<name>_<copy>.img.png`` / ``.msk.png`` plus a ``manifest.txt`` audit
    summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = [m for (_, _, m) in pairs]
    counts = tabulate_classes(masks)
    plan = plan_balanced_augmentation(counts, base, masks, cap_factor=cap_factor,
                                      seed=seed)

    lines = [f"base={base} cap={plan.cap} seed={seed}",
             f"class_block_counts={dict(sorted(counts.counts.items()))}"]
    for block_index, (name, image, mask) in enumerate(pairs):
        n_copies = plan.copies[block_index]
        lines.append(f"{name} copies={n_copies}")
        for copy in range(n_copies):
            if copy == 0:
                img, msk = image.pixels, mask.values
            else:
                s = block_seed(seed, block_index, copy)
                rng = np.random.default_rng(s)
                ops = default_ops(rng, hue_delta, lightness_delta,
                                  affine_grid, affine_disp)
                img, msk = apply_augmentation(image, mask, ops, seed=s)
            stem = f"{name}_{copy}"
            Image.fromarray(img).save(out_dir / f"{stem}.img.png")
            save_mask_png(msk, out_dir / f"{stem}.msk.png")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return plan
