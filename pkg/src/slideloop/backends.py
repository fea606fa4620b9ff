"""Pluggable segmentation backends.

A backend maps an RGB tile to a class mask of identical dims and scale, and
can be retrained from (image, mask) pairs. The trainable reference is a
nearest-centroid classifier over window-averaged colors: simple enough to
be exact and fast at desk scale, rich enough that corrections genuinely
change its behavior between loop iterations. Real neural segmenters attach
through the external-process protocol without touching the pipeline.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationDocument, ClassMap
from .raster import MaskTile, load_mask_png, save_mask_png
from .slide_io import ImageTile

FORMAT_VERSION = 1


class BackendError(Exception):
    pass


class SegmenterBackend(ABC):
    """Contract: predict() returns a MaskTile with the tile's dims, origin
    and scale; train() consumes (image, mask) pairs and returns self with
    updated state. Both must be deterministic given state and seed.
    Prediction is read-only, so one trained backend may serve concurrent
    workers; training is a single-writer operation."""

    n_classes: int
    scale: int

    @abstractmethod
    def predict(self, tile: ImageTile) -> MaskTile:
        ...

    @abstractmethod
    def train(self, pairs, budget: int = 1, seed: int = 0) -> "SegmenterBackend":
        ...


class CentroidBackend(SegmenterBackend):
    """Nearest-centroid color classifier.

    Training computes, per class, the mean window-averaged RGB vector and
    the pixel-fraction prior over all pairs (the epoch budget beyond 1 is
    meaningless for exact means and is ignored). Prediction labels each
    pixel with the class of the nearest centroid; exact distance ties go to
    the higher prior, then to the lower class index, so flat backgrounds
    resolve deterministically.
    """

    def __init__(self, n_classes: int, scale: int = 1, window_radius: int = 1):
        if n_classes < 2:
            raise BackendError("need at least background plus one class")
        self.n_classes = int(n_classes)
        self.scale = int(scale)
        self.window_radius = int(window_radius)
        self.centroids: np.ndarray | None = None  # (n_classes, 3) float64
        self.priors: np.ndarray | None = None  # (n_classes,) float64

    # -- features ----------------------------------------------------------
    def _features(self, pixels: np.ndarray) -> np.ndarray:
        feats = pixels.astype(np.float64)
        r = self.window_radius
        if r > 0:
            size = 2 * r + 1
            feats = ndimage.uniform_filter(feats, size=(size, size, 1),
                                           mode="nearest")
        return feats

    # -- contract ----------------------------------------------------------
    def train(self, pairs, budget: int = 1, seed: int = 0) -> "CentroidBackend":
        if budget < 1:
            raise BackendError("training budget must be >= 1")
        pairs = list(pairs)
        if not pairs:
            raise BackendError("empty training set")
        sums = np.zeros((self.n_classes, 3), dtype=np.float64)
        counts = np.zeros(self.n_classes, dtype=np.int64)
        for image, mask in pairs:
            pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
            values = mask.values if isinstance(mask, MaskTile) else np.asarray(mask)
            if pixels.shape[:2] != values.shape:
                raise BackendError("image/mask dimension mismatch in training pair")
            if int(values.max(initial=0)) >= self.n_classes:
                raise BackendError(
                    f"class-space mismatch: mask value {int(values.max())} "
                    f">= n_classes {self.n_classes}")
            feats = self._features(pixels)
            for cls in np.unique(values):
                sel = values == cls
                sums[cls] += feats[sel].sum(axis=0)
                counts[cls] += int(sel.sum())
        if counts[1:].sum() == 0:
            raise BackendError("class-space mismatch: training set has no foreground")
        seen = counts > 0
        centroids = np.full((self.n_classes, 3), np.inf, dtype=np.float64)
        centroids[seen] = sums[seen] / counts[seen, None]
        self.centroids = centroids
        self.priors = counts / counts.sum()
        return self

    def predict(self, tile: ImageTile) -> MaskTile:
        if self.centroids is None:
            raise BackendError("backend is untrained")
        feats = self._features(tile.pixels).reshape(-1, 3)
        # Unseen classes carry +inf centroids and never win.
        finite = np.isfinite(self.centroids).all(axis=1)
        cents = np.where(finite[:, None], self.centroids, 1e9)
        d2 = ((feats[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        best = d2.min(axis=1, keepdims=True)
        tied = d2 == best
        # Tie-break: higher prior first, then lower class index.
        order = np.lexsort((np.arange(self.n_classes), -self.priors))
        rank = np.empty(self.n_classes, dtype=np.int64)
        rank[order] = np.arange(self.n_classes)
        scores = np.where(tied, rank[None, :], np.iinfo(np.int64).max)
        labels = scores.argmin(axis=1).astype(np.uint8)
        return MaskTile(origin=tile.origin, scale=tile.scale, width=tile.width,
                        height=tile.height,
                        values=labels.reshape(tile.height, tile.width))

    # -- persistence -------------------------------------------------------
    def state_blob(self) -> bytes:
        import io
        buf = io.BytesIO()
        np.savez(buf, centroids=self.centroids, priors=self.priors,
                 window_radius=np.int64(self.window_radius))
        return buf.getvalue()

    def load_state_blob(self, blob: bytes) -> None:
        import io
        data = np.load(io.BytesIO(blob))
        self.centroids = data["centroids"]
        self.priors = data["priors"]
        self.window_radius = int(data["window_radius"])


class GroundTruthBackend(SegmenterBackend):
    """Oracle backend: returns the rasterized ground-truth annotations for
    any requested window. Used to test pipeline laws independently of any
    learned model."""

    def __init__(self, doc: AnnotationDocument, class_map: ClassMap, scale: int = 1):
        self.doc = doc
        self.class_map = class_map
        self.n_classes = class_map.n_classes
        self.scale = int(scale)

    def predict(self, tile: ImageTile) -> MaskTile:
        from .raster import rasterize_window
        return rasterize_window(self.doc, self.class_map, tile.origin,
                                (tile.width, tile.height), tile.scale)

    def train(self, pairs, budget: int = 1, seed: int = 0) -> "GroundTruthBackend":
        return self  # nothing to learn


class ExternalProcessBackend(SegmenterBackend):
    """Adapter for out-of-process segmenters (where a neural model plugs in).

    For each batch the pipeline writes the tiles as PNG files plus a request
    manifest (one ``<tile path> <scale>`` line per tile), then invokes the
    configured command with the manifest path appended. The command must
    write ``<tile stem>.mask.png`` next to each tile and exit 0; a nonzero
    exit is a backend error.
    """

    def __init__(self, command: list[str], n_classes: int, scale: int = 1):
        if not command:
            raise BackendError("external backend needs a command")
        self.command = list(command)
        self.n_classes = int(n_classes)
        self.scale = int(scale)

    def predict(self, tile: ImageTile) -> MaskTile:
        return self.predict_batch([tile])[0]

    def predict_batch(self, tiles) -> list[MaskTile]:
        tiles = list(tiles)
        with tempfile.TemporaryDirectory(prefix="slideloop-backend-") as tmp:
            tmp_path = Path(tmp)
            entries = []
            for i, tile in enumerate(tiles):
                tile_file = tmp_path / f"tile_{i:05d}.png"
                Image.fromarray(tile.pixels).save(tile_file)
                entries.append(f"{tile_file} {tile.scale}")
            manifest = tmp_path / "request.txt"
            manifest.write_text("\n".join(entries) + "\n", encoding="utf-8")
            proc = subprocess.run(self.command + [str(manifest)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise BackendError(
                    f"external backend failed (exit {proc.returncode}): "
                    f"{proc.stderr.strip()[:500]}")
            out = []
            for i, tile in enumerate(tiles):
                mask_file = tmp_path / f"tile_{i:05d}.mask.png"
                if not mask_file.is_file():
                    raise BackendError(f"external backend wrote no mask for tile {i}")
                values = load_mask_png(mask_file)
                if values.shape != (tile.height, tile.width):
                    raise BackendError(
                        f"external backend mask shape {values.shape} does not "
                        f"match tile {(tile.height, tile.width)}")
                out.append(MaskTile(origin=tile.origin, scale=tile.scale,
                                    width=tile.width, height=tile.height,
                                    values=values))
            return out

    def train(self, pairs, budget: int = 1, seed: int = 0) -> "ExternalProcessBackend":
        raise BackendError("external backends are trained out of process")


# ---------------------------------------------------------------------------
# Persistence: opaque blob + JSON sidecar under MODELS/<iteration>/
# ---------------------------------------------------------------------------

def save_backend(backend: SegmenterBackend, directory: str | Path, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {"version": FORMAT_VERSION, "n_classes": backend.n_classes,
               "scale": backend.scale}
    if isinstance(backend, CentroidBackend):
        sidecar["kind"] = "centroid"
        (directory / f"{name}.bin").write_bytes(backend.state_blob())
    elif isinstance(backend, ExternalProcessBackend):
        sidecar["kind"] = "external"
        sidecar["command"] = backend.command
    else:
        raise BackendError(f"cannot persist backend of type {type(backend).__name__}")
    (directory / f"{name}.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_backend(directory: str | Path, name: str) -> SegmenterBackend:
    directory = Path(directory)
    sidecar_path = directory / f"{name}.json"
    if not sidecar_path.is_file():
        raise BackendError(f"no saved backend {name!r} in {directory}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    kind = sidecar.get("kind")
    if kind == "centroid":
        backend = CentroidBackend(n_classes=sidecar["n_classes"],
                                  scale=sidecar["scale"])
        backend.load_state_blob((directory / f"{name}.bin").read_bytes())
        return backend
    if kind == "external":
        return ExternalProcessBackend(command=sidecar["command"],
                                      n_classes=sidecar["n_classes"],
                                      scale=sidecar["scale"])
    raise BackendError(f"unknown backend kind {kind!r} in {sidecar_path}")
