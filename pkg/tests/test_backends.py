import os
import stat

import numpy as np
import pytest

from slideloop.backends import (BackendError, CentroidBackend,
                                ExternalProcessBackend, GroundTruthBackend,
                                load_backend, save_backend)
from slideloop.raster import MaskTile
from slideloop.slide_io import ImageTile


def tile_of(pixels: np.ndarray) -> ImageTile:
    return ImageTile(origin=(0, 0), scale=1, width=pixels.shape[1],
                     height=pixels.shape[0], pixels=pixels.astype(np.uint8))


def make_pair(mask: np.ndarray, colors: dict) -> tuple[ImageTile, MaskTile]:
    pixels = np.full(mask.shape + (3,), 255, dtype=np.uint8)
    for cls, color in colors.items():
        pixels[mask == cls] = color
    return tile_of(pixels), MaskTile.from_array(mask)


class TestCentroidBackend:
    def test_training_computes_exact_mean(self):
        mask = np.zeros((10, 10), np.uint8)
        mask[2:8, 2:8] = 1
        pair = make_pair(mask, {1: (255, 0, 0)})
        backend = CentroidBackend(n_classes=2, window_radius=0).train([pair])
        assert np.allclose(backend.centroids[1], (255, 0, 0))
        assert np.allclose(backend.centroids[0], (255, 255, 255))
        assert backend.priors[1] == pytest.approx(0.36)

    def test_background_only_training_rejected(self):
        pair = make_pair(np.zeros((8, 8), np.uint8), {})
        with pytest.raises(BackendError, match="class-space mismatch"):
            CentroidBackend(n_classes=2).train([pair])

    def test_class_value_above_space_rejected(self):
        mask = np.zeros((4, 4), np.uint8)
        mask[0, 0] = 5
        pair = make_pair(mask, {5: (1, 2, 3)})
        with pytest.raises(BackendError, match="class-space mismatch"):
            CentroidBackend(n_classes=2).train([pair])

    def test_empty_training_set_rejected(self):
        with pytest.raises(BackendError, match="empty training set"):
            CentroidBackend(n_classes=2).train([])

    def test_separable_colors_predict_perfectly(self):
        rng = np.random.default_rng(0)
        masks = [(rng.random((32, 32)) < 0.3).astype(np.uint8) for _ in range(4)]
        pairs = [make_pair(m, {1: (170, 30, 30)}) for m in masks]
        backend = CentroidBackend(n_classes=2, window_radius=0).train(pairs)
        held = (rng.random((40, 40)) < 0.4).astype(np.uint8)
        img, _ = make_pair(held, {1: (170, 30, 30)})
        pred = backend.predict(img)
        assert np.array_equal(pred.values, held)

    def test_untrained_predict_rejected(self):
        backend = CentroidBackend(n_classes=2)
        with pytest.raises(BackendError, match="untrained"):
            backend.predict(tile_of(np.zeros((4, 4, 3))))

    def test_prediction_deterministic(self):
        rng = np.random.default_rng(1)
        mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        pairs = [make_pair(mask, {1: (10, 200, 30)})]
        backend = CentroidBackend(n_classes=2).train(pairs)
        img = tile_of(rng.integers(0, 255, (20, 20, 3)))
        a = backend.predict(img)
        b = backend.predict(img)
        assert np.array_equal(a.values, b.values)

    def test_save_load_roundtrip(self, tmp_path):
        mask = np.zeros((8, 8), np.uint8)
        mask[:4] = 1
        backend = CentroidBackend(n_classes=2, scale=1).train(
            [make_pair(mask, {1: (60, 60, 200)})])
        save_backend(backend, tmp_path, "highres")
        assert (tmp_path / "highres.bin").is_file()
        assert (tmp_path / "highres.json").is_file()
        loaded = load_backend(tmp_path, "highres")
        assert isinstance(loaded, CentroidBackend)
        assert np.array_equal(loaded.centroids, backend.centroids)
        img = tile_of(np.full((6, 6, 3), 70, np.uint8))
        assert np.array_equal(loaded.predict(img).values,
                              backend.predict(img).values)

    def test_missing_saved_backend(self, tmp_path):
        with pytest.raises(BackendError, match="no saved backend"):
            load_backend(tmp_path, "highres")


class TestGroundTruthBackend:
    def test_returns_rasterized_truth(self, classmap):
        from slideloop.annotations import AnnotationDocument, AnnotationLayer, Region
        doc = AnnotationDocument(layers=[AnnotationLayer(
            id=1, name=None, line_color=(0, 0, 0), regions=[Region(
                1, False, [(2, 2), (9, 2), (9, 9), (2, 9)])])])
        backend = GroundTruthBackend(doc, classmap, scale=1)
        tile = tile_of(np.zeros((12, 12, 3)))
        pred = backend.predict(tile)
        assert (pred.values[2:10, 2:10] == 1).all()
        assert pred.values.sum() == 64


EXTERNAL_SCRIPT = """#!/usr/bin/env python3
# Test stand-in for an out-of-process segmenter: dark pixels -> class 1.
import sys
import numpy as np
from PIL import Image

manifest = sys.argv[1]
for line in open(manifest):
    path, scale = line.rsplit(" ", 1)
    pixels = np.asarray(Image.open(path).convert("RGB"))
    mask = (pixels.mean(axis=2) < 128).astype("uint8")
    Image.fromarray(mask, mode="L").save(path[:-4] + ".mask.png")
"""


class TestExternalProcessBackend:
    def _script(self, tmp_path, body=EXTERNAL_SCRIPT):
        script = tmp_path / "backend.py"
        script.write_text(body)
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        return script

    def test_protocol_roundtrip(self, tmp_path):
        script = self._script(tmp_path)
        backend = ExternalProcessBackend(["python3", str(script)], n_classes=2)
        pixels = np.full((10, 10, 3), 255, np.uint8)
        pixels[2:5, 2:5] = 0
        pred = backend.predict(tile_of(pixels))
        assert (pred.values[2:5, 2:5] == 1).all()
        assert pred.values.sum() == 9

    def test_nonzero_exit_is_backend_error(self, tmp_path):
        script = self._script(tmp_path, "import sys; sys.exit(3)")
        backend = ExternalProcessBackend(["python3", str(script)], n_classes=2)
        with pytest.raises(BackendError, match="exit 3"):
            backend.predict(tile_of(np.zeros((4, 4, 3))))

    def test_missing_mask_is_backend_error(self, tmp_path):
        script = self._script(tmp_path, "pass")
        backend = ExternalProcessBackend(["python3", str(script)], n_classes=2)
        with pytest.raises(BackendError, match="wrote no mask"):
            backend.predict(tile_of(np.zeros((4, 4, 3))))

    def test_save_load_sidecar(self, tmp_path):
        backend = ExternalProcessBackend(["python3", "seg.py"], n_classes=3, scale=16)
        save_backend(backend, tmp_path, "lowres")
        loaded = load_backend(tmp_path, "lowres")
        assert isinstance(loaded, ExternalProcessBackend)
        assert loaded.command == ["python3", "seg.py"]
        assert loaded.n_classes == 3 and loaded.scale == 16
