import numpy as np
import pytest

from slideloop.annotations import ClassBinding, ClassMap


@pytest.fixture
def classmap() -> ClassMap:
    return ClassMap([ClassBinding(layer_id=1, class_index=1, color=(170, 30, 30)),
                     ClassBinding(layer_id=2, class_index=2, color=(30, 30, 170))])


@pytest.fixture
def classmap4() -> ClassMap:
    return ClassMap([ClassBinding(layer_id=i, class_index=i, color=(60 * i, 20, 20))
                     for i in range(1, 5)])


def random_blob_mask(rng: np.random.Generator, height: int, width: int,
                     n_classes: int = 2, n_blobs: int = 8,
                     n_holes: int = 3) -> np.ndarray:
    """Random disks of random classes with carved holes; the workhorse input
    for conversion roundtrip tests."""
    mask = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.ogrid[:height, :width]
    for _ in range(n_blobs):
        cy = int(rng.integers(0, height))
        cx = int(rng.integers(0, width))
        r = int(rng.integers(2, max(3, min(height, width) // 3)))
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = int(rng.integers(1, n_classes + 1))
    for _ in range(n_holes):
        cy = int(rng.integers(0, height))
        cx = int(rng.integers(0, width))
        r = int(rng.integers(1, max(2, min(height, width) // 5)))
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0
    return mask
