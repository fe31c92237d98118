import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import keypatch without installing it
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from keypatch.analysis.patch_grid import PatchStats  # noqa: E402
from keypatch.imaging.image_core import GrayImage, RgbImage  # noqa: E402


def gaussian_blob(size: int, cx: float, cy: float, sigma: float, amplitude: float = 0.6,
                  background: float = 0.2) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return background + amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma ** 2))


def textured_pixels(size: int, seed: int, n_blobs: int = 40) -> np.ndarray:
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.full((size, size), 0.5)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(10, size - 10, size=2)
        sigma = rng.uniform(2.0, 5.0)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.35)
        out += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma ** 2))
    return np.clip(out, 0.0, 1.0)


@pytest.fixture
def blob_image():
    return GrayImage(gaussian_blob(64, 32.0, 32.0, 3.0))


@pytest.fixture
def textured_image():
    return GrayImage(textured_pixels(128, seed=7))


@pytest.fixture
def textured_rgb():
    g = textured_pixels(64, seed=3, n_blobs=20)
    return RgbImage(np.stack([g, 1.0 - g, 0.5 * g + 0.25], axis=-1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_stats():
    # 16 patches, 5 of them keypoint patches
    counts = np.zeros(16, dtype=np.int64)
    counts[[0, 3, 5, 10, 15]] = [1, 2, 1, 3, 1]
    return PatchStats(counts)
