import numpy as np
import pytest

from scribmat.imagegraph import _finalize_map


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_tone_image():
    """64x64 image, left half dark red, right half blue."""
    img = np.zeros((64, 64, 3))
    img[:, :32] = (0.8, 0.1, 0.1)
    img[:, 32:] = (0.1, 0.1, 0.8)
    return img


def grid_superpixels(width, height, cell):
    """Regular grid labelling as a SuperpixelMap for controlled tests."""
    yy, xx = np.mgrid[0:height, 0:width]
    labels = (yy // cell) * (width // cell) + (xx // cell)
    return _finalize_map(labels.astype(np.int64), int(labels.max()) + 1)


@pytest.fixture
def sp8(two_tone_image):
    """8x8-cell superpixel grid over the 64x64 two-tone image."""
    return grid_superpixels(64, 64, 8)
