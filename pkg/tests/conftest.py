import numpy as np
import pytest
from scipy import ndimage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_blob(rng, shape=(64, 64), sigma=3.0, level=0.52):
    return ndimage.gaussian_filter(rng.random(shape), sigma) > level


def random_thin(rng, shape=(64, 64), n_strokes=4):
    """Union of random 8-connected polylines thinned to 1 px."""
    from pniseg.morphology import skeletonize

    m = np.zeros(shape, dtype=bool)
    for _ in range(n_strokes):
        y, x = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        for _ in range(rng.integers(5, 40)):
            m[y, x] = True
            y = int(np.clip(y + rng.integers(-1, 2), 0, shape[0] - 1))
            x = int(np.clip(x + rng.integers(-1, 2), 0, shape[1] - 1))
    return skeletonize(m)
