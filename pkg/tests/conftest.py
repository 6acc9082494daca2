import numpy as np
import pytest

from roadseg.dataset import SegmentationSample
from roadseg.schema import default_schema


@pytest.fixture(scope="session")
def schema():
    return default_schema()


def random_sample(rng: np.random.Generator, h: int = 8, w: int = 8, num_classes: int = 12) -> SegmentationSample:
    return SegmentationSample(
        image=rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
        mask=rng.integers(0, num_classes, size=(h, w)).astype(np.uint8),
        source_id="random",
    )
