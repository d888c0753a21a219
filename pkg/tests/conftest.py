import numpy as np
import pytest

from portionmtl import kernels
from portionmtl.data import generate_synthetic_dataset, split_train_test
from portionmtl.layers import BackboneSpec

TINY_BACKBONE = BackboneSpec(input_size=8, channels=(2, 3), feature_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 classes x 6 images of 8x8, already split."""
    ds = generate_synthetic_dataset(n_classes=4, per_class=6, image_size=8, seed=3)
    train, test = split_train_test(ds, 0.34, seed=3)
    return train, test
