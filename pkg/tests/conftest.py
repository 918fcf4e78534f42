import numpy as np
import pytest
import torch

from detinvert.data import DatasetSpec, GeneratedShapes
from detinvert.models import make_detector
from detinvert.training import TrainConfig, train_detector

TINY_SPEC = DatasetSpec(
    image_size=(64, 64), count_range=(1, 3), size_range=(14, 28), motifs=()
)


@pytest.fixture(autouse=True)
def _single_thread():
    # the suite runs on one core; oversubscription only adds variance
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


@pytest.fixture(scope="session")
def tiny_data():
    return GeneratedShapes(TINY_SPEC, 8, stream=0)


@pytest.fixture(scope="session")
def trained_tiny(tiny_data):
    # one small overfit model shared by inversion and attribution tests
    model = make_detector("single_stage", seed=0, image_size=(64, 64))
    train_detector(model, tiny_data, TrainConfig(epochs=400, batch_size=8, lr=2e-3, seed=0))
    return model
