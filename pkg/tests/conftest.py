import pytest
import torch

from deskqa.config import TrainConfig
from deskqa.corpus import SyntheticSpec, generate_synthetic
from deskqa.preprocess import Vocabulary


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(epochs=2, seed=0, dropout=0.0)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticSpec(seed=3, num_instances=12)
    return generate_synthetic(spec, "train")


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset):
    return Vocabulary.build(tiny_dataset)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
