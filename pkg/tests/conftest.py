"""Shared fixtures: a toy-sized experiment that trains in well under a second."""

import numpy as np
import pytest

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.data import Dataset, Split, build_datasets
from iprompt_lab.encoder import EncoderParams
from iprompt_lab.verify import toy_config


@pytest.fixture
def config() -> ExperimentConfig:
    return toy_config()


@pytest.fixture
def backbone(config: ExperimentConfig) -> EncoderParams:
    return EncoderParams.initialize(config.encoder, seed=5, frozen=True)


@pytest.fixture
def datasets(config: ExperimentConfig) -> dict[Split, Dataset]:
    return build_datasets(config)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng: np.random.Generator) -> np.ndarray:
    """Three normalised 3x8x8 images matching the toy encoder."""
    return rng.normal(size=(3, 3, 8, 8))
