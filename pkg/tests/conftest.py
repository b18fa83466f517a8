import numpy as np
import pytest

from inpaintguard.denoiser import Denoiser, DenoiserConfig


def toy_config():
    """Small 8 px model used for gradient checks; same block layout."""
    return DenoiserConfig(
        image_size=8, base_width=8, deep_width=16, token_dim=8, time_dim=16
    )


@pytest.fixture(scope="session")
def toy_model():
    # random head so no gradient path degenerates to zero
    return Denoiser.fresh(toy_config(), seed=11, zero_head=False)


@pytest.fixture(scope="session")
def std_model():
    return Denoiser.fresh(DenoiserConfig(), seed=5)


def random_image(rng, size=32):
    return rng.random((3, size, size))
