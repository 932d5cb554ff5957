import numpy as np
import pytest

from pseudomask.rng import stream


@pytest.fixture
def rng():
    return stream(12345, "tests")


def make_rng(name: str, seed: int = 0) -> np.random.Generator:
    return stream(seed, f"tests/{name}")
