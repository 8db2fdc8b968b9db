import numpy as np
import pytest
import torch

# single-threaded torch keeps every seeded run bit-for-bit reproducible
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
