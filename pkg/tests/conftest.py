import os

import pytest
import torch
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=40)
settings.load_profile("pkg")

os.environ.pop("MAFS_SEED", None)


@pytest.fixture(autouse=True)
def _torch_state():
    torch.manual_seed(0)
    yield
