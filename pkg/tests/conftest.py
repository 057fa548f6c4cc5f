import numpy as np
import pytest
import torch

from usod.config import tiny_profile
from usod.synthetic import make_synthetic_dataset


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_synthetic_dataset(root, "MSRA-B", 8, height=60, width=72, seed=1, splits={"train": 4, "val": 2, "test": 2})
    make_synthetic_dataset(root, "ECSSD", 3, height=50, width=64, seed=2)
    return root


@pytest.fixture
def small_cfg(data_root, tmp_path):
    """resnet18 at 64 px on six images: fast enough for pipeline-level tests."""
    return tiny_profile(workdir=str(tmp_path / "run"), data_root=str(data_root), backbone_arch="resnet18",
                        image_size=64, batch_size=3, max_images=0, median_kernel=3,
                        **{"stage1.epochs": 1, "stage2.epochs": 1})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield
