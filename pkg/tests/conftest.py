import numpy as np
import pytest
import torch
from hypothesis import settings

from vcam.data import DatasetConfig, generate_dataset, load_splits

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TINY = DatasetConfig(num_train_ids=8, num_test_ids=4, images_per_id=8, num_cameras=2, track_length=2,
                     image_size=32, seed=3)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(TINY, root)
    return root


@pytest.fixture(scope="session")
def tiny_splits(tiny_root):
    return load_splits(tiny_root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
