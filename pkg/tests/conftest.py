import numpy as np
import pytest
import torch

from d2m.core import ToySpec
from d2m.data import make_toy_dataset
from d2m.models import build_generator, generator_to_checkpoint
from d2m.core import fork_rng


@pytest.fixture(scope="session")
def small_toy():
    return make_toy_dataset(ToySpec(class_count=3, per_class=40, image_shape=(3, 16, 16), seed=3))


@pytest.fixture(scope="session")
def small_test():
    return make_toy_dataset(ToySpec(class_count=3, per_class=40, image_shape=(3, 16, 16), seed=3), "test", 30)


@pytest.fixture
def tiny_ckpt():
    def make(stage="pretrained", width=8, latent_dim=8, seed=0):
        gen = build_generator(latent_dim, 3, (3, 16, 16), fork_rng(seed, "tiny-gen"), width=width)
        return generator_to_checkpoint(gen, stage)
    return make


@pytest.fixture(autouse=True)
def _quiet_torch():
    torch.manual_seed(12345)
    np.seterr(all="ignore")
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
