import numpy as np
import pytest

from ssat_forge import tensor as T
from ssat_forge.ssat import DecoderConfig
from ssat_forge.vit import EncoderConfig


@pytest.fixture(autouse=True)
def _isolated_tape():
    T.reset_tape()
    with T.precision(64):
        yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(image_size=8, patch_size=4, channels=3, dim=8, depth=2, heads=2, num_classes=3)


@pytest.fixture
def tiny_decoder():
    return DecoderConfig(dim=8, depth=1, heads=2, mlp_ratio=2)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
