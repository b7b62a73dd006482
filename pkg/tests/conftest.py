import numpy as np
import pytest

from penningmd.model import TrapConfig, be9


@pytest.fixture
def trap() -> TrapConfig:
    """Canonical working point: Be+ at 4.4588 T, f_z = 1.58 MHz,
    delta = 0.0036, wall rotation 530 kHz (beta very close to 1)."""
    return TrapConfig.from_frequencies(be9(), b_field=4.4588, f_z=1.58e6,
                                       delta=0.0036, f_rot=530e3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
