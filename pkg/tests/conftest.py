import numpy as np
import pytest

from pfan.config import TrainConfig
from pfan.data import SynthSpec, in_memory_synthetic

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")


TINY = dict(grid_k=4, top_l=3, visual_dim=16, word_dim=6, block_dim=4, joint_dim=8, batch_size=4,
            precision="double", synthetic=dict(n_pairs=4, n_regions=3, n_tokens=4, dim=16))

OVERFIT = dict(grid_k=4, top_l=3, visual_dim=16, word_dim=32, block_dim=16, joint_dim=64, batch_size=32,
               epochs=500, early_stop=True, precision="double", margin=0.2, lr=5e-4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY)


@pytest.fixture
def tiny_data():
    return in_memory_synthetic(SynthSpec(**TINY["synthetic"]))


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of scalar f at numpy array x (x is perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g
