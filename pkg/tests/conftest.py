import numpy as np
import pytest

from abckit.codebook import assign_codewords
from abckit.dataset import MNIST_STYLE, generate_synthetic, normalize
from abckit.diffusion import TrainConfig, make_schedule
from abckit.ensemble import train_ensemble


def tiny_config(steps=40, seed=0):
    return TrainConfig(steps=steps, seed=seed, width=4, hidden=16, batch_size=8)


@pytest.fixture(scope="session")
def tiny_data():
    # 6 sources of 2 images each, 8x8
    return normalize(generate_synthetic(12, side=8, n_sources=6, seed=3), MNIST_STYLE)


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule(T_train=50, K=5)


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_data, tiny_schedule):
    cb = assign_codewords(tiny_data.n_sources, 4, 2, seed=1)
    return train_ensemble(tiny_data, cb, tiny_config(), tiny_schedule, threads=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


GATE_LINES = []


def gate(number, title, ok, detail=""):
    """Record one acceptance verdict line and fail the test if not ok."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    GATE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(GATE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
