import numpy as np
import pytest

from arrestlab import data, models
from arrestlab.models import ArchitectureSpec, Layer


def tiny_cnn(act: str = "tanh") -> ArchitectureSpec:
    return ArchitectureSpec(
        "tiny-cnn",
        (Layer("conv", 2, 3, 1, 1), Layer(act), Layer("conv", 3, 3, 2, 1), Layer(act),
         Layer("gap"), Layer("fc")),
        representation_tap=5, spatial_tap=4)


def tiny_mlp(act: str = "tanh") -> ArchitectureSpec:
    return ArchitectureSpec(
        "tiny-mlp",
        (Layer("flatten"), Layer("fc", 6), Layer(act), Layer("fc", 5), Layer(act), Layer("fc")),
        representation_tap=5)


@pytest.fixture(scope="session")
def digits():
    return data.load_digits()


@pytest.fixture(scope="session")
def digits_split(digits):
    return data.split(digits, 100, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_batch(rng):
    return rng.uniform(0, 1, size=(4, 1, 8, 8)), rng.integers(0, 10, size=4)


@pytest.fixture
def cnn():
    return models.build("small-cnn", seed=0, num_classes=10, input_shape=(1, 8, 8))


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    titles = {n: t for n, t, _ in acceptance.CRITERIA}
    for number in sorted(acceptance.RESULTS):
        ok, detail = acceptance.RESULTS[number]
        terminalreporter.write_line(
            f"criterion {number} {'PASS' if ok else 'FAIL'}: {titles[number]} | {detail}")
