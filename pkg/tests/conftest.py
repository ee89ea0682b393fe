import numpy as np
import pytest

from seqdx import tensor as T
from seqdx.data import PatientRecord
from seqdx.model import ModelConfig, init_model


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(image_size=8, encoder_channels=[2, 3], fc_sizes=[6, 5], lstm_hidden=4, num_outputs=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    return init_model(tiny_config(**kw), seed)


def random_patients(rng, k, size=8, max_n=4, outputs=1):
    out = []
    for i in range(k):
        n = int(rng.integers(1, max_n + 1))
        out.append(PatientRecord(f"p{i:03d}", [], rng.integers(0, 2, outputs),
                                 images=[rng.random((size, size)) for _ in range(n)]))
    return out


# (criterion, verdict line) pairs filled in by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.line(line)
