import hypothesis
import numpy as np
import pytest

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("ci", max_examples=60, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_batch(rng, n=None, classes=None, low=-0.95, high=0.95):
    n = n if n is not None else int(rng.integers(2, 65))
    classes = classes if classes is not None else int(rng.integers(2, 101))
    logits = rng.uniform(low, high, size=(n, classes))
    labels = rng.integers(0, classes, size=n)
    return logits, labels


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
