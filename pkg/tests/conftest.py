import numpy as np
import pytest

from poemgan import corpus as C


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_poems():
    return [
        C.Poem("a", ["the moon sleeps", "over the river", "silver and slow"]),
        C.Poem("b", ["a lantern burns", "by the shore", "the night is long", "the river turns"]),
        C.Poem("c", ["willow and stone", "the sparrow sings", "morning again"]),
    ]


@pytest.fixture
def small_vocab(small_poems):
    return C.build_vocabulary(small_poems)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
