import pytest
import torch

from dgtts.numerics import set_deterministic
from dgtts.synthdata import CorpusSpec, generate_corpus

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _deterministic():
    set_deterministic(0)
    yield
    torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus(CorpusSpec(n_speakers=2, n_utterances=12, min_frames=12, max_frames=24, seed=3))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
