import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twelve synthetic utterances split 10/1/1."""
    from deepgesi.labels import synth_dataset

    return synth_dataset(12, 5, tmp_path_factory.mktemp("small"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, title, status, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        tr.write_line(f"[{status:<4}] {num:>2}. {title}" + (f": {detail}" if detail else ""))
