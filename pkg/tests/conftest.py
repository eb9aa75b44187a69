import json

import numpy as np
import pytest

from desknas.space import default_space, load_space

TINY = {
    "resolutions": [6, 8], "stem_widths": [2, 3], "head_widths": [3, 4], "n_classes": 3,
    "stages": [
        {"widths": [2, 3], "depths": [1, 2], "kernels": [1, 3], "expands": [1, 2],
         "use_se": False, "stride": 1},
        {"widths": [3, 4], "depths": [1, 2], "kernels": [3, 5], "expands": [2],
         "use_se": True, "stride": 2},
    ],
}


@pytest.fixture(scope="session")
def tiny_spec():
    return load_space(json.dumps(TINY))


@pytest.fixture(scope="session")
def desk_spec():
    return default_space()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
