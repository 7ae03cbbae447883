import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tokenizer():
    from peftreview.tasks import bundled_corpus
    from peftreview.tokenizer import Tokenizer

    return Tokenizer.train(bundled_corpus(), 512)


@pytest.fixture(scope="session")
def base_weights():
    from peftreview.model import ModelConfig, init_weights

    return init_weights(ModelConfig(), seed=0)


# --- acceptance summary -------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one of the ten acceptance criteria")


def _criterion(nodeid):
    name = nodeid.split("::")[-1]
    if "test_acceptance.py" not in nodeid or not name.startswith("test_c"):
        return None
    number = int(name[6:8])
    title = name[9:].split("[")[0].replace("_", " ")
    return number, title


def pytest_runtest_logreport(report):
    key = _criterion(report.nodeid)
    if key is None:
        return
    ok, secs = _CRITERIA.get(key, (True, 0.0))
    if report.when == "call" or report.failed:
        ok = ok and report.passed
        secs += report.duration
    _CRITERIA[key] = (ok, secs)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (ok, secs) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {number:2d} {title:<28} {'PASS' if ok else 'FAIL'}  ({secs:.1f} s)")
