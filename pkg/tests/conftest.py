import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cmr.assets import save_assets  # noqa: E402
from cmr.bodymodel import make_mini_model  # noqa: E402
from cmr.meshgraph import coarsen  # noqa: E402
from cmr import synth  # noqa: E402


@pytest.fixture(scope="session")
def body():
    return make_mini_model(seed=0)


@pytest.fixture(scope="session")
def pair(body):
    return coarsen(body.template, 4)


@pytest.fixture(scope="session")
def model_file(body, pair, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "body.cmrk"
    save_assets(path, body, pair)
    return path


@pytest.fixture(scope="session")
def small_dataset(body, model_file, tmp_path_factory):
    """20 samples: 16 train (8 weak), 4 val."""
    out = tmp_path_factory.mktemp("data")
    synth.generate_dataset(body, 20, 3, 0.4, out, model_file)
    return out / "manifest.txt"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
