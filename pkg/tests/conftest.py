import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dfsmc import synth

settings.register_profile("dfsmc", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dfsmc")

ORACLE_FILE = Path(__file__).with_name("oracle_values.json")


@pytest.fixture(scope="session")
def oracle():
    return json.loads(ORACLE_FILE.read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def texture_tree(tmp_path):
    """3 families x 6 images of 16x16 under tmp_path/data."""
    names = list(synth.TEXTURE_FAMILIES[:3])
    images, labels = synth.texture_dataset(6, 16, seed=3, families=names)
    return synth.write_family_tree(tmp_path / "data", images, labels, names)


@pytest.fixture(scope="session")
def acceptance_log(request):
    log = getattr(request.config, "_dfsmc_acceptance", None)
    if log is None:
        log = request.config._dfsmc_acceptance = []
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_dfsmc_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
