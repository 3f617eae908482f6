import numpy as np
import pytest

from gcreg.volume import Geometry, Volume3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume3(Geometry(dims, spacing, origin), rng.normal(size=dims).astype(np.float32))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
