import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from retina_bench.synthgen import SynthConfig, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six images per class written to disk with a manifest."""
    out = tmp_path_factory.mktemp("corpus")
    images, manifest = generate(SynthConfig(per_class=6, seed=11), out)
    return out, images, manifest


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
