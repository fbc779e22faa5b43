import numpy as np
import pytest

from tokenmrf.types import GridGeometry, LogitField, MRFParams, VocabSpec


def random_instance(rng, h, w, v, weight_std, logit_std=1.0):
    geo, voc = GridGeometry(h, w), VocabSpec(v)
    n = geo.n
    params = MRFParams(rng.normal(0, weight_std, (n, n)), rng.normal(0, weight_std, (v, v)), geo, voc)
    logits = LogitField(geo, voc, rng.normal(0, logit_std, (n, v)))
    return params, logits


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
