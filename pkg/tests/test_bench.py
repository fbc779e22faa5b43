import json

import numpy as np
import pytest

from tiny import GEO, VOC, mrf, teacher
from tokenmrf.bench import (
    cooccurrence_distance,
    decode_variant,
    disagreement,
    markovgen_decode,
    run_benchmark,
)
from tokenmrf.types import MRFParams, TokenGrid, ValidationError, cosine_schedule

SCHED = cosine_schedule(16, 4, cut_step=2)


@pytest.fixture(scope="module")
def models():
    return teacher(), mrf()


def test_k_equal_total_is_full(models):
    t, m = models
    sched = SCHED.with_cut(4)
    full = decode_variant("full", t, None, 1, sched, 1.0, seed=9).grid
    assert markovgen_decode(t, m, 1, sched, seed=9, temperature=1.0) == full
    assert decode_variant("early-exit", t, None, 1, sched, 1.0, seed=9).grid == full


def test_zero_mrf_equals_early_exit_fill(models):
    # zero couplings leave softmax of the pinned unaries, whose argmax is the early-exit fill
    t, _ = models
    zero = MRFParams.zeros(GEO, VOC)
    for seed in range(5):
        a = markovgen_decode(t, zero, 1, SCHED, seed=seed, temperature=1.0)
        b = decode_variant("early-exit", t, None, 1, SCHED, 1.0, seed=seed).grid
        assert a == b


def test_committed_tokens_preserved(models):
    t, m = models
    # a hostile MRF that wants every site to be label 0
    wl = np.full((5, 5), -50.0)
    wl[:, 0] = 50.0
    hostile = m.replace(w_label=wl, w_spatial=np.ones((16, 16)))
    d = decode_variant("markovgen", t, hostile, 1, SCHED, 1.0, seed=4)
    labels, committed = d.trace.committed_through(2)
    np.testing.assert_array_equal(d.grid.labels[committed], labels[committed])


def test_markovgen_dimension_mismatch(models):
    t, _ = models
    from tokenmrf.types import GridGeometry

    with pytest.raises(ValidationError):
        markovgen_decode(t, MRFParams.zeros(GridGeometry(2, 2), VOC), 1, SCHED)


def test_metrics():
    a = TokenGrid(GEO, VOC, np.zeros(16, int))
    b = TokenGrid(GEO, VOC, np.r_[np.zeros(12, int), np.ones(4, int)])
    assert disagreement(a, b) == 0.25
    assert cooccurrence_distance([a], [a], 5) == 0.0
    assert 0 < cooccurrence_distance([a], [b], 5) <= 1


class TestReport:
    def test_full_only(self, models):
        t, _ = models
        rep = run_benchmark(t, None, [1, 1], SCHED, variants=["full"], repetitions=3, temperature=1.0)
        d = rep.to_dict()
        assert list(d["variants"]) == ["full"]
        assert "speedup_vs_full" not in d["variants"]["full"]
        assert d["variants"]["full"]["disagreement_vs_full"] == 0.0
        assert d["variants"]["full"]["decodes_timed"] == 4
        assert rep.failures == []

    def test_all_variants(self, models):
        t, m = models
        rep = run_benchmark(t, m, [1, 0, 1], SCHED, repetitions=3, temperature=1.0, seed=2)
        assert rep.failures == []
        d = json.loads(rep.to_json())
        assert set(d["variants"]) == {"full", "early-exit", "markovgen"}
        for name in ("early-exit", "markovgen"):
            assert d["variants"][name]["speedup_vs_full"] > 0
            assert 0 <= d["variants"][name]["disagreement_vs_full"] <= 1
        assert d["mrf_inference_ms"] > 0
        table = rep.to_table().splitlines()
        assert len(table) == 4 and table[0].split()[0] == "variant"

    def test_validation(self, models):
        t, m = models
        with pytest.raises(ValidationError):
            run_benchmark(t, m, [1], SCHED, repetitions=2)
        with pytest.raises(ValidationError):
            run_benchmark(t, m, [1], SCHED, variants=["turbo"])
