import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax as scipy_softmax

from conftest import random_instance
from tokenmrf import oracle
from tokenmrf.mrf import (
    energy,
    log_unnormalized_prob,
    map_decode,
    mean_field_infer,
    variational_free_energy,
)
from tokenmrf.types import (
    GridGeometry,
    LogitField,
    MarginalField,
    MRFParams,
    TokenGrid,
    ValidationError,
    VocabSpec,
    validate,
)

G12, V2 = GridGeometry(1, 2), VocabSpec(2)


def two_site():
    params = MRFParams([[0, 1], [1, 0]], np.eye(2), G12, V2)
    logits = LogitField(G12, V2, [[1, 0], [0, 1]])
    return params, logits


class TestEnergy:
    def test_all_zero(self, rng):
        geo, voc = GridGeometry(2, 3), VocabSpec(4)
        x = TokenGrid(geo, voc, rng.integers(0, 4, 6))
        assert energy(MRFParams.zeros(geo, voc), LogitField(geo, voc, np.zeros((6, 4))), x) == 0.0

    def test_hand_value_different_labels(self):
        params, logits = two_site()
        assert energy(params, logits, TokenGrid(G12, V2, [0, 1])) == -2.0

    def test_hand_value_same_labels(self):
        params, logits = two_site()
        # unary -(1+0); ordered pairs (1,2) and (2,1) each contribute -1
        assert energy(params, logits, TokenGrid(G12, V2, [0, 0])) == -3.0

    def test_self_pair_counted(self):
        params = MRFParams([[2.0]], [[0.5, 0], [0, 0]], GridGeometry(1, 1), V2)
        logits = LogitField(GridGeometry(1, 1), V2, [[0.0, 0.0]])
        assert energy(params, logits, TokenGrid(GridGeometry(1, 1), V2, [0])) == -1.0

    def test_matches_explicit_double_sum(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 0.5)
        x = rng.integers(0, 3, 4)
        e = 0.0
        for i in range(4):
            e -= logits.values[i, x[i]]
            for j in range(4):
                e -= params.w_label[x[i], x[j]] * params.w_spatial[i, j]
        assert energy(params, logits, TokenGrid(params.geometry, params.vocab, x)) == pytest.approx(e, abs=1e-12)

    def test_shape_mismatch(self):
        params, logits = two_site()
        with pytest.raises(ValidationError, match="dimension mismatch"):
            energy(params, logits, TokenGrid(GridGeometry(2, 1), V2, [0, 1]))


class TestLogUnnormalizedProb:
    def test_zero_is_uniform(self):
        geo, voc = GridGeometry(1, 2), VocabSpec(3)
        p, f = MRFParams.zeros(geo, voc), LogitField(geo, voc, np.zeros((2, 3)))
        for x in itertools.product(range(3), repeat=2):
            assert log_unnormalized_prob(p, f, TokenGrid(geo, voc, x)) == 0.0

    def test_negated_energy(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 0.3)
        x = TokenGrid(params.geometry, params.vocab, [2, 0, 1, 1])
        assert log_unnormalized_prob(params, logits, x) == -energy(params, logits, x)

    def test_normalizes_with_oracle(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 0.3)
        log_z = oracle.enumerate_partition(params, logits)
        total = sum(
            np.exp(log_unnormalized_prob(params, logits, TokenGrid(params.geometry, params.vocab, x)) - log_z)
            for x in itertools.product(range(3), repeat=4)
        )
        assert total == pytest.approx(1.0, abs=1e-9)


def reference_mean_field(ws, wc, f, iters):
    """Loop-level transcription of the update, for cross-checking the vectorized one."""
    n, v = f.shape
    q = scipy_softmax(f, axis=1)
    for _ in range(iters):
        a = np.array([[sum(ws[i, j] * q[j, k] for j in range(n)) for k in range(v)] for i in range(n)])
        b = np.array([[sum(wc[k, kk] * a[i, kk] for kk in range(v)) for k in range(v)] for i in range(n)])
        q = scipy_softmax(b + f, axis=1)
    return q


class TestMeanField:
    def test_zero_weights_fixed_point(self, rng):
        geo, voc = GridGeometry(2, 3), VocabSpec(5)
        f = LogitField(geo, voc, rng.normal(0, 3, (6, 5)))
        for t in (0, 1, 7):
            q = mean_field_infer(MRFParams.zeros(geo, voc), f, t)
            np.testing.assert_allclose(q.values, scipy_softmax(f.values, axis=1), atol=1e-12)

    def test_zero_iterations_is_softmax(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 1.0)
        np.testing.assert_allclose(
            mean_field_infer(params, logits, 0).values, scipy_softmax(logits.values, axis=1), atol=1e-15
        )

    def test_matches_loop_transcription(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 0.7)
        q = mean_field_infer(params, logits, 3)
        ref = reference_mean_field(params.w_spatial, params.w_label, logits.values, 3)
        np.testing.assert_allclose(q.values, ref, atol=1e-12)

    def test_paper_base_shape(self, rng):
        geo, voc = GridGeometry(16, 16), VocabSpec(8192)
        # dense 8192 x 8192 label matrix is 512 MiB in float64; one iteration keeps this quick
        ws = rng.normal(0, 0.01, (256, 256))
        wl = np.zeros((8192, 8192), dtype=np.float64)
        params = MRFParams(ws, wl, geo, voc)
        logits = LogitField(geo, voc, rng.normal(0, 1, (256, 8192)))
        q = mean_field_infer(params, logits, 1)
        assert q.values.shape == (256, 8192)
        np.testing.assert_allclose(q.values.sum(axis=1), 1.0, atol=1e-6)

    def test_weak_coupling_near_exact(self, rng):
        params, logits = random_instance(rng, 2, 2, 3, 0.01)
        q = mean_field_infer(params, logits, 10)
        exact = oracle.exact_marginals(params, logits)
        assert np.max(np.abs(q.values - exact.values)) <= 0.05

    def test_negative_iterations(self, rng):
        params, logits = random_instance(rng, 1, 2, 2, 0.1)
        with pytest.raises(ValidationError):
            mean_field_infer(params, logits, -1)

    def test_divergence_surfaces(self):
        geo, voc = GridGeometry(1, 2), VocabSpec(2)
        params = MRFParams(np.full((2, 2), 1e308), np.full((2, 2), 1e308), geo, voc)
        with pytest.raises(FloatingPointError):
            mean_field_infer(params, LogitField(geo, voc, np.zeros((2, 2))), 2)

    def test_float32_path_close(self, rng):
        params, logits = random_instance(rng, 4, 4, 16, 0.2, logit_std=3.0)
        q64 = mean_field_infer(params, logits, 5).values
        q32 = mean_field_infer(params, logits, 5, dtype=np.float32)
        assert q32.values.dtype == np.float64
        np.testing.assert_allclose(q32.values, q64, atol=1e-5)
        np.testing.assert_allclose(q32.values.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self, rng):
        params, logits = random_instance(rng, 3, 3, 4, 0.5)
        a = mean_field_infer(params, logits, 5).values
        b = mean_field_infer(params, logits, 5).values
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0), st.integers(0, 6))
    def test_rows_normalized(self, seed, scale, iters):
        rng = np.random.default_rng(seed)
        params, logits = random_instance(rng, 2, 3, 4, scale, logit_std=5.0)
        q = mean_field_infer(params, logits, iters)
        validate(q)
        np.testing.assert_allclose(q.values.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_label_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        params, logits = random_instance(rng, 2, 2, 4, 0.8)
        perm = rng.permutation(4)
        p2 = params.replace(w_label=params.w_label[np.ix_(perm, perm)])
        f2 = LogitField(logits.geometry, logits.vocab, logits.values[:, perm])
        q = mean_field_infer(params, logits, 4).values
        q2 = mean_field_infer(p2, f2, 4).values
        np.testing.assert_allclose(q2, q[:, perm], rtol=0, atol=1e-14)


class TestMapDecode:
    def test_uniform_ties_to_zero(self):
        q = MarginalField(GridGeometry(2, 2), VocabSpec(3), np.full((4, 3), 1 / 3))
        assert np.array_equal(map_decode(q).labels, [0, 0, 0, 0])

    def test_one_hot(self):
        hot = [2, 0, 1, 2]
        q = MarginalField(GridGeometry(2, 2), VocabSpec(3), np.eye(3)[hot])
        assert np.array_equal(map_decode(q).labels, hot)

    def test_strong_unaries_match_exact_map(self, rng):
        geo, voc = GridGeometry(2, 2), VocabSpec(3)
        f = rng.normal(0, 1, (4, 3))
        f[np.arange(4), rng.integers(0, 3, 4)] += 5.0
        params = MRFParams(rng.normal(0, 0.01, (4, 4)), rng.normal(0, 0.01, (3, 3)), geo, voc)
        logits = LogitField(geo, voc, f)
        assert map_decode(mean_field_infer(params, logits, 10)) == oracle.exact_map(params, logits)


class TestFreeEnergy:
    def test_uniform_single_site(self):
        geo, voc = GridGeometry(1, 1), VocabSpec(4)
        q = MarginalField(geo, voc, np.full((1, 4), 0.25))
        val = variational_free_energy(MRFParams.zeros(geo, voc), LogitField(geo, voc, np.zeros((1, 4))), q)
        assert val == pytest.approx(-1.386294, abs=1e-6)

    def test_one_hot_zero_params(self, rng):
        geo, voc = GridGeometry(2, 2), VocabSpec(3)
        f = rng.normal(size=(4, 3))
        x = np.array([1, 2, 0, 1])
        q = MarginalField(geo, voc, np.eye(3)[x])
        val = variational_free_energy(MRFParams.zeros(geo, voc), LogitField(geo, voc, f), q)
        assert val == pytest.approx(-f[np.arange(4), x].sum(), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_one_hot_equals_energy(self, seed):
        rng = np.random.default_rng(seed)
        params, logits = random_instance(rng, 2, 3, 3, 1.0)
        x = rng.integers(0, 3, 6)
        q = MarginalField(params.geometry, params.vocab, np.eye(3)[x])
        grid = TokenGrid(params.geometry, params.vocab, x)
        assert variational_free_energy(params, logits, q) == pytest.approx(energy(params, logits, grid), abs=1e-12)

    def test_upper_bounds_neg_log_z_for_exact_energy_terms(self, rng):
        # with a zero self-coupling diagonal the surrogate is exactly E_Q[E] - H(Q) >= -log Z
        params, logits = random_instance(rng, 2, 2, 3, 0.3)
        ws = np.array(params.w_spatial)
        np.fill_diagonal(ws, 0.0)
        params = params.replace(w_spatial=ws)
        log_z = oracle.enumerate_partition(params, logits)
        for iters in (0, 3, 10):
            q = mean_field_infer(params, logits, iters)
            assert variational_free_energy(params, logits, q) >= -log_z - 1e-12
