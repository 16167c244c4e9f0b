import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdslab.data import enumerate_pairs
from gdslab.gradcheck import numeric_grad, relative_error
from gdslab.losses import (
    DegenerateBatchError,
    LossConfig,
    cross_entropy,
    gds_h_loss,
    gds_loss,
    hard_mining_loss,
    pair_distance,
    softplus,
    triplet_batch_hard,
)
from gdslab.stats import GaussianStats

LN2 = math.log(2.0)


def stats(mean, var, beta=0.99):
    return GaussianStats(mean, var, beta)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestSoftplus:
    def test_zero(self):
        assert softplus(0.0) == pytest.approx(LN2, abs=1e-12)

    def test_large_positive_no_overflow(self):
        assert softplus(50.0) == pytest.approx(50.0, abs=1e-12)
        assert math.isfinite(softplus(1e4))

    def test_large_negative_matches_high_precision(self):
        getcontext().prec = 50
        ref = float((Decimal(1) + Decimal(-50).exp()).ln())
        got = softplus(-50.0)
        assert got > 0
        assert got == pytest.approx(ref, rel=1e-12)
        assert got == pytest.approx(1.93e-22, rel=1e-2)

    @given(st.floats(-700, 700, allow_nan=False))
    def test_excess_over_relu_bounded(self, x):
        excess = softplus(x) - max(x, 0.0)
        assert excess <= LN2 + 1e-15
        if abs(x) < 30:
            assert excess > 0


class TestPairDistance:
    def test_identical(self):
        v = np.array([0.6, 0.8])
        assert pair_distance(v, v) == 0.0

    def test_antipodal(self):
        v = np.array([0.0, 1.0, 0.0])
        assert pair_distance(v, -v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert pair_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = unit_rows(rng, 2, 5)
        assert pair_distance(a, b) == pair_distance(b, a)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="unit"):
            pair_distance([1.0, 1.0], [1.0, 0.0])


class TestClosedForms:
    def test_gds_zero_gap_zero_variance(self):
        assert gds_loss(stats(0.5, 0.0), stats(0.5, 0.0), LossConfig()) == pytest.approx(LN2, abs=1e-12)

    def test_gds_direct_arithmetic(self):
        got = gds_loss(stats(0.2, 0.0), stats(0.8, 0.0), LossConfig())
        assert got == pytest.approx(math.log1p(math.exp(-0.6)), abs=1e-12)
        assert round(got, 4) == 0.4375

    def test_gds_lambda_sigma_zero_ignores_variance(self):
        cfg = LossConfig(lambda_sigma=0.0)
        a = gds_loss(stats(0.3, 0.0), stats(0.6, 0.0), cfg)
        b = gds_loss(stats(0.3, 0.04), stats(0.6, 0.09), cfg)
        assert a == b

    def test_hard_zero_margin_tails(self):
        # exactly representable so the tails meet bit-exactly
        pos, neg = stats(0.25, 0.0625 ** 2), stats(0.625, 0.0625 ** 2)
        assert pos.mean + 3 * pos.std == neg.mean - 3 * neg.std
        assert hard_mining_loss(pos, neg, LossConfig()) == pytest.approx(LN2, abs=1e-12)

    def test_hard_degenerate_variance_is_mean_gap(self):
        pos, neg = stats(0.3, 0.0), stats(0.55, 0.0)
        assert hard_mining_loss(pos, neg, LossConfig()) == pytest.approx(softplus(0.3 - 0.55), abs=1e-12)

    def test_hard_direct_arithmetic(self):
        got = hard_mining_loss(stats(0.3, 0.05 ** 2), stats(0.7, 0.05 ** 2), LossConfig(kappa=3.0))
        assert got == pytest.approx(math.log1p(math.exp(-0.1)), abs=1e-12)
        assert round(got, 4) == 0.6444

    def test_config_defaults_and_validation(self):
        cfg = LossConfig()
        assert (cfg.lambda_h, cfg.lambda_sigma, cfg.kappa) == (0.5, 1.0, 3.0)
        with pytest.raises(ValueError):
            LossConfig(lambda_h=-1)
        with pytest.raises(ValueError):
            LossConfig(kappa=0.0)
        with pytest.raises(ValueError):
            LossConfig(lambda_sigma=float("inf"))


class TestMonotonicity:
    @given(st.floats(0.0, 0.4), st.floats(0.01, 0.3), st.floats(0.0, 0.05), st.floats(0.0, 0.05))
    def test_larger_gap_lowers_gds(self, mu_pos, widen, v1, v2):
        cfg = LossConfig()
        near = gds_loss(stats(mu_pos, v1), stats(mu_pos + 0.1, v2), cfg)
        far = gds_loss(stats(mu_pos, v1), stats(mu_pos + 0.1 + widen, v2), cfg)
        assert far < near

    @given(st.floats(0.001, 0.05), st.floats(0.1, 0.9))
    def test_smaller_variance_lowers_both(self, var, shrink):
        cfg = LossConfig()
        pos, neg = stats(0.3, var), stats(0.7, var)
        for smaller in ((stats(0.3, var * shrink), neg), (pos, stats(0.7, var * shrink))):
            assert gds_loss(*smaller, cfg) < gds_loss(pos, neg, cfg)
            assert hard_mining_loss(*smaller, cfg) < hard_mining_loss(pos, neg, cfg)


def _batch(seed, n=16, d=8, k=4):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(n // k), k))
    return rng, unit_rows(rng, n, d), labels


class TestGdsH:
    def test_value_is_gds_plus_weighted_hard(self):
        rng, x, y = _batch(1)
        pos_pairs, neg_pairs = enumerate_pairs(y)
        cfg = LossConfig(lambda_h=0.7)
        out, new_pos, new_neg = gds_h_loss(x, pos_pairs, neg_pairs, stats(0.5, 1 / 6), stats(0.5, 1 / 6), cfg)
        expected = gds_loss(new_pos, new_neg, cfg) + 0.7 * hard_mining_loss(new_pos, new_neg, cfg)
        assert out.value == pytest.approx(expected, abs=1e-14)
        assert new_pos.count_seen == 1 and new_neg.count_seen == 1

    def test_plain_gds_mode(self):
        rng, x, y = _batch(2)
        pp, nn = enumerate_pairs(y)
        cfg = LossConfig()
        out, p, n = gds_h_loss(x, pp, nn, stats(0.4, 0.02), stats(0.6, 0.02), cfg, hard_mining=False)
        assert out.value == pytest.approx(gds_loss(p, n, cfg), abs=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("hard", [True, False])
    def test_matches_finite_differences(self, seed, hard):
        rng, x, y = _batch(seed)
        pp, nn = enumerate_pairs(y)
        pos, neg = stats(0.3, 0.02, 0.9), stats(0.7, 0.03, 0.9)
        cfg = LossConfig(0.5, 1.0, 3.0)
        out, _, _ = gds_h_loss(x, pp, nn, pos, neg, cfg, hard_mining=hard)
        num = numeric_grad(lambda: gds_h_loss(x, pp, nn, pos, neg, cfg, hard_mining=hard)[0].value, x)
        assert relative_error(out.grad, num)[0] < 1e-5

    def test_beta_to_one_kills_gradient(self):
        rng, x, y = _batch(3)
        pp, nn = enumerate_pairs(y)
        norms = []
        for beta in (0.9, 0.99, 0.999, 0.9999):
            out, _, _ = gds_h_loss(x, pp, nn, stats(0.3, 0.02, beta), stats(0.7, 0.02, beta), LossConfig())
            norms.append(np.abs(out.grad).max())
        assert all(b < a for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-2 * norms[0]

    def test_symmetric_mean_gap_gradients_cancel(self):
        # sample 0 has its positive partner (1) and negative partner (2) at the
        # same location, so both pair distances and both stats coincide
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        pp = np.array([[0, 1]])
        nn = np.array([[0, 2]])
        same = stats(0.5, 0.01, 0.9)
        cfg = LossConfig(lambda_h=0.0, lambda_sigma=0.0)
        out, p, n = gds_h_loss(x, pp, nn, same, same, cfg)
        assert p.mean == n.mean
        num = numeric_grad(lambda: gds_h_loss(x, pp, nn, same, same, cfg)[0].value, x)
        np.testing.assert_allclose(out.grad, num, atol=1e-9)
        np.testing.assert_allclose(out.grad[0], 0.0, atol=1e-15)
        np.testing.assert_allclose(out.grad[1], -out.grad[2], atol=1e-15)
        assert np.abs(out.grad[1]).sum() > 0

    def test_permuting_pairs_keeps_value(self):
        rng, x, y = _batch(4)
        pp, nn = enumerate_pairs(y)
        a = gds_h_loss(x, pp, nn, stats(0.5, 1 / 6), stats(0.5, 1 / 6), LossConfig())[0]
        b = gds_h_loss(x, pp[rng.permutation(len(pp))], nn[rng.permutation(len(nn))],
                       stats(0.5, 1 / 6), stats(0.5, 1 / 6), LossConfig())[0]
        assert a.value == pytest.approx(b.value, abs=1e-14)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-14)

    def test_degenerate_batch(self):
        x = unit_rows(np.random.default_rng(0), 4, 3)
        with pytest.raises(DegenerateBatchError, match="degenerate"):
            gds_h_loss(x, np.zeros((0, 2), int), [[0, 1]], stats(0.5, 0.1), stats(0.5, 0.1), LossConfig())
        with pytest.raises(DegenerateBatchError):
            gds_h_loss(x, [[0, 1]], [], stats(0.5, 0.1), stats(0.5, 0.1), LossConfig())

    def test_coincident_points_have_zero_distance_gradient(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        out, _, _ = gds_h_loss(x, [[0, 1]], [[0, 2], [1, 2]], stats(0.3, 0.01), stats(0.7, 0.01), LossConfig())
        assert np.all(np.isfinite(out.grad))


class TestTriplet:
    def test_collapsed_positives(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        out = triplet_batch_hard(x, [0, 0, 1, 1])
        assert out.value == pytest.approx(softplus(-1.0), abs=1e-12)

    def test_unit_circle_finite_differences(self):
        ang = np.array([0.0, 0.4, 2.0, 2.7])
        x = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        y = np.array([0, 0, 1, 1])
        out = triplet_batch_hard(x, y)
        num = numeric_grad(lambda: triplet_batch_hard(x, y).value, x)
        assert relative_error(out.grad, num)[0] < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_random_finite_differences(self, seed):
        _, x, y = _batch(seed)
        out = triplet_batch_hard(x, y)
        num = numeric_grad(lambda: triplet_batch_hard(x, y).value, x)
        assert relative_error(out.grad, num)[0] < 1e-5

    def test_permutation_invariant_value(self):
        rng, x, y = _batch(7)
        perm = rng.permutation(len(y))
        assert triplet_batch_hard(x, y).value == pytest.approx(triplet_batch_hard(x[perm], y[perm]).value, abs=1e-14)

    def test_tie_breaks_to_lowest_index(self):
        # anchor 0 sees negatives 2 and 3 at exactly equal distance; only 2 is mined
        x = np.array([[1.0, 0.0], [np.cos(0.3), np.sin(0.3)], [0.0, 1.0], [0.0, -1.0]])
        dist = 0.5 * np.linalg.norm(x[0] - x[2]), 0.5 * np.linalg.norm(x[0] - x[3])
        assert dist[0] == dist[1]
        out = triplet_batch_hard(x, [0, 0, 1, 2])
        np.testing.assert_array_equal(out.grad[3], 0.0)
        assert np.abs(out.grad[2]).sum() > 0

    def test_single_identity_rejected(self):
        with pytest.raises(ValueError, match="two identities"):
            triplet_batch_hard(np.eye(3), [1, 1, 1])


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros(7), 3).value == pytest.approx(math.log(7), abs=1e-12)

    def test_dominant_logit(self):
        z = np.array([0.0, 60.0, 0.0])
        assert cross_entropy(z, 1).value < 1e-20

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.array([0.1, -0.4, 2.0])
        p = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(cross_entropy(z, 2).grad, p - np.eye(3)[2], atol=1e-15)

    def test_finite_differences_c5(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(5)
        out = cross_entropy(z, 2)
        num = numeric_grad(lambda: cross_entropy(z, 2).value, z)
        assert relative_error(out.grad, num)[0] < 1e-6

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros(3), 3)
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), [0, -1])
