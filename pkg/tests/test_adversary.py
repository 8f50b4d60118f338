import math

import numpy as np
import pytest

from ma3 import adversary as adv
from ma3.geometry import identity_reg_loss
from ma3.nn import AdversaryNet


def default_bounds(H=21, W=21):
    return adv.AdversaryBounds.for_image(H, W)


class TestBounds:
    def test_defaults(self):
        b = default_bounds()
        assert b.theta0 == pytest.approx(math.pi)
        assert b.eps_s == pytest.approx(0.1)
        assert b.T == pytest.approx(2.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            adv.AdversaryBounds(theta0=-1.0)

    def test_zero_allowed_for_degenerate_runs(self):
        b = adv.AdversaryBounds(theta0=0.0, eps_s=0.0, T=0.0)
        params, _ = adv.bound_raw(np.array([[5.0, -3.0, 2.0, 1.0]]), b)
        np.testing.assert_array_equal(params, [[0.0, 1.0, 0.0, 0.0]])


class TestPredictParams:
    def test_zero_raw_is_identity_params(self):
        params, _ = adv.bound_raw(np.zeros((1, 4)), default_bounds())
        np.testing.assert_array_equal(params, [[0.0, 1.0, 0.0, 0.0]])

    def test_saturated_raw_hits_bounds(self):
        b = default_bounds()
        params, _ = adv.bound_raw(np.full((1, 4), 1e6), b)
        theta, s, px, py = params[0]
        assert theta == pytest.approx(b.theta0) and abs(theta) <= b.theta0
        assert s == pytest.approx(1.0 + b.eps_s) and abs(s - 1.0) <= b.eps_s
        assert px == pytest.approx(b.T) and abs(px) <= b.T
        assert py == pytest.approx(b.T) and abs(py) <= b.T

    def test_random_raws_always_in_bounds(self):
        b = default_bounds()
        raw = np.random.default_rng(0).normal(0.0, 50.0, size=(10_000, 4))
        params, _ = adv.bound_raw(raw, b)
        assert np.all(np.abs(params[:, 0]) <= b.theta0)
        assert np.all(np.abs(params[:, 1] - 1.0) <= b.eps_s)
        assert np.all(np.abs(params[:, 2:]) <= b.T)

    def test_net_prediction_within_bounds(self):
        net = AdversaryNet((16, 16), rng=np.random.default_rng(1))
        b = adv.AdversaryBounds.for_image(16, 16)
        p = adv.predict_params(net, np.random.default_rng(2).random((16, 16)), b)
        assert p.within(b)

    def test_bound_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(0.0, 1.5, size=(3, 4))
        b = default_bounds()
        _, cache = adv.bound_raw(raw, b)
        proj = rng.standard_normal((3, 4))
        draw = adv.bound_raw_backward(proj, cache)
        h = 1e-6
        for off in range(raw.size):
            orig = raw.flat[off]
            raw.flat[off] = orig + h
            lp = float(np.sum(adv.bound_raw(raw, b)[0] * proj))
            raw.flat[off] = orig - h
            lm = float(np.sum(adv.bound_raw(raw, b)[0] * proj))
            raw.flat[off] = orig
            num = (lp - lm) / (2 * h)
            assert abs(draw.flat[off] - num) / max(abs(num), 1e-6) <= 1e-4


class TestParamsToAffine:
    def test_identity_params(self):
        A = adv.params_to_affine(adv.AugmentParams(0.0, 1.0, 0.0, 0.0), 21, 21)
        np.testing.assert_array_equal(A, np.eye(2, 3))

    def test_quarter_rotation(self):
        A = adv.params_to_affine(adv.AugmentParams(math.pi / 2, 1.0, 0.0, 0.0), 21, 21)
        np.testing.assert_allclose(A, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]], atol=1e-15)

    def test_pixel_to_normalized_translation(self):
        A = adv.params_to_affine(adv.AugmentParams(0.0, 1.1, 2.0, -2.0), 21, 21)
        np.testing.assert_allclose(A, [[1.1, 0.0, 0.2], [0.0, 1.1, -0.2]], atol=1e-12)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        params = np.column_stack([
            rng.uniform(-3.0, 3.0, 5),
            rng.uniform(0.9, 1.1, 5),
            rng.uniform(-2.0, 2.0, 5),
            rng.uniform(-2.0, 2.0, 5),
        ])
        proj = rng.standard_normal((5, 2, 3))
        _, cache = adv.params_to_affine_batch(params, 21, 21)
        dparams = adv.params_to_affine_backward(proj, cache)
        h = 1e-6
        for off in range(params.size):
            orig = params.flat[off]
            params.flat[off] = orig + h
            lp = float(np.sum(adv.params_to_affine_batch(params, 21, 21)[0] * proj))
            params.flat[off] = orig - h
            lm = float(np.sum(adv.params_to_affine_batch(params, 21, 21)[0] * proj))
            params.flat[off] = orig
            num = (lp - lm) / (2 * h)
            assert abs(dparams.flat[off] - num) / max(abs(num), 1e-6) <= 1e-4

    def test_delta_form_bounded_near_identity(self):
        raw = np.random.default_rng(5).normal(0.0, 10.0, size=(100, 6))
        A, _ = adv.deltas_to_affine_batch(raw, delta_max=0.2)
        deltas = A - np.eye(2, 3)
        assert np.abs(deltas).max() <= 0.2 + 1e-12

    def test_delta_form_backward_matches_fd(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(0.0, 1.0, size=(3, 6))
        proj = rng.standard_normal((3, 2, 3))
        _, cache = adv.deltas_to_affine_batch(raw, 0.2)
        draw = adv.deltas_to_affine_backward(proj, cache)
        h = 1e-6
        for off in range(raw.size):
            orig = raw.flat[off]
            raw.flat[off] = orig + h
            lp = float(np.sum(adv.deltas_to_affine_batch(raw, 0.2)[0] * proj))
            raw.flat[off] = orig - h
            lm = float(np.sum(adv.deltas_to_affine_batch(raw, 0.2)[0] * proj))
            raw.flat[off] = orig
            num = (lp - lm) / (2 * h)
            assert abs(draw.flat[off] - num) / max(abs(num), 1e-6) <= 1e-4


class TestStnDropout:
    def _random_matrices(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return np.eye(2, 3) + rng.uniform(-0.3, 0.3, size=(n, 2, 3))

    def test_rate_one_all_identity(self):
        mats = self._random_matrices(20)
        out, dropped = adv.stn_dropout(mats, 1.0, np.random.default_rng(1))
        assert dropped.all()
        np.testing.assert_array_equal(out, np.broadcast_to(np.eye(2, 3), out.shape))

    def test_rate_zero_unchanged(self):
        mats = self._random_matrices(20)
        out, dropped = adv.stn_dropout(mats, 0.0, np.random.default_rng(2))
        assert not dropped.any()
        np.testing.assert_array_equal(out, mats)

    def test_rate_half_fraction_concentrates(self):
        mats = self._random_matrices(10_000)
        out, dropped = adv.stn_dropout(mats, 0.5, np.random.default_rng(3))
        assert 0.48 <= dropped.mean() <= 0.52

    def test_deterministic_under_fixed_seed(self):
        mats = self._random_matrices(50)
        out1, d1 = adv.stn_dropout(mats, 0.5, np.random.default_rng(4))
        out2, d2 = adv.stn_dropout(mats, 0.5, np.random.default_rng(4))
        np.testing.assert_array_equal(out1, out2)
        np.testing.assert_array_equal(d1, d2)

    def test_commutes_with_permutation_under_per_item_seeding(self):
        mats = self._random_matrices(16)
        order = np.random.default_rng(5).permutation(16)

        def per_item(ms, ids):
            outs = []
            for m, i in zip(ms, ids):
                out, _ = adv.stn_dropout(m[None], 0.5, np.random.default_rng(int(i)))
                outs.append(out[0])
            return np.stack(outs)

        direct = per_item(mats, np.arange(16))
        permuted = per_item(mats[order], order)
        np.testing.assert_array_equal(direct[order], permuted)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError, match="rate"):
            adv.stn_dropout(self._random_matrices(3), 1.5, np.random.default_rng(0))


class TestAdversaryObjective:
    def test_identity_matrices_give_plain_loss(self):
        mats = np.broadcast_to(np.eye(2, 3), (5, 2, 3))
        assert adv.adversary_objective(1.7, mats, 10.0) == pytest.approx(1.7)

    def test_lambda_zero_ignores_matrices(self):
        mats = np.random.default_rng(6).random((5, 2, 3))
        assert adv.adversary_objective(0.3, mats, 0.0) == pytest.approx(0.3)

    def test_arithmetic(self):
        mats = np.array([[[1.1, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        assert adv.adversary_objective(1.0, mats, 10.0) == pytest.approx(0.9)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            adv.adversary_objective(1.0, np.zeros((1, 2, 3)), -0.1)

    def test_matches_reg_loss_sum(self):
        rng = np.random.default_rng(7)
        mats = np.eye(2, 3) + rng.uniform(-0.2, 0.2, (4, 2, 3))
        reg = sum(identity_reg_loss(m) for m in mats)
        assert adv.adversary_objective(2.0, mats, 0.5) == pytest.approx(2.0 - 0.5 * reg)
