import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adicurb.gpr_filter import GprError, GprHyperparams, gpr_fit, gpr_predict, iterative_filter, se_kernel


def curve(x):
    return 4 + 0.01 * x**2


class TestFit:
    def test_two_point_kernel_matrix(self):
        h = GprHyperparams(length_scale=1.0, signal_variance=1.0, noise_variance=0.01)
        m = gpr_fit([(0.0, 1.0), (1.5, 2.0)], h)
        k12 = np.exp(-(1.5**2) / 2)
        np.testing.assert_allclose(m.kernel_matrix, [[1.01, k12], [k12, 1.01]], rtol=0, atol=1e-15)

    def test_repeated_point(self):
        h = GprHyperparams(length_scale=1.0, noise_variance=0.01)
        m = gpr_fit([(2.0, 0.7), (2.0, 0.7)], h)
        mean, _ = gpr_predict(m, 2.0)
        # closed form: 2 s / (2 s + n) * y
        assert mean[0] == pytest.approx(2 / 2.01 * 0.7, rel=1e-12)
        assert abs(mean[0] - 0.7) <= 0.1

    @pytest.mark.parametrize("pts", [[], [(1.0, 2.0)]])
    def test_too_few_points(self, pts):
        with pytest.raises(GprError):
            gpr_fit(pts)

    def test_escalates_noise_on_failure(self, monkeypatch):
        import adicurb.gpr_filter as g

        real, calls = g.cho_factor, []

        def flaky(a, **kw):
            calls.append(a[0, 0])
            if len(calls) == 1:
                raise g.LinAlgError("forced")
            return real(a, **kw)

        monkeypatch.setattr(g, "cho_factor", flaky)
        m = gpr_fit([(0.0, 1.0), (1.0, 2.0)], GprHyperparams(noise_variance=0.01))
        assert m.noise_used == pytest.approx(0.1)
        assert calls[1] - calls[0] == pytest.approx(0.09)

    def test_gives_up_after_three_escalations(self):
        x = np.zeros(50)
        with pytest.raises(GprError, match="3 noise escalations"):
            gpr_fit(np.column_stack([x, np.ones(50)]), GprHyperparams(noise_variance=1e-300))

    @pytest.mark.parametrize("kw", [dict(length_scale=0), dict(noise_variance=-1), dict(outlier_sigma=0.5), dict(max_iterations=0)])
    def test_invalid_hyper(self, kw):
        with pytest.raises(ValueError):
            GprHyperparams(**kw)


class TestPredict:
    def test_prior_reversion(self):
        h = GprHyperparams(length_scale=1.0)
        m = gpr_fit([(0.0, 3.0), (1.0, 2.0), (2.0, 1.0)], h)
        mean, var = gpr_predict(m, 40.0)
        assert abs(mean[0]) <= 1e-6 and abs(var[0] - h.signal_variance) <= 1e-6

    def test_at_training_point(self):
        h = GprHyperparams(noise_variance=1e-6)
        m = gpr_fit([(1.0, 0.5), (9.0, -0.5)], h)
        mean, _ = gpr_predict(m, 1.0)
        assert abs(mean[0] - 0.5) <= 2 * np.sqrt(1e-6)

    def test_noise_free_interpolation(self):
        x = np.linspace(-4, 4, 5)
        y = 0.3 * np.sin(x / 2)
        h = GprHyperparams(length_scale=2.0, noise_variance=1e-8)
        mean, _ = gpr_predict(gpr_fit(np.column_stack([x, y]), h), x)
        # the noise term itself shrinks the fit by about noise / signal; well under 1e-6 here
        assert np.abs(mean - y).max() <= 1e-6

    @given(st.floats(-30, 30), st.floats(-50, 50))
    def test_variance_bounded(self, q, shift):
        h = GprHyperparams()
        m = gpr_fit([(0.0, 1.0), (2.0, 1.5), (5.0, 0.5)], h)
        _, var = gpr_predict(m, q)
        assert 0 <= var[0] <= h.signal_variance + h.noise_variance + 1e-9

    @given(st.floats(-100, 100))
    def test_translation_invariant(self, c):
        pts = np.array([(0.0, 1.0), (2.0, 1.5), (5.0, 0.5), (7.0, 0.8)])
        q = np.linspace(-3, 10, 9)
        a = gpr_predict(gpr_fit(pts), q)[0]
        b = gpr_predict(gpr_fit(pts + [c, 0.0]), q + c)[0]
        np.testing.assert_allclose(a, b, atol=1e-9)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_kernel_symmetric(self, a, b):
        assert se_kernel(a, b, 4.0, 1.0)[0, 0] == se_kernel(b, a, 4.0, 1.0)[0, 0]


class TestFilter:
    def test_planted_outlier(self):
        x = np.linspace(0, 19, 20)
        pts = np.vstack([np.column_stack([x, curve(x)]), [[9.5, 6.0]]])
        res = iterative_filter(pts)
        assert res.outliers.tolist() == [20]
        assert len(res.inliers) == 20

    def test_exact_curve_no_outliers_one_iteration(self):
        x = np.linspace(0, 19, 20)
        res = iterative_filter(np.column_stack([x, curve(x)]))
        assert len(res.outliers) == 0 and res.iterations == 1

    def test_three_points_skipped(self):
        res = iterative_filter([(0, 0), (1, 1), (2, 0)])
        assert res.inliers.tolist() == [0, 1, 2] and res.warning

    def test_terminates_within_budget(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(0, 30, 80), rng.normal(0, 2, 80)])
        h = GprHyperparams(max_iterations=3)
        res = iterative_filter(pts, h)
        assert res.iterations <= 3
        assert len(res.inliers) + len(res.outliers) == 80

    def test_inlier_count_non_increasing(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(0, 30, 60), 4 + rng.normal(0, 0.05, 60)])
        pts[::7, 1] += rng.uniform(1, 3, len(pts[::7]))
        sizes = [len(iterative_filter(pts, GprHyperparams(max_iterations=k)).inliers) for k in range(1, 6)]
        assert sizes == sorted(sizes, reverse=True)


class TestConfirmedViolations:
    @pytest.mark.parametrize("x0", [0.0, 3.0, 9.5, 19.0])
    @pytest.mark.parametrize("offset", [2.0, 5.0])
    def test_single_gross_outlier_only(self, x0, offset):
        x = np.linspace(0, 19, 20)
        pts = np.vstack([np.column_stack([x, curve(x)]), [[x0, curve(x0) + offset]]])
        res = iterative_filter(pts)
        assert res.outliers.tolist() == [20] and len(res.inliers) == 20

    def test_unconfirmed_rule_drops_dragged_neighbours(self):
        x = np.linspace(0, 19, 20)
        pts = np.vstack([np.column_stack([x, curve(x)]), [[9.5, curve(9.5) + 2.0]]])
        res = iterative_filter(pts, GprHyperparams(confirm_violations=False))
        assert 20 in res.outliers and len(res.outliers) > 1

    def test_separated_outliers_removed_together(self):
        x = np.linspace(0, 19, 20)
        pts = np.vstack([np.column_stack([x, curve(x)]), [[2.0, 7.0], [17.0, 1.0]]])
        res = iterative_filter(pts)
        assert res.outliers.tolist() == [20, 21] and res.iterations == 2

    def test_false_cluster_removed(self):
        x = np.linspace(0, 39, 80)
        cluster = np.column_stack([np.linspace(15, 18, 8), curve(np.linspace(15, 18, 8)) + 1.5])
        pts = np.vstack([np.column_stack([x, curve(x)]), cluster])
        res = iterative_filter(pts)
        assert set(res.outliers.tolist()) == set(range(80, 88))

    @given(st.integers(0, 2**32 - 1))
    def test_inliers_shrink_monotonically(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(0, 30, 40), rng.normal(0, 1, 40)])
        prev = None
        for it in range(1, 6):
            res = iterative_filter(pts, GprHyperparams(max_iterations=it))
            cur = set(res.inliers.tolist())
            if prev is not None:
                assert cur <= prev
            prev = cur
