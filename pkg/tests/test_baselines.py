import numpy as np
import pytest

from mdreg import (
    EmbeddingSet,
    LinearHead,
    TrainingDivergedError,
    calibrate_linear,
    finetune_probe,
    fit_linear_probe,
    load_head,
    normalize_rows,
    predict_knn,
    save_head,
)


def source_set(vectors, labels):
    vectors = np.atleast_2d(vectors)
    return EmbeddingSet(tuple(str(i) for i in range(vectors.shape[0])),
                        vectors, labels, "source")


class TestPredictKnn:
    def test_coincident_query_dominated_by_exact_match(self):
        support = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        labels = np.array([7.0, 50.0, 90.0])
        out = predict_knn(support[[0]], support, labels, k=1)
        assert out[0] == pytest.approx(7.0, abs=1e-9)

    def test_equidistant_supports_average(self):
        support = np.array([[1.0, 0.0], [-1.0, 0.0]])
        out = predict_knn(np.array([[0.0, 1.0]]), support, np.array([10.0, 20.0]), k=2)
        assert out[0] == pytest.approx(15.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        support = rng.standard_normal((5, 3))
        labels = rng.uniform(0, 30, 5)
        queries = rng.standard_normal((12, 3))
        out = predict_knn(queries, support, labels, k=3)
        for qi in range(12):
            dists = [(np.linalg.norm(queries[qi] - support[j]), j) for j in range(5)]
            chosen = sorted(dists)[:3]
            weights = np.array([1.0 / (d + 1e-12) for d, _ in chosen])
            vals = np.array([labels[j] for _, j in chosen])
            assert out[qi] == pytest.approx((weights * vals).sum() / weights.sum(), rel=1e-12)

    def test_distance_tie_breaks_to_lower_support_index(self):
        support = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        out = predict_knn(np.array([[0.0, 0.0]]), support, np.array([3.0, 11.0, 99.0]), k=1)
        assert out[0] == pytest.approx(3.0)

    def test_outputs_within_support_label_range(self):
        rng = np.random.default_rng(8)
        support = rng.standard_normal((10, 4))
        labels = rng.uniform(-2, 2, 10)
        out = predict_knn(rng.standard_normal((40, 4)), support, labels, k=4)
        assert out.min() >= labels.min() - 1e-12
        assert out.max() <= labels.max() + 1e-12

    def test_empty_or_oversized_k_rejected(self):
        with pytest.raises(ValueError, match="empty support"):
            predict_knn(np.ones((1, 2)), np.empty((0, 2)), np.empty(0), k=1)
        with pytest.raises(ValueError):
            predict_knn(np.ones((1, 2)), np.ones((2, 2)), np.ones(2), k=3)


class TestFitLinearProbe:
    def test_realizable_target_recovered_exactly(self):
        rng = np.random.default_rng(0)
        v = normalize_rows(rng.standard_normal((50, 4)))
        w_true = np.array([2.0, -1.0, 0.5, 3.0])
        y = v @ w_true + 1.25
        head = fit_linear_probe(source_set(v, y), ridge_lambda=0.0)
        preds = head.predict(v)
        ss_res = ((y - preds) ** 2).sum()
        ss_tot = ((y - y.mean()) ** 2).sum()
        assert 1.0 - ss_res / ss_tot == pytest.approx(1.0, abs=1e-8)

    def test_infinite_ridge_shrinks_to_mean(self):
        rng = np.random.default_rng(1)
        v = normalize_rows(rng.standard_normal((30, 3)))
        y = rng.uniform(0, 10, 30)
        head = fit_linear_probe(source_set(v, y), ridge_lambda=1e12)
        assert np.abs(head.weight).max() < 1e-9
        assert head.bias == pytest.approx(y.mean(), rel=1e-9)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(2)
        v = normalize_rows(rng.standard_normal((40, 5)))
        y = rng.uniform(0, 25, 40)
        lam = 1e-3
        head = fit_linear_probe(source_set(v, y), ridge_lambda=lam)
        x = np.column_stack([v, np.ones(40)])
        penalty = np.diag(np.r_[np.full(5, lam), 0.0])
        beta = np.linalg.inv(x.T @ x + penalty) @ x.T @ y
        np.testing.assert_allclose(head.weight, beta[:-1], atol=1e-8)
        assert head.bias == pytest.approx(beta[-1], abs=1e-8)

    def test_singular_system_advises_ridge(self):
        v = np.tile([[1.0, 0.0]], (5, 1))  # rank-deficient design
        with pytest.raises(ValueError, match="ridge_lambda > 0"):
            fit_linear_probe(source_set(v, np.arange(5.0)), ridge_lambda=0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        v = normalize_rows(rng.standard_normal((20, 3)))
        y = rng.uniform(size=20)
        h1 = fit_linear_probe(source_set(v, y), 1e-4)
        h2 = fit_linear_probe(source_set(v, y), 1e-4)
        np.testing.assert_array_equal(h1.weight, h2.weight)
        assert h1.bias == h2.bias


class TestCalibrateLinear:
    def test_perfect_predictions_give_identity(self):
        y = np.array([1.0, 4.0, 9.0, 16.0])
        a, b = calibrate_linear(y, y)
        assert a == pytest.approx(1.0, abs=1e-10)
        assert b == pytest.approx(0.0, abs=1e-10)

    def test_exact_affine_relation_recovered(self):
        p = np.array([0.0, 1.0, 2.0, 5.0])
        a, b = calibrate_linear(p, 2.0 * p + 3.0)
        assert a == pytest.approx(2.0, abs=1e-12)
        assert b == pytest.approx(3.0, abs=1e-12)

    def test_matches_covariance_formula_on_noisy_pairs(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0, 10, 30)
        t = 1.7 * p - 2.0 + rng.standard_normal(30)
        a, b = calibrate_linear(p, t)
        cov = np.cov(p, t, ddof=0)
        a_expect = cov[0, 1] / cov[0, 0]
        assert a == pytest.approx(a_expect, rel=1e-12)
        assert b == pytest.approx(t.mean() - a_expect * p.mean(), rel=1e-12)

    def test_constant_predictions_rejected(self):
        with pytest.raises(ValueError, match="degenerate calibration"):
            calibrate_linear(np.full(4, 2.0), np.arange(4.0))

    def test_slope_invariant_to_prediction_offset(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0, 5, 20)
        t = rng.uniform(0, 5, 20)
        a1, _ = calibrate_linear(p, t)
        a2, _ = calibrate_linear(p + 100.0, t)
        assert a1 == pytest.approx(a2, abs=1e-10)


class TestFinetuneProbe:
    def test_zero_steps_is_identity(self):
        head = LinearHead(np.array([1.0, 2.0]), 0.5)
        out = finetune_probe(head, np.ones((3, 2)), np.ones(3), steps=0, lr=0.1)
        np.testing.assert_array_equal(out.weight, head.weight)
        assert out.bias == head.bias

    def test_single_point_interpolated(self):
        head = LinearHead(np.zeros(2), 0.0)
        x = np.array([[0.6, 0.8]])
        y = np.array([5.0])
        out = finetune_probe(head, x, y, steps=4000, lr=0.3)
        assert abs(out.predict(x)[0] - 5.0) < 1e-6

    def test_support_mse_never_worse_after_tuning(self):
        rng = np.random.default_rng(7)
        x = normalize_rows(rng.standard_normal((25, 3)))
        y = rng.uniform(0, 25, 25)
        head = LinearHead(rng.standard_normal(3), 0.0)
        before = float(((head.predict(x) - y) ** 2).mean())
        out = finetune_probe(head, x, y, steps=300, lr=0.05)
        after = float(((out.predict(x) - y) ** 2).mean())
        assert after <= before

    def test_loss_trace_smoothly_non_increasing(self):
        # recompute the per-step MSE trace externally; its 5-step moving
        # average must never climb for this full-batch descent
        rng = np.random.default_rng(8)
        x = normalize_rows(rng.standard_normal((20, 3)))
        y = rng.uniform(0, 10, 20)
        head = LinearHead(np.zeros(3), 0.0)
        losses = []
        current = head
        for _ in range(60):
            losses.append(float(((current.predict(x) - y) ** 2).mean()))
            current = finetune_probe(current, x, y, steps=1, lr=0.05)
        ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(ma) <= 1e-12)

    def test_divergence_names_step(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((10, 2))
        y = rng.uniform(size=10)
        with pytest.raises(TrainingDivergedError, match=r"step \d+"):
            finetune_probe(LinearHead(np.zeros(2), 0.0), x, y, steps=500, lr=1e4)


class TestHeadSerialization:
    def test_roundtrip(self, tmp_path):
        head = LinearHead(np.array([0.25, -1.5, 3.0]), 2.125, ridge_lambda=1e-3)
        path = tmp_path / "head.json"
        save_head(path, head)
        back = load_head(path)
        np.testing.assert_array_equal(back.weight, head.weight)
        assert back.bias == head.bias
        assert back.ridge_lambda == head.ridge_lambda
