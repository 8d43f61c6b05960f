import numpy as np
import pytest
from scipy.special import expit

from matchstudy.propensity import (
    fit_bart_propensity,
    fit_bayes,
    fit_l1,
    fit_mle,
    l1_lambda_grid,
    predict,
)


def logistic_data(seed, n, coefs, intercept=0.0):
    rng = np.random.default_rng(seed)
    p = len(coefs)
    x = rng.normal(size=(n, p))
    probs = expit(intercept + x @ np.asarray(coefs))
    z = (rng.random(n) < probs).astype(np.int64)
    return x, z


def irls_reference(x, z, tol=1e-12, iters=200):
    """Textbook IRLS, written independently of the fitted code path."""
    design = np.column_stack([np.ones(len(z)), x])
    beta = np.zeros(design.shape[1])
    for _ in range(iters):
        p = expit(design @ beta)
        w = np.clip(p * (1.0 - p), 1e-12, None)
        working = design @ beta + (z - p) / w
        wd = design * np.sqrt(w)[:, None]
        wy = working * np.sqrt(w)
        new, *_ = np.linalg.lstsq(wd, wy, rcond=None)
        if np.max(np.abs(new - beta)) < tol:
            beta = new
            break
        beta = new
    return beta


class TestFitMle:
    def test_symmetric_four_points_give_zero_beta(self):
        x = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        z = np.array([0, 1, 0, 1])
        fit = fit_mle(x, z)
        np.testing.assert_allclose(fit.beta, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(fit.scores, 0.5, atol=1e-12)

    def test_perfect_separation_flagged(self):
        with pytest.warns(UserWarning, match="separation"):
            fit = fit_mle(np.array([[-1.0], [1.0]]), np.array([0, 1]))
        assert not fit.converged

    def test_matches_independent_irls(self):
        x, z = logistic_data(seed=42, n=200, coefs=[0.8, -0.5, 0.3])
        fit = fit_mle(x, z)
        reference = irls_reference(x, z)
        assert np.max(np.abs(fit.beta - reference)) < 1e-6

    def test_row_reordering_leaves_fit_unchanged(self):
        x, z = logistic_data(seed=1, n=150, coefs=[0.5, -0.2])
        fit = fit_mle(x, z)
        perm = np.random.default_rng(2).permutation(len(z))
        fit_p = fit_mle(x[perm], z[perm])
        np.testing.assert_allclose(fit_p.beta, fit.beta, atol=1e-9)
        np.testing.assert_allclose(fit_p.scores, fit.scores[perm], atol=1e-9)

    def test_label_flip_symmetry(self):
        x, z = logistic_data(seed=3, n=120, coefs=[0.7])
        fit = fit_mle(x, z)
        fit_flip = fit_mle(x, 1 - z)
        probe = np.random.default_rng(4).normal(size=(20, 1))
        total = predict(fit, probe) + predict(fit_flip, probe)
        np.testing.assert_allclose(total, 1.0, atol=1e-8)

    def test_large_sample_recovers_truth_within_three_se(self):
        true = np.array([0.4, 0.8, -0.5, 0.3])
        x, z = logistic_data(seed=19, n=10_000, coefs=true[1:], intercept=true[0])
        fit = fit_mle(x, z)
        design = np.column_stack([np.ones(len(z)), x])
        w = fit.scores * (1.0 - fit.scores)
        cov = np.linalg.inv(design.T @ (design * w[:, None]))
        se = np.sqrt(np.diag(cov))
        assert np.all(np.abs(fit.beta - true) < 3 * se)


class TestFitL1:
    def test_full_shrinkage_gives_constant_scores(self):
        x, z = logistic_data(seed=5, n=80, coefs=[1.0, -1.0])
        fit = fit_l1(x, z, penalties=np.array([1e6]))
        np.testing.assert_array_equal(fit.beta[1:], 0.0)
        np.testing.assert_allclose(fit.scores, z.mean(), atol=1e-8)

    def test_zero_penalty_matches_mle(self):
        x, z = logistic_data(seed=6, n=200, coefs=[0.6, -0.3])
        ref = fit_mle(x, z)
        fit = fit_l1(x, z, penalties=np.array([0.0]))
        assert np.max(np.abs(fit.beta - ref.beta)) < 1e-4

    def test_all_zero_column_is_ignored(self):
        # an indicator column can be identically zero inside a comparison
        # subset; the fit must not divide by its zero curvature
        x, z = logistic_data(seed=13, n=120, coefs=[0.8, -0.5])
        x = np.column_stack([x, np.zeros(len(z))])
        fit = fit_l1(x, z, seed=3)
        assert np.isfinite(fit.scores).all()
        assert fit.beta[3] == 0.0
        ref = fit_l1(x[:, :2], z, seed=3)
        np.testing.assert_allclose(fit.scores, ref.scores, atol=1e-10)

    def test_kkt_conditions_at_solution(self):
        x, z = logistic_data(seed=7, n=250, coefs=[0.9, 0.0, 0.0, -0.6, 0.0])
        fit = fit_l1(x, z, seed=0)
        lam = fit.diagnostics["penalty"]
        design = np.column_stack([np.ones(len(z)), x])
        grad = design.T @ (z - expit(design @ fit.beta))  # of the unpenalized loglik
        assert abs(grad[0]) < 1e-4  # intercept unpenalized
        for g, b in zip(grad[1:], fit.beta[1:]):
            if b == 0.0:
                assert abs(g) <= lam + 1e-6
            else:
                assert abs(abs(g) - lam) < 1e-4

    def test_row_reordering_at_fixed_penalty(self):
        x, z = logistic_data(seed=20, n=150, coefs=[0.8, -0.4])
        fit = fit_l1(x, z, penalties=np.array([0.5]))
        perm = np.random.default_rng(21).permutation(len(z))
        fit_p = fit_l1(x[perm], z[perm], penalties=np.array([0.5]))
        np.testing.assert_allclose(fit_p.beta, fit.beta, atol=1e-9)

    def test_path_sparsity_monotone_on_fixture(self):
        x, z = logistic_data(seed=8, n=200, coefs=[1.2, -0.8, 0.5, 0.0])
        fit = fit_l1(x, z, seed=0)
        path = fit.diagnostics["path_nonzero"]
        # grid runs from the largest penalty down, so counts may only grow
        assert all(a <= b for a, b in zip(path, path[1:]))
        assert path[0] == 0

    def test_auto_grid_starts_at_all_zero_penalty(self):
        x, z = logistic_data(seed=9, n=100, coefs=[0.5, 0.5])
        grid = l1_lambda_grid(x, z)
        assert len(grid) == 50
        assert np.all(np.diff(grid) < 0)
        fit = fit_l1(x, z, penalties=np.array([grid[0]]))
        np.testing.assert_array_equal(fit.beta[1:], 0.0)


class TestFitBayes:
    def test_separated_data_stays_finite(self):
        fit = fit_bayes(np.array([[-1.0], [1.0]]), np.array([0, 1]), draws=500, burn_in=200, seed=0)
        assert np.all(fit.scores > 0.0) and np.all(fit.scores < 1.0)
        assert np.isfinite(fit.beta).all()

    def test_symmetric_four_points_center_near_half(self):
        x = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        z = np.array([0, 1, 0, 1])
        fit = fit_bayes(x, z, seed=1)
        np.testing.assert_allclose(fit.scores, 0.5, atol=0.05)

    def test_same_seed_identical(self):
        x, z = logistic_data(seed=10, n=60, coefs=[0.5])
        a = fit_bayes(x, z, draws=300, burn_in=100, seed=5)
        b = fit_bayes(x, z, draws=300, burn_in=100, seed=5)
        np.testing.assert_array_equal(a.scores, b.scores)
        np.testing.assert_array_equal(a.beta_draws, b.beta_draws)

    def test_posterior_mean_matches_quadrature(self):
        x, z = logistic_data(seed=11, n=500, coefs=[1.5], intercept=0.2)
        fit = fit_bayes(x, z, seed=3)

        # dense 2-d quadrature over (intercept, slope) with the same prior
        design = np.column_stack([np.ones(len(z)), x])
        b0 = np.linspace(-2.0, 2.0, 161)
        b1 = np.linspace(-1.0, 4.0, 201)
        grid0, grid1 = np.meshgrid(b0, b1, indexing="ij")
        betas = np.stack([grid0.ravel(), grid1.ravel()], axis=1)
        eta = betas @ design.T
        loglik = (z * eta - np.logaddexp(0.0, eta)).sum(axis=1)
        logprior = -0.5 * (betas[:, 0] ** 2 / 100.0 + betas[:, 1] ** 2)
        w = np.exp(loglik + logprior - (loglik + logprior).max())
        w /= w.sum()
        mean1 = float(w @ betas[:, 1])
        sd1 = float(np.sqrt(w @ (betas[:, 1] - mean1) ** 2))

        assert abs(fit.beta[1] - mean1) < 3 * sd1


class TestFitBartPropensity:
    def test_pure_noise_scores_near_base_rate(self):
        # discrete covariate support so the no-structure null is identifiable:
        # every cell holds hundreds of points and its class rate pins the fit
        rng = np.random.default_rng(200)
        x = rng.integers(0, 2, size=(1200, 2)).astype(float)
        z = (rng.random(1200) < 0.45).astype(np.int64)
        fit = fit_bart_propensity(x, z, seed=0)
        assert np.max(np.abs(fit.scores - z.mean())) < 0.1

    def test_threshold_structure_learned(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(500, 3))
        z = (x[:, 0] > 0).astype(np.int64)
        fit = fit_bart_propensity(x, z, seed=0)
        # AUC via rank statistic
        order = np.argsort(fit.scores)
        ranks = np.empty(len(z))
        ranks[order] = np.arange(1, len(z) + 1)
        n1, n0 = z.sum(), (1 - z).sum()
        auc = (ranks[z == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)
        assert auc > 0.9

    def test_same_seed_identical(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(80, 2))
        z = rng.integers(0, 2, 80)
        a = fit_bart_propensity(x, z, seed=9)
        b = fit_bart_propensity(x, z, seed=9)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_scores_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(100, 2))
        z = (x[:, 0] > 1).astype(np.int64)  # rare treatment
        fit = fit_bart_propensity(x, z, seed=2)
        assert np.all(fit.scores > 0.0) and np.all(fit.scores < 1.0)


class TestPredict:
    def test_zero_beta_gives_half(self):
        x, z = logistic_data(seed=16, n=40, coefs=[0.0])
        fit = fit_mle(np.array([[-1.0], [-1.0], [1.0], [1.0]]), np.array([0, 1, 0, 1]))
        probe = np.random.default_rng(0).normal(size=(10, 1))
        np.testing.assert_allclose(predict(fit, probe), 0.5, atol=1e-10)

    def test_log_three_maps_to_three_quarters(self):
        from matchstudy.propensity import PropensityFit

        fit = PropensityFit(method="mle", scores=np.array([0.75]), beta=np.array([0.0, np.log(3.0)]))
        np.testing.assert_allclose(predict(fit, np.array([1.0])), [0.75], atol=1e-12)

    def test_training_rows_reproduce_fitted_scores(self):
        x, z = logistic_data(seed=17, n=90, coefs=[0.8, -0.4])
        for fit in (fit_mle(x, z), fit_l1(x, z, seed=0), fit_bayes(x, z, draws=400, burn_in=150, seed=0)):
            np.testing.assert_allclose(predict(fit, x), fit.scores, atol=1e-9)

    def test_dimension_mismatch_rejected(self):
        x, z = logistic_data(seed=18, n=30, coefs=[0.5])
        fit = fit_mle(x, z)
        with pytest.raises(ValueError):
            predict(fit, np.ones((4, 3)))

    def test_bart_scores_match_per_tree_recomputation(self):
        from scipy.special import ndtr

        rng = np.random.default_rng(22)
        x = rng.normal(size=(60, 2))
        z = (x[:, 0] + 0.5 * rng.normal(size=60) > 0).astype(np.int64)
        fit = fit_bart_propensity(x, z, seed=4)
        probe = rng.normal(size=(15, 2))

        def walk(tree, row):
            node = 0
            while tree.feature[node] >= 0:
                if row[tree.feature[node]] <= tree.threshold[node]:
                    node = tree.left[node]
                else:
                    node = tree.right[node]
            return tree.value[node]

        manual = np.zeros(len(probe))
        for forest in fit.forest.forests:
            totals = np.array([sum(walk(t, row) for t in forest) for row in probe])
            manual += ndtr(totals)
        manual /= len(fit.forest.forests)
        np.testing.assert_allclose(predict(fit, probe), manual, atol=1e-10)
