"""Tests for preconditioning, the LASSO path and outlier selection."""

import numpy as np
import pytest
import scipy.linalg

from conftest import random_problem
from src.dataset import Dataset, SyntheticConfig, generate_synthetic
from src.errors import ConfigError, NoKernelSpaceError, PathError
from src.plasso import (
    Breakpoint, RegularizationPath, coordinate_descent_lasso, design_matrix,
    equivalence_check, hat_matrix, ipod_refine, kkt_violation, lasso_objective, lasso_path,
    leverage, order_by_activation, path_gamma_at, path_to_json, path_to_long_csv, precondition,
    select_outliers_count, select_outliers_cv, select_outliers_ipod, soft_threshold, solve_beta,
)


def _path_for(seed, n=12, p=2):
    features, y = random_problem(seed, n, p)
    pre = precondition(design_matrix(features))
    return pre, y, lasso_path(pre, y)


class TestPrecondition:
    def test_ones_column_gives_centering(self):
        pre = precondition(np.ones((3, 1)))
        np.testing.assert_allclose(hat_matrix(pre), np.full((3, 3), 1 / 3), atol=1e-12)
        assert pre.rank == 1
        assert pre.effective_observations == 2

    def test_identity_has_no_kernel(self):
        with pytest.raises(NoKernelSpaceError, match='no kernel space'):
            precondition(np.eye(3))

    def test_identity_without_kernel_fails_on_use(self):
        pre = precondition(np.eye(3), require_kernel=False)
        assert pre.rank == 3
        assert pre.U2.shape == (3, 0)
        with pytest.raises(NoKernelSpaceError):
            lasso_path(pre, np.array([1.0, 2.0, 3.0]))

    def test_random_design_projection(self, rng):
        phi = rng.normal(size=(8, 3))
        pre = precondition(phi)
        H = hat_matrix(pre)
        assert np.max(np.abs(H @ H - H)) <= 1e-10
        assert np.max(np.abs(H @ phi - phi)) <= 1e-8
        np.testing.assert_allclose(H, phi @ np.linalg.pinv(phi), atol=1e-10)

    def test_hat_matrix_properties_over_seeds(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            phi = r.normal(size=(int(r.integers(5, 15)), int(r.integers(1, 4))))
            H = hat_matrix(precondition(phi))
            assert np.max(np.abs(H @ H - H)) <= 1e-10
            assert np.max(np.abs(H.T - H)) <= 1e-12

    def test_factor_invariants(self, rng):
        phi = rng.normal(size=(10, 3))
        pre = precondition(phi)
        U = np.hstack([pre.U1, pre.U2])
        assert np.max(np.abs(U.T @ U - np.eye(10))) <= 1e-10
        assert np.max(np.abs(pre.U2.T @ phi)) <= 1e-8 * np.max(np.abs(phi))

    def test_rank_deficient_design(self, rng):
        a = rng.normal(size=(9, 1))
        pre = precondition(np.hstack([a, 2 * a]))
        assert pre.rank == 1

    def test_leverage_is_hat_diagonal(self, rng):
        pre = precondition(rng.normal(size=(7, 2)))
        np.testing.assert_allclose(leverage(pre), np.diag(hat_matrix(pre)), atol=1e-14)

    def test_design_matrix_intercept(self):
        phi = design_matrix(np.array([[2.0], [3.0]]))
        np.testing.assert_array_equal(phi, [[1.0, 2.0], [1.0, 3.0]])
        assert design_matrix(np.zeros((2, 3)), intercept=False).shape == (2, 3)


class TestSolveBeta:
    def test_zero_rhs(self, rng):
        phi = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        np.testing.assert_allclose(solve_beta(phi, y, y), 0.0, atol=1e-14)

    def test_orthonormal_design(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
        y = rng.normal(size=6)
        np.testing.assert_allclose(solve_beta(q, y, np.zeros(6)), q.T @ y, atol=1e-12)

    def test_matches_normal_equations(self, rng):
        phi = rng.normal(size=(10, 2))
        y, gamma = rng.normal(size=10), rng.normal(size=10)
        expected = scipy.linalg.solve(phi.T @ phi, phi.T @ (y - gamma), assume_a='pos')
        np.testing.assert_allclose(solve_beta(precondition(phi), y, gamma), expected, atol=1e-8)


class TestLassoPath:
    def test_zero_above_lambda_max(self):
        pre, y, path = _path_for(0)
        assert path.lambda_max == pytest.approx(np.max(np.abs(pre.project_out(y))))
        np.testing.assert_array_equal(path.gamma_at(path.lambda_max), 0.0)
        np.testing.assert_array_equal(path.gamma_at(10 * path.lambda_max), 0.0)
        first = path.breakpoints[0]
        assert first.active == ()
        assert len(first.entering) == 1

    def test_lambdas_strictly_decreasing(self):
        _, _, path = _path_for(1)
        assert np.all(np.diff(path.lambdas) < 0)

    def test_orthogonal_design_soft_thresholds(self):
        # A zero design leaves H = 0, so every coordinate is an independent soft threshold
        y = np.array([3.0, -2.0, 1.0, 0.5, -4.0])
        pre = precondition(np.zeros((5, 1)))
        path = lasso_path(pre, y)
        for lam in [3.5, 2.5, 1.7, 0.8, 0.2]:
            np.testing.assert_allclose(path_gamma_at(path, lam), soft_threshold(y, lam), atol=1e-12)
        assert all(bp.leaving == () for bp in path.breakpoints)
        supports = [set(bp.active) for bp in path.breakpoints]
        assert all(a <= b for a, b in zip(supports, supports[1:]))

    def test_kkt_at_every_breakpoint(self):
        for seed in range(10):
            pre, y, path = _path_for(seed, n=20, p=3)
            for bp in path.breakpoints:
                gamma = bp.gamma(pre.n_samples)
                assert kkt_violation(pre, y, gamma, bp.lam) <= 1e-6
                assert bp.kkt_violation <= 1e-6

    def test_affine_between_breakpoints(self):
        pre, y, path = _path_for(2, n=15)
        lambdas = path.lambdas
        for upper, lower in zip(lambdas, lambdas[1:]):
            mid = 0.5 * (upper + lower)
            assert kkt_violation(pre, y, path_gamma_at(path, mid), mid) <= 1e-6

    def test_matches_coordinate_descent(self):
        features, y = random_problem(5, n=12)
        pre = precondition(design_matrix(features))
        path = lasso_path(pre, y)
        design, target = pre.U2.T, pre.U2.T @ y
        for lam in np.geomspace(0.95 * path.lambda_max, 0.02 * path.lambda_max, 20):
            exact = lasso_objective(design, target, path.gamma_at(lam), lam)
            oracle = lasso_objective(design, target, coordinate_descent_lasso(design, target, lam), lam)
            assert abs(exact - oracle) <= 1e-6

    def test_reaches_lambda_min(self):
        _, _, path = _path_for(3)
        assert path.terminated == 'lambda_min'
        assert path.lambdas[-1] == pytest.approx(1e-6 * path.lambda_max)

    def test_max_active_stops_early(self):
        _, _, path = _path_for(4, n=20)
        short = lasso_path(precondition(design_matrix(random_problem(4, 20, 2)[0])),
                           random_problem(4, 20, 2)[1], max_active=3)
        assert short.terminated == 'max_active'
        assert len(order_by_activation(short).ranking) >= 3
        assert len(short) <= len(path)

    def test_failure_carries_prefix(self):
        features, y = random_problem(6)
        pre = precondition(design_matrix(features))
        with pytest.raises(PathError) as info:
            lasso_path(pre, y, kkt_tol=-1.0)
        prefix = info.value.prefix
        assert prefix is not None
        assert prefix.breakpoints[0].lam == pytest.approx(np.max(np.abs(pre.project_out(y))))

    def test_labels_in_column_space(self):
        features = np.arange(6, dtype=float).reshape(-1, 1)
        pre = precondition(design_matrix(features))
        path = lasso_path(pre, 2.0 * features.ravel() + 1.0)
        assert path.terminated == 'zero_residual'
        assert order_by_activation(path).ranking == ()


class TestEquivalence:
    def test_random_instances_agree(self):
        for seed in range(50):
            features, y = random_problem(100 + seed, n=10)
            pre = precondition(design_matrix(features))
            lam = 0.3 * np.max(np.abs(pre.project_out(y)))
            assert equivalence_check(pre, y, lam)['max_diff'] <= 1e-8

    def test_lambda_max_gives_zero(self):
        features, y = random_problem(7)
        pre = precondition(design_matrix(features))
        result = equivalence_check(pre, y, np.max(np.abs(pre.project_out(y))))
        np.testing.assert_allclose(result['gamma_projected'], 0.0, atol=1e-10)
        np.testing.assert_allclose(result['gamma_kernel'], 0.0, atol=1e-10)

    def test_single_effective_observation(self):
        pre = precondition(design_matrix(np.array([[0.0], [1.0], [3.0]])))
        assert pre.effective_observations == 1
        y = np.array([1.0, 2.0, 0.0])
        lam = 0.1
        u = pre.U2[:, 0]
        j = int(np.argmax(np.abs(u)))
        expected = np.zeros(3)
        expected[j] = soft_threshold(u[j] * (u @ y), lam) / u[j] ** 2
        result = equivalence_check(pre, y, lam)
        np.testing.assert_allclose(result['gamma_projected'], expected, atol=1e-8)
        np.testing.assert_allclose(result['gamma_kernel'], expected, atol=1e-8)


class TestOrdering:
    def test_single_activation(self):
        path = RegularizationPath(
            breakpoints=(Breakpoint(lam=1.0, entering=(7,), entering_slopes=(1.0,)),
                         Breakpoint(lam=0.5, active=(7,), signs=(1.0,), gamma_values=(0.5,))),
            lambda_max=1.0, n_samples=10)
        assert order_by_activation(path).ranking == (7,)

    def test_tie_broken_by_slope_magnitude(self):
        path = RegularizationPath(
            breakpoints=(Breakpoint(lam=1.0, entering=(3, 5), entering_slopes=(2.0, -3.0)),),
            lambda_max=1.0, n_samples=10)
        assert order_by_activation(path).ranking == (5, 3)

    def test_tie_broken_by_index(self):
        path = RegularizationPath(
            breakpoints=(Breakpoint(lam=1.0, entering=(8, 2), entering_slopes=(1.0, 1.0)),),
            lambda_max=1.0, n_samples=10)
        assert order_by_activation(path).ranking == (2, 8)

    def test_ranking_has_no_duplicates(self):
        _, _, path = _path_for(8, n=25)
        ranking = order_by_activation(path).ranking
        assert len(ranking) == len(set(ranking))
        lams = order_by_activation(path).activation_lambdas
        assert all(a >= b for a, b in zip(lams, lams[1:]))

    def test_select_count(self):
        _, _, path = _path_for(9, n=20)
        report = select_outliers_count(path, 4)
        assert report.selected == report.ranking[:4]
        assert report.selection_rule == 'count(4)'
        assert select_outliers_count(path, 0).selected == ()
        with pytest.raises(ConfigError):
            select_outliers_count(path, -1)


class TestCrossValidation:
    def test_folds_must_be_at_least_two(self, three_class_dataset):
        pre = precondition(design_matrix(three_class_dataset.features))
        path = lasso_path(pre, three_class_dataset.labels, max_active=5)
        with pytest.raises(ConfigError):
            select_outliers_cv(path, three_class_dataset, folds=1)

    def test_clean_data_keeps_everything(self):
        cfg = SyntheticConfig(class_means=((1.0, 1.0), (2.0, 2.0)), outlier_count_per_class=0,
                              rng_seed=4)
        ds = generate_synthetic(cfg)
        path = lasso_path(precondition(design_matrix(ds.features)), ds.labels)
        report = select_outliers_cv(path, ds, folds=5)
        assert len(report.selected) <= 0.01 * ds.n

    def test_selection_is_a_path_active_set(self, three_class_dataset):
        pre = precondition(design_matrix(three_class_dataset.features))
        path = lasso_path(pre, three_class_dataset.labels)
        report = select_outliers_cv(path, three_class_dataset, folds=5, max_candidates=15, workers=2)
        assert set(report.selected) in [set(bp.active) for bp in path.breakpoints]
        accuracies = [acc for _, acc, _ in report.cv_trace]
        assert report.cv_trace[0][2] == 0
        assert max(accuracies) >= accuracies[0]
        assert report.selection_rule == 'cv(5)'


class TestIpod:
    def test_empty_support(self, rng):
        pre = precondition(rng.normal(size=(6, 1)))
        result = ipod_refine(pre, rng.normal(size=6), [])
        assert result.support == ()
        assert result.converged

    def test_dominant_residual(self):
        y = np.ones(6)
        y[4] += 10.0
        pre = precondition(np.ones((6, 1)))
        result = ipod_refine(pre, y, [0])
        assert result.support == (4,)
        assert result.converged

    def test_keeps_support_size(self, three_class_dataset):
        pre = precondition(design_matrix(three_class_dataset.features))
        path = lasso_path(pre, three_class_dataset.labels, max_active=90)
        report = select_outliers_ipod(path, pre, three_class_dataset.labels, 90)
        assert len(report.selected) == 90
        assert report.selection_rule == 'ipod(90)'

    def test_not_worse_than_initialization(self):
        init_scores, ipod_scores = [], []
        for seed in range(3):
            ds = generate_synthetic(SyntheticConfig.three_class(seed=seed))
            pre = precondition(design_matrix(ds.features))
            path = lasso_path(pre, ds.labels, max_active=90)
            init = select_outliers_count(path, 90).selected
            refined = ipod_refine(pre, ds.labels, init).support
            init_scores.append(ds.outlier_mask[list(init)].mean())
            ipod_scores.append(ds.outlier_mask[list(refined)].mean())
        assert np.mean(ipod_scores) >= np.mean(init_scores) - 0.02


class TestExport:
    def test_json_breakpoints(self):
        _, _, path = _path_for(10)
        doc = path_to_json(path)
        assert doc[0]['lambda'] == path.lambda_max
        assert doc[0]['active'] == []
        last = doc[-1]
        assert len(last['gamma_sparse']) == len(last['active']) == len(last['signs'])

    def test_long_csv(self):
        _, _, path = _path_for(11)
        mask = np.zeros(12, dtype=bool)
        mask[:2] = True
        lines = path_to_long_csv(path, mask).splitlines()
        assert lines[0] == 'lambda,instance,gamma,is_outlier'
        expected_rows = sum(len(bp.active) for bp in path.breakpoints)
        assert len(lines) == expected_rows + 1

    def test_dataset_path_consistency(self):
        ds = Dataset(features=np.zeros((4, 1)), labels=np.array([1.0, 2.0, 1.0, 5.0]))
        path = lasso_path(precondition(design_matrix(ds.features, intercept=False),
                                       require_kernel=False), ds.labels)
        assert order_by_activation(path).ranking[0] == 3
