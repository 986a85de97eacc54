"""Tests for cross-validation, importance, partial dependence and QQ residuals"""

import logging

import numpy as np
import pytest
from scipy import stats
from scipy.stats import spearmanr

from core.boosting import BoostParams, fit_gpd_boost
from core.diagnostics import (CvCurve, CvOptions, cv_deviance, default_grid, importance_report, model_exceedances,
                              partial_dependence, permutation_importance, qq_report, qq_residuals, relative_importance,
                              select_depths)
from core.errors import DomainError, PreconditionError
from core.gpd import GpdParams, deviance, fit_unconditional_mle, gpd_sample
from core.pipeline import compute_exceedances, fit_extreme_model
from core.quantile_forest import ForestConfig, fit_forest
from core.simulation import gen_model1, gen_model2, halton_points
from core.trees import RegressionTree


@pytest.fixture(scope="module")
def tail_data():
    rng = np.random.default_rng(77)
    X = rng.uniform(-1, 1, size=(300, 3))
    Z = np.where(X[:, 0] > 0, 2.0, 1.0) * gpd_sample(300, 1.0, 0.2, rng)
    return X, Z


@pytest.fixture(scope="module")
def tail_model(tail_data):
    X, Z = tail_data
    return fit_gpd_boost(X, Z, BoostParams(n_trees=25, depth_sigma=1, depth_gamma=1, lambda_scale=0.05))


def _stump(feature, gain, value=0.5):
    return RegressionTree([feature, -1, -1], [0.0, np.nan, np.nan], [1, -1, -1], [2, -1, -1],
                          [0.0, -value, value], [gain, 0.0, 0.0], [20, 10, 10], 1)


class TestCrossValidation:
    """Cross-validation deviance"""

    def test_curve_shape_and_argmin(self, tail_data):
        X, Z = tail_data
        curve = cv_deviance(X, Z, BoostParams(n_trees=10, depth_sigma=1, depth_gamma=0), folds=3, repeats=1)
        assert len(curve.dev) == 11
        assert curve.selected_trees == int(np.argmin(curve.dev))

    def test_deterministic(self, tail_data):
        X, Z = tail_data
        params = BoostParams(n_trees=5)
        a = cv_deviance(X, Z, params, folds=3, repeats=2, seed=4)
        b = cv_deviance(X, Z, params, folds=3, repeats=2, seed=4)
        np.testing.assert_array_equal(a.dev, b.dev)

    def test_additive_over_identical_repeats(self, tail_data):
        X, Z = tail_data
        params = BoostParams(n_trees=6, depth_sigma=1, depth_gamma=1)
        once = cv_deviance(X, Z, params, folds=3, repeats=1, fold_seeds=[42])
        twice = cv_deviance(X, Z, params, folds=3, repeats=2, fold_seeds=[42, 42])
        np.testing.assert_allclose(twice.dev, 2.0 * once.dev, rtol=1e-12)

    def test_leave_one_out_without_trees(self, tail_data):
        X, Z = tail_data
        Xs, Zs = X[:30], Z[:30]
        curve = cv_deviance(Xs, Zs, BoostParams(n_trees=0), folds=30, repeats=1, fold_seeds=[8])
        order = np.random.default_rng(8).permutation(np.flatnonzero(Zs > 0))
        expected = 0.0
        for k, i in enumerate(order):
            theta = fit_unconditional_mle(Zs[np.delete(order, k)])
            expected += deviance(Zs[i], theta.sigma, theta.gamma)
        assert curve.dev[0] == pytest.approx(expected, rel=1e-9)

    def test_argmin_shift_invariant(self):
        curve = CvCurve(depths=(1, 0), params=BoostParams(), dev=np.array([5.0, 3.0, 3.0, 4.0]))
        shifted = CvCurve(depths=(1, 0), params=BoostParams(), dev=curve.dev + 7.5)
        assert curve.selected_trees == shifted.selected_trees == 1

    def test_fold_too_small(self, tail_data):
        X, Z = tail_data
        with pytest.raises(PreconditionError):
            cv_deviance(X[:24], Z[:24], BoostParams(n_trees=2), folds=3, repeats=1)

    def test_select_single_entry_matches_curve(self, tail_data):
        X, Z = tail_data
        params = BoostParams(n_trees=6, depth_sigma=1, depth_gamma=0)
        curve = cv_deviance(X, Z, params, folds=3, repeats=1, seed=2)
        chosen = select_depths(X, Z, [(1, 0)], params, folds=3, repeats=1, seed=2)
        assert chosen.depths == (1, 0)
        assert chosen.n_trees == curve.selected_trees
        np.testing.assert_array_equal(chosen.curves[0].dev, curve.dev)

    def test_select_with_duplicates(self, tail_data):
        X, Z = tail_data
        params = BoostParams(n_trees=4)
        a = select_depths(X, Z, [(1, 0), (0, 0)], params, folds=3, repeats=1)
        b = select_depths(X, Z, [(1, 0), (0, 0), (1, 0)], params, folds=3, repeats=1)
        assert (a.depths, a.n_trees) == (b.depths, b.n_trees)
        assert len(b.to_frame()) == 15

    def test_options_validation(self):
        with pytest.raises(DomainError):
            CvOptions(folds=1)

    def test_logs_each_fold(self, tail_data, caplog):
        X, Z = tail_data
        with caplog.at_level(logging.DEBUG, logger="core.diagnostics"):
            cv_deviance(X, Z, BoostParams(n_trees=2), folds=3, repeats=2)
        folds = [r.getMessage() for r in caplog.records if r.getMessage().startswith("Fold ")]
        assert len(folds) == 6
        assert folds[0].startswith("Fold 1/3 of repeat 1")
        assert folds[-1].startswith("Fold 3/3 of repeat 2")


class TestImportance:
    """Permutation and relative importance"""

    def test_unused_feature_scores_zero(self, tail_data, tail_model):
        X, Z = tail_data
        used = set()
        for tree in tail_model.trees_sigma + tail_model.trees_gamma:
            used.update(tree.split_gains()[0].tolist())
        perm = permutation_importance(tail_model, X, Z, seed=1, normalise=False)
        rel = relative_importance(tail_model, normalise=False)
        for j in set(range(3)) - used:
            assert perm[j] == 0.0
            assert rel["sigma"][j] == 0.0 and rel["gamma"][j] == 0.0

    def test_normalised_maximum(self, tail_data, tail_model):
        X, Z = tail_data
        perm = permutation_importance(tail_model, X, Z, seed=1)
        assert perm.max() == pytest.approx(100.0)
        assert int(np.argmax(perm)) == 0

    def test_constant_model(self, tail_data):
        X, Z = tail_data
        model = fit_gpd_boost(X, Z, BoostParams(n_trees=0))
        assert np.all(permutation_importance(model, X, Z) == 0)
        rel = relative_importance(model)
        assert np.all(rel["sigma"] == 0) and np.all(rel["gamma"] == 0)

    def test_relative_importance_sums_gains(self, tail_model):
        model = tail_model.truncated(0)
        model.trees_sigma = [_stump(2, 3.0), _stump(2, 1.0)]
        model.trees_gamma = [_stump(2, 0.5), _stump(2, 0.5)]
        raw = relative_importance(model, normalise=False)
        np.testing.assert_array_equal(raw["sigma"], [0.0, 0.0, 4.0])
        np.testing.assert_array_equal(relative_importance(model)["gamma"], [0.0, 0.0, 100.0])

    def test_report_frame(self, fitted_model, small_model1):
        report = importance_report(fitted_model, small_model1.X, small_model1.Y, seed=3)
        frame = report.to_frame()
        assert list(frame.columns) == ["feature_index", "permutation", "relative_sigma", "relative_gamma"]
        assert list(frame["feature_index"]) == [1, 2, 3, 4]

    def test_report_uses_out_of_bag_exceedances(self, fitted_model, small_model1):
        X, Y = small_model1.X, small_model1.Y
        z = compute_exceedances(fitted_model.forest, X, Y, fitted_model.tau0)
        report = importance_report(fitted_model, X, Y, seed=3)
        np.testing.assert_array_equal(report.permutation, permutation_importance(fitted_model.boost, X, z, seed=3))


class TestModelExceedances:
    """Threshold exceedances for training and new rows"""

    def test_training_rows_use_out_of_bag_quantiles(self, fitted_model, small_model1):
        X, Y = small_model1.X, small_model1.Y
        np.testing.assert_array_equal(model_exceedances(fitted_model, X, Y),
                                      compute_exceedances(fitted_model.forest, X, Y, fitted_model.tau0))

    def test_new_rows_use_full_forest(self, fitted_model):
        fresh = gen_model1(50, seed=99, d=4)
        expected = np.maximum(fresh.Y - fitted_model.forest.predict_quantile(fresh.X, fitted_model.tau0), 0.0)
        np.testing.assert_array_equal(model_exceedances(fitted_model, fresh.X, fresh.Y), expected)

    def test_subset_of_training_rows_is_new_data(self, fitted_model, small_model1):
        X, Y = small_model1.X[:100], small_model1.Y[:100]
        expected = np.maximum(Y - fitted_model.forest.predict_quantile(X, fitted_model.tau0), 0.0)
        np.testing.assert_array_equal(model_exceedances(fitted_model, X, Y), expected)


class TestQqResiduals:
    """Exponential QQ residuals"""

    def test_plotting_positions(self, tail_data, tail_model):
        X, Z = tail_data
        frame = qq_residuals(tail_model, X, Z)
        m = int(np.sum(Z > 0))
        assert list(frame.columns) == ["theoretical", "residual"]
        assert len(frame) == m
        np.testing.assert_allclose(frame["theoretical"], -np.log(1.0 - np.arange(1, m + 1) / (m + 1)), rtol=1e-12)
        assert np.all(np.diff(frame["residual"]) >= 0)

    def test_exponential_fit_gives_scaled_values(self):
        X = np.zeros((4, 1))
        frame = qq_residuals(GpdParams(2.0, 0.0), X, np.array([3.0, 0.0, 1.0, 5.0]))
        np.testing.assert_allclose(frame["residual"], [0.5, 1.5, 2.5])

    def test_true_parameters_give_exponential_residuals(self):
        rng = np.random.default_rng(31)
        Z = gpd_sample(3000, 1.5, 0.2, rng)
        frame = qq_residuals(GpdParams(1.5, 0.2), np.zeros((3000, 2)), Z)
        assert stats.kstest(frame["residual"], "expon").pvalue > 0.001

    def test_constant_model_matches_theta0(self, tail_data):
        X, Z = tail_data
        model = fit_gpd_boost(X, Z, BoostParams(n_trees=0))
        np.testing.assert_allclose(qq_residuals(model, X, Z)["residual"],
                                   qq_residuals(model.theta0, X, Z)["residual"], rtol=1e-12)

    def test_no_exceedances(self, tail_model):
        with pytest.raises(PreconditionError):
            qq_residuals(tail_model, np.zeros((3, 3)), np.zeros(3))

    def test_length_mismatch(self, tail_model):
        with pytest.raises(DomainError):
            qq_residuals(tail_model, np.zeros((3, 3)), np.ones(4))

    def test_report_compares_boosted_and_constant(self, fitted_model, small_model1):
        X, Y = small_model1.X, small_model1.Y
        frame = qq_report(fitted_model, X, Y)
        z = model_exceedances(fitted_model, X, Y)
        assert list(frame.columns) == ["theoretical", "boosted", "constant"]
        assert len(frame) == int(np.sum(z > 0))
        np.testing.assert_array_equal(frame["constant"], qq_residuals(fitted_model.boost.theta0, X, z)["residual"])


class TestPartialDependence:
    """Partial dependence curves and surfaces"""

    def test_constant_model_gives_theta0(self, tail_data):
        X, Z = tail_data
        model = fit_gpd_boost(X, Z, BoostParams(n_trees=0))
        curve = partial_dependence(model, [1], np.linspace(-1, 1, 5), "gamma", X=X)
        np.testing.assert_allclose(curve, model.theta0.gamma)

    def test_depth_zero_is_flat(self, tail_data):
        X, Z = tail_data
        model = fit_gpd_boost(X, Z, BoostParams(n_trees=10, depth_sigma=0, depth_gamma=0))
        curve = partial_dependence(model, [0], np.linspace(-1, 1, 7), "sigma", X=X)
        assert np.ptp(curve) == 0

    def test_scale_steps_up(self, tail_data, tail_model):
        X, _ = tail_data
        curve = partial_dependence(tail_model, [0], np.array([-0.5, 0.5]), "sigma", X=X)
        assert curve[1] > curve[0]

    def test_surface_shape(self, fitted_model):
        grids = (np.linspace(-1, 1, 3), np.linspace(-1, 1, 4))
        surface = partial_dependence(fitted_model, [0, 1], grids, "sigma")
        assert surface.shape == (3, 4)

    def test_quantile_output(self, fitted_model):
        curve = partial_dependence(fitted_model, [0], np.array([-0.5, 0.5]), "quantile", tau=0.99,
                                   X=fitted_model.forest.X[:40])
        assert curve.shape == (2,)
        assert np.all(np.isfinite(curve))

    def test_quantile_needs_tau(self, fitted_model):
        with pytest.raises(DomainError):
            partial_dependence(fitted_model, [0], [0.0], "quantile")

    def test_default_grid(self):
        X = np.array([[0.0, 5.0], [2.0, 1.0]])
        np.testing.assert_allclose(default_grid(X, 1, 5), [1.0, 2.0, 3.0, 4.0, 5.0])


@pytest.mark.slow
class TestSimulatedDiagnostics:
    """Full-size selection and importance runs"""

    def test_selected_tree_count(self):
        hits = 0
        for seed in range(20):
            data = gen_model1(2000, seed=seed)
            forest = fit_forest(data.X, data.Y, ForestConfig(n_trees=200, seed=seed))
            z = compute_exceedances(forest, data.X, data.Y, 0.8)
            pos = z > 0
            curve = cv_deviance(data.X[pos], z[pos], BoostParams(n_trees=500, depth_sigma=1, depth_gamma=0),
                                folds=5, repeats=1, seed=seed, n_jobs=-1)
            hits += 50 <= curve.selected_trees <= 400
        assert hits >= 16

    def test_signal_feature_ranks_first(self):
        hits = 0
        for seed in range(20):
            data = gen_model1(2000, seed=seed)
            model = fit_extreme_model(data.X, data.Y, forest_config=ForestConfig(n_trees=200, seed=seed),
                                      boost_params=BoostParams(n_trees=150, depth_sigma=1, depth_gamma=1,
                                                               lambda_ratio=15))
            report = importance_report(model, data.X, data.Y, seed=seed)
            hits += int(np.argmax(report.permutation)) == 0
        assert hits >= 18

    def test_model2_shape_surface(self):
        data = gen_model2(5000, seed=3)
        model = fit_extreme_model(data.X, data.Y, forest_config=ForestConfig(n_trees=300, seed=3),
                                  boost_params=BoostParams(n_trees=200, depth_sigma=3, depth_gamma=1))
        _, gamma = model.boost.predict_params(halton_points(100, 10))
        assert np.mean((gamma >= 0.0) & (gamma <= 0.45)) >= 0.9
        grid = np.linspace(-1, 1, 11)
        curve = partial_dependence(model, [0], grid, "gamma")
        assert spearmanr(grid, curve).correlation < 0
