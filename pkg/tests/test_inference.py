#!/usr/bin/env python3
"""
Nested sampling, model selection and posterior summaries
"""

import sys
import json
import math
import unittest
from pathlib import Path

import numpy as np
from scipy.stats import norm

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))

from twinid_beam import BeamGeometry, BeamModel, ThetaS, default_trucks
from twinid_inference import (IdentificationProblem, ModelEvidence, NestedRun, PriorBox, SamplerConfig,
                              bayes_factor, default_prior_box, map_estimate, model_posteriors, nested_sample,
                              posterior_predictive, prior_transform, select_models, summarize_run,
                              weighted_hdi)
from twinid_kernels import SpaceTimeGrid
from twinid_likelihood import ProbModelSpec, loglik_lanes
from twinid_shared import NoValidRegionError, ParameterDomainError, UnsupportedConfigurationError

SLOW_TESTS = False


def gaussian_loglik(theta):
    theta = np.asarray(theta)
    return float(-0.5 * theta @ theta - 0.5 * theta.size * math.log(2.0 * math.pi))


def make_run(samples, logl, logwt=None, names=("a",)):
    samples = np.asarray(samples, dtype=float).reshape(-1, len(names))
    logl = np.asarray(logl, dtype=float)
    logwt = np.zeros(logl.size) if logwt is None else np.asarray(logwt, dtype=float)
    return NestedRun(names=tuple(names), samples=samples, logl=logl, logwt=logwt, logz=0.0, logz_err=0.0,
                     information=0.0, nfe=logl.size, n_live=logl.size, n_iter=0, termination="dlogz",
                     acceptance=1.0)


class TestPriors(unittest.TestCase):

    def test_prior_transform(self):
        box = default_prior_box("IID-M")
        self.assertEqual(box.names[:5], ThetaS.NAMES)
        np.testing.assert_array_equal(prior_transform(np.zeros(box.dim), box), box.lower)
        u = np.full(box.dim, 0.5)
        self.assertEqual(prior_transform(u, box)[0], 7.0)
        u = np.ones(box.dim)
        self.assertEqual(prior_transform(u, box)[box.names.index("C_v")], 1.0)

    def test_probabilistic_only(self):
        box = default_prior_box("EXP-A", infer_structural=False)
        self.assertEqual(box.names, ("sigma_model", "sigma_meas", "l_corr_t", "l_corr_x"))

    def test_overrides(self):
        box = default_prior_box("IID-A", False, {"sigma_model": (0.5, 2.0)})
        self.assertEqual(box.bounds(), {"sigma_model": (0.5, 2.0)})
        with self.assertRaises(ParameterDomainError):
            default_prior_box("IID-A", False, {"l_corr_t": (0.0, 10.0)})
        box = default_prior_box("IID-A", False, {"l_corr_t": (0.0, 10.0)}, strict=False)
        self.assertEqual(box.names, ("sigma_model",))

    def test_empty_interval_rejected(self):
        with self.assertRaises(ParameterDomainError):
            PriorBox(("a",), np.array([1.0]), np.array([1.0]))


class TestNestedSampler(unittest.TestCase):

    def test_constant_likelihood(self):
        box = PriorBox(("a", "b"), np.zeros(2), np.ones(2))
        run = nested_sample(lambda th: -3.25, box, SamplerConfig(n_live=50, seed=1))
        self.assertAlmostEqual(run.logz, -3.25, delta=1e-6)
        self.assertEqual(run.termination, "dlogz")
        self.assertAlmostEqual(run.weights().sum(), 1.0, places=12)

    def test_gaussian_in_box(self):
        box = PriorBox(("a", "b"), np.full(2, -5.0), np.full(2, 5.0))
        n_live, tol = (500, 0.15) if SLOW_TESTS else (200, 0.3)
        run = nested_sample(gaussian_loglik, box, SamplerConfig(n_live=n_live, seed=7))
        expected = 2.0 * math.log(norm.cdf(5.0) - norm.cdf(-5.0)) - math.log(100.0)
        self.assertAlmostEqual(expected, -4.6052, places=3)
        self.assertLessEqual(abs(run.logz - expected), max(tol, 3.0 * run.logz_err))
        self.assertGreater(run.logz_err, 0.0)
        np.testing.assert_allclose(run.mean(), [0.0, 0.0], atol=0.25)
        np.testing.assert_allclose(run.std(), [1.0, 1.0], atol=0.25)

    def test_rejected_evaluations_count_as_zero_likelihood(self):
        def half_plane(theta):
            if theta[0] < 0.0:
                raise ParameterDomainError("outside support")
            return 0.0
        box = PriorBox(("a",), np.array([-1.0]), np.array([1.0]))
        run = nested_sample(half_plane, box, SamplerConfig(n_live=50, seed=2))
        self.assertAlmostEqual(run.logz, math.log(0.5), delta=0.4)
        self.assertTrue(np.all(run.samples[np.isfinite(run.logl), 0] >= 0.0))

    def test_no_valid_region(self):
        box = PriorBox(("a",), np.zeros(1), np.ones(1))
        with self.assertRaises(NoValidRegionError):
            nested_sample(lambda th: -np.inf, box, SamplerConfig(n_live=10))

    def test_configuration_errors_propagate(self):
        def no_path(theta):
            raise UnsupportedConfigurationError("no likelihood path")
        box = PriorBox(("a",), np.zeros(1), np.ones(1))
        with self.assertRaises(UnsupportedConfigurationError):
            nested_sample(no_path, box, SamplerConfig(n_live=10))

    def test_linear_gaussian_posterior_mean(self):
        y = np.array([1.2, 0.7, 1.9, 1.4])
        box = PriorBox(("a",), np.array([-10.0]), np.array([10.0]))
        n_live = 500 if SLOW_TESTS else 100
        run = nested_sample(lambda th: -0.5 * float(np.sum((y - th[0]) ** 2)), box,
                            SamplerConfig(n_live=n_live, seed=9))
        # flat prior, unit noise: posterior N(mean(y), 1 / n)
        stderr = 0.5 / math.sqrt(run.ess())
        tol = 3.0 * stderr if SLOW_TESTS else max(3.0 * stderr, 0.15)
        self.assertLessEqual(abs(run.mean()[0] - y.mean()), tol)
        self.assertAlmostEqual(run.std()[0], 0.5, delta=0.1)

    @unittest.skipUnless(SLOW_TESTS, "50 sampler runs at n_live=500")
    def test_gaussian_in_box_calibration(self):
        box = PriorBox(("a", "b"), np.full(2, -5.0), np.full(2, 5.0))
        expected = 2.0 * math.log(norm.cdf(5.0) - norm.cdf(-5.0)) - math.log(100.0)
        hits = 0
        for seed in range(50):
            run = nested_sample(gaussian_loglik, box, SamplerConfig(n_live=500, seed=seed))
            delta = abs(run.logz - expected)
            hits += delta <= 0.15 and delta <= 3.0 * run.logz_err
        self.assertGreaterEqual(hits, 45)

    def test_too_few_live_points(self):
        box = PriorBox(("a", "b", "c"), np.zeros(3), np.ones(3))
        with self.assertRaises(ParameterDomainError):
            nested_sample(lambda th: 0.0, box, SamplerConfig(n_live=5))

    def test_reproducible(self):
        box = PriorBox(("a", "b"), np.full(2, -5.0), np.full(2, 5.0))
        config = SamplerConfig(n_live=40, seed=11, dlogz=0.1)
        a = nested_sample(gaussian_loglik, box, config)
        b = nested_sample(gaussian_loglik, box, config)
        self.assertEqual(a.logz, b.logz)
        self.assertEqual(a.nfe, b.nfe)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.logwt, b.logwt)

    def test_threaded_walks(self):
        box = PriorBox(("a", "b"), np.full(2, -5.0), np.full(2, 5.0))
        run = nested_sample(gaussian_loglik, box, SamplerConfig(n_live=40, seed=3, dlogz=0.1, workers=2))
        self.assertEqual(run.worker_count, 2)
        self.assertTrue(math.isfinite(run.logz))

    def test_map_is_best_sample(self):
        box = PriorBox(("a", "b"), np.zeros(2), np.ones(2))
        run = nested_sample(lambda th: -10.0 * float(np.sum((th - 0.3) ** 2)), box,
                            SamplerConfig(n_live=30, seed=4, dlogz=0.1))
        theta = map_estimate(run)
        self.assertTrue(box.contains(theta))
        best = run.logl[np.all(run.samples == theta, axis=1)][0]
        self.assertTrue(np.all(best >= run.logl))

    def test_archive_round_trip(self):
        box = PriorBox(("a",), np.zeros(1), np.ones(1))
        run = nested_sample(lambda th: -float(th[0]), box, SamplerConfig(n_live=20, seed=5, dlogz=0.1))
        restored = NestedRun.from_dict(json.loads(json.dumps(run.to_dict())))
        self.assertEqual(restored.logz, run.logz)
        np.testing.assert_array_equal(restored.samples, run.samples)
        self.assertEqual(summarize_run(restored), summarize_run(run))


class TestModelSelection(unittest.TestCase):

    def test_posteriors(self):
        np.testing.assert_allclose(model_posteriors([0.0, 0.0]), [0.5, 0.5])
        np.testing.assert_allclose(model_posteriors([0.0, math.log(2.0), math.log(7.0)]), [0.1, 0.2, 0.7])
        p = model_posteriors([0.0, 1000.0])
        self.assertTrue(np.all(np.isfinite(p)))
        np.testing.assert_allclose(p, [0.0, 1.0], atol=1e-300)

    def test_posteriors_sum_and_permutation(self):
        logzs = np.array([-12.3, -10.1, -15.0, -9.9])
        p = model_posteriors(logzs)
        self.assertAlmostEqual(p.sum(), 1.0, delta=1e-12)
        perm = [2, 0, 3, 1]
        np.testing.assert_allclose(model_posteriors(logzs[perm]), p[perm], rtol=1e-12)

    def test_posteriors_with_priors(self):
        np.testing.assert_allclose(model_posteriors([0.0, 0.0], [0.25, 0.75]), [0.25, 0.75])
        with self.assertRaises(ParameterDomainError):
            model_posteriors([0.0, 0.0], [0.5, 0.6])

    def test_bayes_factor_labels(self):
        self.assertEqual(bayes_factor(0.0, 0.0), (1.0, "Barely worth mentioning"))
        self.assertEqual(bayes_factor(1.2 * math.log(10.0), 0.0)[1], "Strong")
        self.assertEqual(bayes_factor(math.log(0.5), 0.0)[1], "Negative")
        self.assertEqual(bayes_factor(0.7 * math.log(10.0), 0.0)[1], "Substantial")
        self.assertEqual(bayes_factor(1.7 * math.log(10.0), 0.0)[1], "Very strong")
        self.assertEqual(bayes_factor(2.5 * math.log(10.0), 0.0)[1], "Decisive")
        self.assertEqual(bayes_factor(1000.0, 0.0), (math.inf, "Decisive"))

    def test_priors_cancel(self):
        R, _ = bayes_factor(2.0, 1.0, 0.9, 0.1)
        self.assertAlmostEqual(R, math.e, places=12)

    def test_reference_models_excluded(self):
        entries = [ModelEvidence("IID-A", 0.0, 0.1, 100), ModelEvidence("EXP-A", math.log(3.0), 0.1, 100),
                   ModelEvidence("EXP-A", 100.0, 0.1, 100, reference=True)]
        report = select_models(entries)
        self.assertEqual(report.best.shorthand, "EXP-A")
        self.assertFalse(report.best.reference)
        self.assertAlmostEqual(entries[0].posterior_prob, 0.25)
        self.assertAlmostEqual(entries[1].posterior_prob, 0.75)
        self.assertTrue(math.isnan(entries[2].posterior_prob))
        self.assertAlmostEqual(entries[0].bayes_factor_vs_best, 3.0)
        self.assertEqual(entries[1].jeffreys_label, "Barely worth mentioning")


class TestPosteriorSummaries(unittest.TestCase):

    def test_map_single_sample(self):
        np.testing.assert_array_equal(map_estimate(make_run([0.4], [-1.0])), [0.4])

    def test_map_ties_first(self):
        run = make_run([0.1, 0.2, 0.3], [1.0, 3.0, 3.0])
        np.testing.assert_array_equal(map_estimate(run), [0.2])

    def test_hdi_of_uniform(self):
        values = np.linspace(0.0, 1.0, 10001)
        lo, hi = weighted_hdi(values, np.ones(values.size), 0.9)
        self.assertAlmostEqual(hi - lo, 0.9, delta=0.01)

    def test_hdi_of_normal(self):
        values = np.random.default_rng(0).standard_normal(20000)
        lo, hi = weighted_hdi(values, np.ones(values.size), 0.9)
        self.assertAlmostEqual(lo, -1.645, delta=0.06)
        self.assertAlmostEqual(hi, 1.645, delta=0.06)

    def test_hdi_respects_weights(self):
        lo, hi = weighted_hdi(np.array([0.0, 1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0, 0.0]), 0.9)
        self.assertEqual((lo, hi), (2.0, 2.0))

    def test_summary_rows(self):
        run = make_run([[0.0, 1.0], [1.0, 3.0]], [0.0, 1.0], names=("a", "b"))
        rows = summarize_run(run)
        self.assertEqual([r["parameter"] for r in rows], ["a", "b"])
        self.assertEqual(set(rows[0]), {"parameter", "mean", "std", "hdi_low", "hdi_high", "map"})
        self.assertAlmostEqual(rows[1]["mean"], 2.0)
        self.assertAlmostEqual(rows[1]["std"], 1.0)
        self.assertEqual(rows[1]["map"], 3.0)


class TestIdentificationProblem(unittest.TestCase):

    def setUp(self):
        self.grid = SpaceTimeGrid([10.0, 20.0], [0.0, 5.0])
        self.y_model = np.array([4.0, 5.0, 6.0, 7.0])

    def fixed_problem(self, y_obs=None):
        box = default_prior_box("IID-A", infer_structural=False)
        return IdentificationProblem("IID-A", self.grid, y_obs, box, y_model=self.y_model)

    def test_loglik_matches_likelihood(self):
        y_obs = self.y_model + np.array([0.1, -0.3, 0.2, 0.0])
        problem = self.fixed_problem(y_obs)
        spec = ProbModelSpec.from_shorthand("IID-A", {"sigma_model": 1.3})
        self.assertAlmostEqual(problem.loglik([1.3]), loglik_lanes(y_obs, self.y_model, spec, self.grid),
                               places=12)

    def test_fixed_parameters_merged(self):
        box = default_prior_box("EXP-A", False)
        box = PriorBox(box.names[:2], box.lower[:2], box.upper[:2])
        problem = IdentificationProblem("EXP-A", self.grid, None, box, y_model=self.y_model,
                                        fixed_theta_c={"l_corr_t": 12.0, "l_corr_x": 30.0})
        spec, theta_s = problem.split([1.0, 0.2])
        self.assertEqual(spec.theta_c.as_dict(),
                         {"sigma_model": 1.0, "sigma_meas": 0.2, "l_corr_t": 12.0, "l_corr_x": 30.0})
        self.assertEqual(theta_s, ThetaS())

    def test_structural_inference_uses_beam(self):
        geometry = BeamGeometry(span_lengths=(20.0, 30.0, 20.0))
        grid = SpaceTimeGrid([10.0, 35.0], [5.0, 30.0, 60.0])
        beam = BeamModel(geometry, grid.x_coords)
        trucks = default_trucks(geometry)
        y_true = beam.response(ThetaS(), trucks, grid)
        box = default_prior_box("IID-A", infer_structural=True)
        problem = IdentificationProblem("IID-A", grid, y_true, box, n_lanes=2, beam=beam, trucks=trucks)
        theta = np.concatenate([[7.0, 7.0, 7.0, 7.0, 4.0], [0.5]])
        self.assertTrue(math.isfinite(problem.loglik(theta)))
        self.assertGreater(problem.loglik(theta), problem.loglik(np.concatenate([[4.0] * 4, [0.0], [0.5]])))

    def test_structural_without_beam_rejected(self):
        with self.assertRaises(ParameterDomainError):
            IdentificationProblem("IID-A", self.grid, None, default_prior_box("IID-A"))

    def test_fixed_response_needs_model_or_beam(self):
        with self.assertRaises(ParameterDomainError):
            IdentificationProblem("IID-A", self.grid, None, default_prior_box("IID-A", infer_structural=False))

    def test_unsupported_path_reaches_caller(self):
        grid = SpaceTimeGrid([10.0, 20.0], np.arange(6.0))
        y = np.full(grid.size, 5.0)
        box = default_prior_box("RBF-M", infer_structural=False)
        problem = IdentificationProblem("RBF-M", grid, y, box, y_model=y, n_dense_max=4)
        with self.assertRaises(UnsupportedConfigurationError):
            nested_sample(problem.loglik, box, SamplerConfig(n_live=20, seed=1))

    def test_predictive_zero_noise(self):
        draws = posterior_predictive(make_run([0.0], [0.0], names=("sigma_model",)), self.fixed_problem(), 5)
        np.testing.assert_array_equal(draws, np.tile(self.y_model, (5, 1)))

    def test_predictive_variance(self):
        run = make_run([1.5], [0.0], names=("sigma_model",))
        draws = posterior_predictive(run, self.fixed_problem(), 2000, seed=3)
        self.assertEqual(draws.shape, (2000, 4))
        self.assertAlmostEqual((draws - self.y_model).var() / 2.25, 1.0, delta=0.08)

    def test_predictive_mixes_posterior(self):
        run = make_run([0.5, 2.0], [0.0, 0.0], logwt=[math.log(0.75), math.log(0.25)], names=("sigma_model",))
        draws = posterior_predictive(run, self.fixed_problem(), 4000, seed=4)
        expected = 0.75 * 0.25 + 0.25 * 4.0
        self.assertAlmostEqual((draws - self.y_model).var() / expected, 1.0, delta=0.15)
        np.testing.assert_allclose(draws.mean(axis=0), self.y_model, atol=0.1)


if __name__ == "__main__":
    unittest.main()
