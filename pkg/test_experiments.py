"""Experiment tests.

The subspace and rank-recovery runs take a few seconds each, so they are
trained once per test case.
"""

# run these tests like:
#
#    python -m unittest test_experiments.py

import dataclasses
from unittest import TestCase

import numpy as np

from errors import PreconditionError
from experiments import (NOISY_TOP_ANGLE, RankRecoveryExperiment, SubspaceExperiment,
                         experiment_rank_recovery, experiment_subspace_alignment, loss_compare,
                         matched_ranks)
from training import TrainConfig


class SubspaceAlignmentTestCase(TestCase):
    """Test neuron alignment with the data plane"""

    @classmethod
    def setUpClass(cls):
        cls.report = experiment_subspace_alignment(SubspaceExperiment())

    def test_neurons_lie_in_plane(self):
        self.assertTrue(self.report.aligned)
        self.assertLessEqual(self.report.out_of_plane_ratio, 1e-3)
        self.assertLessEqual(self.report.plane_angle, 1e-2)

    def test_projection_does_not_hurt(self):
        """Projecting first-layer weights onto the plane never raises the objective"""

        self.assertLessEqual(self.report.projected_objective, self.report.objective + 1e-12)

    def test_top_direction_survives_noise(self):
        self.assertGreater(self.report.noisy_neuron_angle, self.report.top_direction_angle)
        self.assertLessEqual(self.report.noisy_top_direction_angle, NOISY_TOP_ANGLE)

    def test_report_dict(self):
        document = self.report.to_dict()

        self.assertNotIn("trace", document)
        self.assertEqual(document["weight_decay"], 0.01)
        self.assertEqual(len(self.report.trace), 30001)


class SubspaceInputsTestCase(TestCase):
    SHORT = TrainConfig(optimizer="SGD", learning_rate=0.03, steps=20, weight_decay=0.0)

    def test_full_rank_inputs_rejected(self):
        rng = np.random.default_rng(0)
        data = (rng.standard_normal((10, 3)), rng.standard_normal(10))
        config = SubspaceExperiment(n_samples=10, train=self.SHORT)

        with self.assertRaises(PreconditionError):
            experiment_subspace_alignment(config, data=data)

    def test_without_trace(self):
        config = SubspaceExperiment(weight_decay=0.0, train=self.SHORT)

        report = experiment_subspace_alignment(config, record_trace=False)

        self.assertIsNone(report.trace)
        self.assertEqual(report.weight_decay, 0.0)


############################################################################
# RANK RECOVERY AND LOSS COMPARISON


class RankRecoveryTestCase(TestCase):
    """Test removing the top 2r components with rank-r adapters"""

    @classmethod
    def setUpClass(cls):
        cls.report = experiment_rank_recovery(RankRecoveryExperiment())

    def test_lora_stays_above_floor(self):
        """Spectrum 8..1 with r = 2 gives a floor of sqrt(6^2 + 5^2)"""

        self.assertAlmostEqual(self.report.lora_floor, np.sqrt(61.0), places=10)
        self.assertGreaterEqual(self.report.lora_distance, 0.95 * self.report.lora_floor)

    def test_spectral_a_reaches_target(self):
        """SpectralA of rank r fits the rank-2r change LoRA of rank r cannot"""

        self.assertLessEqual(self.report.spectral_distance, 1e-4 * self.report.target_norm)
        self.assertLess(self.report.spectral_distance, self.report.lora_floor)

    def test_construction_is_exact(self):
        self.assertLessEqual(self.report.certificate_distance, 1e-6)
        self.assertIn("certificate_distance", self.report.to_dict())

    def test_target_norm(self):
        self.assertAlmostEqual(self.report.target_norm, np.sqrt(16.0 + 9.0 + 4.0 + 1.0), places=10)

    def test_traces_kept_per_run(self):
        self.assertEqual(set(self.report.traces), {"LoRA", "SpectralA", "SpectralA-certified", "SpectralA-bottom"})
        self.assertIn("lora_floor_ratio", self.report.to_dict())


class RecoveryConfigTestCase(TestCase):
    def test_custom_spectrum(self):
        config = RankRecoveryExperiment(n=3, m=4, rank=1, singular_values=(3.0, 2.0, 1.0))

        np.testing.assert_array_equal(config.spectrum(), [3.0, 2.0, 1.0])

    def test_bad_spectrum(self):
        for values in ((1.0, 2.0, 3.0), (3.0, 2.0), (3.0, 2.0, 0.0)):
            with self.subTest(values=values):
                with self.assertRaises(PreconditionError):
                    RankRecoveryExperiment(n=3, m=4, singular_values=values).spectrum()

    def test_rank_too_large(self):
        with self.assertRaises(PreconditionError):
            experiment_rank_recovery(RankRecoveryExperiment(n=4, m=4, rank=3))


class LossCompareTestCase(TestCase):
    """Test loss curves at matched budgets"""

    def test_matched_ranks(self):
        ranks = matched_ranks(8, 12, 2)

        self.assertEqual(ranks["SpectralR"], 4)
        self.assertEqual(ranks["OFT"], 2)
        self.assertEqual(ranks["LoRA"], 2)

    def test_matched_ranks_large(self):
        ranks = matched_ranks(1024, 1024, 1)

        self.assertEqual(ranks["SpectralR"], 32)
        self.assertEqual(ranks["OFT"], 23)

    def test_rank_zero_curves_stay_at_base_loss(self):
        """With r = 0 the target is the base itself, so every curve stays at the base loss"""

        base = RankRecoveryExperiment()
        config = dataclasses.replace(base, rank=0, train=dataclasses.replace(base.train, steps=20))

        report = loss_compare(config)

        stuck = report.curves["LoRA"]
        self.assertTrue(np.all(stuck == stuck[0]))
        for name in ("SpectralA", "SpectralR", "OFT"):
            np.testing.assert_array_equal(report.curves[name], stuck)
        self.assertEqual(report.budgets["LoRA"], 0)
        self.assertEqual(report.lora_floor_loss, 0.0)
        self.assertLessEqual(stuck[0], 1e-20)
        for name in ("SVDiff", "Full"):
            np.testing.assert_allclose(report.curves[name], stuck, rtol=0, atol=1e-20)

    def test_rows(self):
        base = RankRecoveryExperiment()
        config = dataclasses.replace(base, train=dataclasses.replace(base.train, steps=5))

        rows = list(loss_compare(config).rows())

        self.assertEqual(rows[0], ["step", "LoRA", "SpectralA", "SpectralR", "OFT", "SVDiff", "Full"])
        self.assertEqual(len(rows), 7)
        self.assertEqual(rows[1][0], 0)
