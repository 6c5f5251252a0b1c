"""Rank capacity tests."""

# run these tests like:
#
#    python -m unittest test_rank_capacity.py

from unittest import TestCase

import numpy as np

from adapters import AdapterKind, effective_weight
from errors import PreconditionError
from generator.helpers import matrix_with_spectrum, well_conditioned_matrix
from linalg import numerical_rank, svd_thin
from rank_capacity import construct_min_rank, rank_capacity_empirical, theoretical_min_rank


class ConstructMinRankTestCase(TestCase):
    """Test the minimum-rank witnesses"""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.w = well_conditioned_matrix(self.rng, 4, 5)
        self.d = svd_thin(self.w)

    def test_lora_removes_r_directions(self):
        # r = k leaves only rounding noise, which a relative tolerance cannot rank
        for r in range(0, 4):
            state = construct_min_rank(AdapterKind.LORA, self.w, r)
            self.assertEqual(numerical_rank(effective_weight(self.w, state)), 4 - r)

    def test_spectral_a_removes_2r_directions(self):
        for r in range(0, 2):
            state = construct_min_rank(AdapterKind.SPECTRAL_A, self.d, r)
            self.assertEqual(numerical_rank(effective_weight(self.d, state)), 4 - 2 * r)

    def test_padded_diagonal_base(self):
        w = np.hstack([np.diag([4.0, 3.0, 2.0, 1.0]), np.zeros((4, 2))])
        d = svd_thin(w)

        lora = effective_weight(w, construct_min_rank(AdapterKind.LORA, w, 1))
        spectral = effective_weight(d, construct_min_rank(AdapterKind.SPECTRAL_A, d, 1))

        self.assertEqual(numerical_rank(lora), 3)
        self.assertEqual(numerical_rank(spectral), 2)
        np.testing.assert_allclose(svd_thin(spectral).s[:2], [2.0, 1.0], atol=1e-12)

    def test_spectral_a_rank_limit(self):
        with self.assertRaises(PreconditionError):
            construct_min_rank(AdapterKind.SPECTRAL_A, self.d, 3)

    def test_rank_deficient_base_rejected(self):
        w = matrix_with_spectrum(self.rng, 4, 5, [2.0, 1.0])

        with self.assertRaises(PreconditionError):
            construct_min_rank(AdapterKind.LORA, w, 1)

    def test_no_construction_for_other_kinds(self):
        with self.assertRaises(PreconditionError):
            construct_min_rank(AdapterKind.OFT, self.w, 1)


class RankCapacityTestCase(TestCase):
    """Test sampled rank ranges"""

    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.w = well_conditioned_matrix(self.rng, 6, 8)

    def test_lora(self):
        report = rank_capacity_empirical(AdapterKind.LORA, self.w, 2, trials=20)

        self.assertEqual(report.min_rank_achieved, 4)
        self.assertEqual(report.max_rank_achieved, 6)
        self.assertEqual(report.capacity, 2)
        self.assertEqual(report.to_dict()["theoretical_min_rank"], 4)
        self.assertTrue(report.to_dict()["certified"])

    def test_spectral_a(self):
        report = rank_capacity_empirical(AdapterKind.SPECTRAL_A, self.w, 2, trials=20)

        self.assertEqual(report.min_rank_achieved, 2)
        self.assertEqual(report.capacity, 4)

    def test_gaussian_bases(self):
        """SpectralA reaches twice the rank reduction of LoRA at the same r"""

        for seed in range(20):
            w = np.random.default_rng(seed).standard_normal((8, 12))
            for r in (1, 2, 3):
                with self.subTest(seed=seed, rank=r):
                    lora = rank_capacity_empirical(AdapterKind.LORA, w, r, trials=3)
                    spectral = rank_capacity_empirical(AdapterKind.SPECTRAL_A, w, r, trials=3)
                    self.assertEqual(lora.capacity, r)
                    self.assertEqual(spectral.capacity, 2 * r)

    def test_orthogonal_kinds_keep_rank(self):
        for kind, r in ((AdapterKind.SPECTRAL_R, 3), (AdapterKind.OFT, 2), (AdapterKind.OFT, 6)):
            with self.subTest(kind=kind.value, rank=r):
                report = rank_capacity_empirical(kind, self.w, r, trials=10)
                self.assertEqual(report.capacity, 0)
                self.assertEqual(report.min_rank_achieved, 6)
                self.assertIsNone(report.certificate)

    def test_svdiff_and_full_reach_zero(self):
        for kind in (AdapterKind.SVDIFF, AdapterKind.FULL):
            with self.subTest(kind=kind.value):
                report = rank_capacity_empirical(kind, self.w, 0, trials=5)
                self.assertEqual(report.min_rank_achieved, 0)
                self.assertEqual(report.max_rank_achieved, 6)

    def test_trials_are_reproducible(self):
        first = rank_capacity_empirical(AdapterKind.VERA, self.w, 2, trials=8, seed=4)
        second = rank_capacity_empirical(AdapterKind.VERA, self.w, 2, trials=8, seed=4)

        self.assertEqual(first.to_dict(), second.to_dict())

    def test_strict_rejects_rank_deficient_base(self):
        w = matrix_with_spectrum(self.rng, 6, 8, [3.0, 2.0, 1.0])

        with self.assertRaises(PreconditionError):
            rank_capacity_empirical(AdapterKind.LORA, w, 1, trials=2)

    def test_lenient_reports_rank_deficient_base(self):
        w = matrix_with_spectrum(self.rng, 6, 8, [3.0, 2.0, 1.0])

        report = rank_capacity_empirical(AdapterKind.LORA, w, 1, trials=5, strict=False)

        self.assertFalse(report.full_rank)
        self.assertEqual(report.base_rank, 3)
        self.assertIsNone(report.certificate)

    def test_theoretical_min_rank(self):
        self.assertEqual(theoretical_min_rank(AdapterKind.LORA, 10, 3), 7)
        self.assertEqual(theoretical_min_rank(AdapterKind.SPECTRAL_A, 10, 3), 4)
        self.assertEqual(theoretical_min_rank(AdapterKind.SPECTRAL_A, 10, 6), 0)
        self.assertEqual(theoretical_min_rank(AdapterKind.OFT, 10, 2), 10)
        self.assertIsNone(theoretical_min_rank(AdapterKind.VERA, 10, 2))
