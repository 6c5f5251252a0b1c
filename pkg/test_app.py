"""Command-line app tests."""

# run these tests like:
#
#    python -m unittest test_app.py

import json
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
from click.testing import CliRunner

from adapters import AdapterKind, init_adapter
from app import app
from containers import read_adapter, read_json, read_matrix, write_adapter, write_json, write_matrix
from generator.helpers import well_conditioned_matrix
from linalg import ColumnSelect, svd_thin


class AppTestCase(TestCase):
    """Base with a scratch directory and a CLI runner."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.out = self.dir / "out"
        self.runner = CliRunner()
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self.tmp.cleanup()

    def invoke(self, *args, out=None):
        return self.runner.invoke(app, ["--out-dir", str(out or self.out), *map(str, args)])

    def matrix(self, name, w):
        write_matrix(self.dir / name, w)
        return self.dir / f"{name}.json"

    def config(self, name, document):
        return write_json(self.dir / name, document)


class DecomposeTestCase(AppTestCase):
    """Test decompose and replay"""

    def test_decompose(self):
        path = self.matrix("w", self.rng.standard_normal((5, 3)))

        result = self.invoke("decompose", path)

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("5x3: k=3", result.output)
        manifest = read_json(self.out / "manifest.json")
        self.assertEqual(manifest["command"], "decompose")
        self.assertIn("decomposition/u.bin", manifest["artifacts"])
        self.assertIn("reconstruction_error", manifest["measurements"])

    def test_replay_reproduces_artifacts(self):
        path = self.matrix("w", self.rng.standard_normal((6, 6)))
        self.invoke("decompose", path)

        result = self.invoke("replay", self.out / "manifest.json", out=self.dir / "again")

        self.assertEqual(result.exit_code, 0, result.output)
        first = read_json(self.out / "manifest.json")
        second = read_json(self.dir / "again" / "manifest.json")
        self.assertEqual(first["artifacts"], second["artifacts"])
        self.assertEqual(first["params"], second["params"])

    def test_missing_matrix(self):
        result = self.invoke("decompose", self.dir / "nothing.json")

        self.assertEqual(result.exit_code, 3)
        self.assertIn("error:", result.output)

    def test_tolerance_failure(self):
        path = self.matrix("w", self.rng.standard_normal((5, 5)))

        result = self.runner.invoke(app, ["--out-dir", str(self.out), "--tol", "0", "decompose", str(path)])

        self.assertEqual(result.exit_code, 4)

    def test_usage_error(self):
        result = self.invoke("decompose")

        self.assertEqual(result.exit_code, 2)


############################################################################
# TRAIN, MERGE, FUSE AND ANALYSIS COMMANDS


class TrainMergeTestCase(AppTestCase):
    """Test train and merge"""

    def setUp(self):
        super().setUp()
        w = well_conditioned_matrix(self.rng, 4, 5)
        self.base = self.matrix("base", w)
        self.target = self.matrix("target", w + 0.3 * self.rng.standard_normal((4, 5)))

    def test_train_then_merge(self):
        config = self.config("train.json", {"schema_version": 1, "optimizer": "AdamW", "learning_rate": 0.05,
                                            "steps": 40, "adapter": {"kind": "SpectralA", "rank": 2}})

        result = self.invoke("train", self.base, self.target, "--config", config)

        self.assertEqual(result.exit_code, 0, result.output)
        lines = (self.out / "trace.csv").read_text().splitlines()
        self.assertEqual(len(lines), 42)
        state = read_adapter(self.out / "adapter")
        self.assertIs(state.kind, AdapterKind.SPECTRAL_A)

        merged_out = self.dir / "merged_out"
        result = self.invoke("merge", self.base, self.out / "adapter", out=merged_out)

        self.assertEqual(result.exit_code, 0, result.output)
        np.testing.assert_array_equal(read_matrix(merged_out / "merged"), read_matrix(self.out / "merged"))

    def test_invalid_config(self):
        config = self.config("train.json", {"schema_version": 1, "steps": -3, "adapter": {"kind": "Nope"}})

        result = self.invoke("train", self.base, self.target, "--config", config)

        self.assertEqual(result.exit_code, 3)
        self.assertIn("steps", result.output)
        self.assertIn("adapter-kind", result.output)

    def test_divergence_keeps_trace(self):
        config = self.config("train.json", {"schema_version": 1, "optimizer": "SGD", "learning_rate": 10.0,
                                            "steps": 500, "adapter": {"kind": "Full", "rank": 0}})

        result = self.invoke("train", self.base, self.target, "--config", config)

        self.assertEqual(result.exit_code, 4)
        self.assertTrue((self.out / "trace.csv").exists())

    def test_merge_rejects_other_base(self):
        other = svd_thin(well_conditioned_matrix(self.rng, 4, 5))
        write_adapter(self.dir / "adapter", init_adapter(AdapterKind.SPECTRAL_R, other, 1))

        result = self.invoke("merge", self.base, self.dir / "adapter")

        self.assertEqual(result.exit_code, 3)


class FuseTestCase(AppTestCase):
    """Test fusion plans"""

    def setUp(self):
        super().setUp()
        self.w = well_conditioned_matrix(self.rng, 6, 8)
        self.matrix("base", self.w)
        d = svd_thin(self.w)
        entries = []
        for i in range(2):
            state = init_adapter(AdapterKind.SPECTRAL_A, d, 2, columns=ColumnSelect.block(i, 2))
            state = state.replace(a_u=0.1 * self.rng.standard_normal((6, 2)),
                                  a_v=0.1 * self.rng.standard_normal((8, 2)))
            write_adapter(self.dir / f"concept{i}", state)
            write_matrix(self.dir / f"acts{i}", self.rng.standard_normal((8, 10)))
            entries.append({"adapter": f"concept{i}", "lambda": 1.0, "activations": f"acts{i}.json"})
        self.entries = entries

    def plan(self, **extra):
        return self.config("plan.json", {"schema_version": 1, "base": "base.json", "entries": self.entries,
                                         **extra})

    def test_spectral(self):
        result = self.invoke("fuse", self.plan(policy="contiguous-top"))

        self.assertEqual(result.exit_code, 0, result.output)
        report = read_json(self.out / "fusion_report.json")
        self.assertEqual(report["method"], "spectral")
        self.assertEqual(report["overlaps"], [])
        self.assertEqual(len(report["deviations"]), 2)
        self.assertEqual(read_matrix(self.out / "fused").shape, (6, 8))

    def test_gradient_beats_fedavg(self):
        result = self.invoke("fuse", self.plan(method="gradient"))

        self.assertEqual(result.exit_code, 0, result.output)
        report = read_json(self.out / "fusion_report.json")
        self.assertLessEqual(report["objectives"]["gradient"], report["objectives"]["fedavg"])

    def test_policy_violation(self):
        self.entries.reverse()

        result = self.invoke("fuse", self.plan(policy="contiguous-top"))

        self.assertEqual(result.exit_code, 3)


class AnalysisTestCase(AppTestCase):
    """Test budget, rankcap, gradcheck, experiment and bench-svd"""

    def test_budget(self):
        result = self.invoke("budget", "--kind", "OFT", "--kind", "SpectralR", "--n", 6, "--m", 6,
                             "--max-rank", 3)

        self.assertEqual(result.exit_code, 0, result.output)
        budgets = read_json(self.out / "budgets.json")
        self.assertEqual(budgets["OFT"], [1, 4, 9, 36])
        self.assertEqual(budgets["SpectralR"], [2, 8, 18])
        self.assertTrue((self.out / "budget.csv").read_text().startswith("kind,rank,count,granularity,scaling\n"))

    def test_rankcap(self):
        path = self.matrix("w", well_conditioned_matrix(self.rng, 5, 7))

        result = self.invoke("rankcap", path, "--kind", "LoRA", "--rank", 2, "--trials", 5)

        self.assertEqual(result.exit_code, 0, result.output)
        report = read_json(self.out / "rankcap.json")
        self.assertEqual(report["min_rank_achieved"], 3)
        self.assertTrue((self.out / "certificate" / "adapter.json").exists())

    def test_rankcap_rank_deficient(self):
        w = np.outer(np.arange(1.0, 6.0), np.arange(1.0, 8.0))
        path = self.matrix("w", w)

        self.assertEqual(self.invoke("rankcap", path, "--kind", "LoRA", "--trials", 2).exit_code, 3)
        self.assertEqual(self.invoke("rankcap", path, "--kind", "LoRA", "--trials", 2, "--lenient").exit_code, 0)

    def test_gradcheck(self):
        result = self.invoke("gradcheck", "--kind", "OFT", "--independent-blocks")

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertLessEqual(read_json(self.out / "gradcheck.json")["max_relative_error"], 1e-5)

        result = self.invoke("gradcheck", "--kind", "LoRA", "--threshold", "1e-300")
        self.assertEqual(result.exit_code, 4)

    def test_loss_compare_experiment(self):
        config = self.config("exp.json", {"schema_version": 1, "n": 4, "m": 6, "rank": 1,
                                          "train": {"steps": 10}})

        result = self.invoke("experiment", "loss-compare", "--config", config)

        self.assertEqual(result.exit_code, 0, result.output)
        rows = (self.out / "loss_compare.csv").read_text().splitlines()
        self.assertEqual(len(rows), 12)
        self.assertIn("loss_compare.json", read_json(self.out / "manifest.json")["artifacts"])

    def test_experiment_config_violation(self):
        config = self.config("exp.json", {"schema_version": 1, "hidden_dim": 0})

        self.assertEqual(self.invoke("experiment", "subspace", "--config", config).exit_code, 3)

    def test_bench_svd(self):
        result = self.invoke("bench-svd", "--size", 8, "--size", 16, "--repeats", 2, "--randomized-rank", 2)

        self.assertEqual(result.exit_code, 0, result.output)
        lines = (self.out / "bench.csv").read_text().splitlines()
        self.assertEqual(lines[0], "size,t_median_ms,t_p90_ms,mem_bytes,method,repeats")
        self.assertEqual(len(lines), 5)
        threads = read_json(self.out / "manifest.json")["measurements"]["blas_threads"]
        self.assertEqual(sorted(threads), ["MKL_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"])

    def test_bench_size_cap(self):
        result = self.invoke("bench-svd", "--size", 64, "--cap", 32)

        self.assertEqual(result.exit_code, 3)

    def test_version(self):
        result = self.runner.invoke(app, ["--version"])

        self.assertEqual(result.exit_code, 0)
        self.assertIn("0.1.0", result.output)
