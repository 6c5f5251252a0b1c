"""On-disk format tests."""

# run these tests like:
#
#    python -m unittest test_containers.py

import json
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from adapters import AdapterKind, effective_weight, init_adapter
from containers import (artifact_digests, read_adapter, read_decomposition, read_json, read_manifest,
                        read_matrix, write_adapter, write_csv, write_decomposition, write_json,
                        write_manifest, write_matrix)
from errors import FormatError
from linalg import ColumnSelect, fingerprint, svd_thin


class ContainerTestCase(TestCase):
    """Base with a scratch directory per test."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self.tmp.cleanup()


class MatrixContainerTestCase(ContainerTestCase):
    """Test name.json + name.bin matrix containers"""

    def test_bits_survive(self):
        w = self.rng.standard_normal((3, 5))
        w[0, 0] = -0.0
        w[1, 1] = 5e-324

        header, blob = write_matrix(self.dir / "w", w)
        back = read_matrix(self.dir / "w.json")

        self.assertEqual(back.tobytes(), w.tobytes())
        self.assertEqual(blob.stat().st_size, 3 * 5 * 8)
        self.assertEqual(json.loads(header.read_text()),
                         {"rows": 3, "cols": 5, "dtype": "f64le", "layout": "row-major"})

    def test_header_bytes_are_stable(self):
        write_matrix(self.dir / "w", np.eye(2))

        self.assertEqual((self.dir / "w.json").read_bytes(),
                         b'{\n  "cols": 2,\n  "dtype": "f64le",\n  "layout": "row-major",\n  "rows": 2\n}\n')

    def test_unknown_header_key(self):
        write_matrix(self.dir / "w", np.eye(2))
        write_json(self.dir / "w.json", {"rows": 2, "cols": 2, "dtype": "f64le", "layout": "row-major",
                                         "note": "x"})

        with self.assertRaises(FormatError):
            read_matrix(self.dir / "w")

    def test_wrong_dtype(self):
        write_matrix(self.dir / "w", np.eye(2))
        write_json(self.dir / "w.json", {"rows": 2, "cols": 2, "dtype": "f32le", "layout": "row-major"})

        with self.assertRaises(FormatError):
            read_matrix(self.dir / "w")

    def test_short_blob(self):
        write_matrix(self.dir / "w", np.eye(2))
        (self.dir / "w.bin").write_bytes(b"\x00" * 24)

        with self.assertRaises(FormatError):
            read_matrix(self.dir / "w")

    def test_non_finite_payload(self):
        write_matrix(self.dir / "w", np.eye(2))
        (self.dir / "w.bin").write_bytes(np.array([1.0, np.nan, 0.0, 1.0], dtype="<f8").tobytes())

        with self.assertRaises(FormatError):
            read_matrix(self.dir / "w")

    def test_missing_and_broken_files(self):
        with self.assertRaises(FormatError):
            read_matrix(self.dir / "nothing")
        (self.dir / "bad.json").write_text("{not json")
        with self.assertRaises(FormatError):
            read_json(self.dir / "bad.json")

    def test_one_dimensional_rejected(self):
        with self.assertRaises(FormatError):
            write_matrix(self.dir / "v", np.ones(3))


############################################################################
# DECOMPOSITIONS, ADAPTERS AND MANIFESTS


class DecompositionContainerTestCase(ContainerTestCase):
    def test_round_trip_keeps_fingerprint(self):
        d = svd_thin(self.rng.standard_normal((4, 6)))

        write_decomposition(self.dir / "dec", d)
        back = read_decomposition(self.dir / "dec")

        self.assertEqual(fingerprint(back), fingerprint(d))
        self.assertTrue(back.canonical)

    def test_inconsistent_factors(self):
        d = svd_thin(self.rng.standard_normal((4, 6)))
        write_decomposition(self.dir / "dec", d)
        write_matrix(self.dir / "dec" / "s", np.ones((1, 3)))

        with self.assertRaises(FormatError):
            read_decomposition(self.dir / "dec")


class AdapterContainerTestCase(ContainerTestCase):
    """Test adapter directories"""

    def setUp(self):
        super().setUp()
        self.w = self.rng.standard_normal((6, 4))
        self.d = svd_thin(self.w)

    def round_trip(self, base, state):
        state = state.replace(**{name: self.rng.standard_normal(arr.shape)
                                 for name, arr in state.trainable().items()})
        write_adapter(self.dir / "adapter", state)
        back = read_adapter(self.dir / "adapter")

        self.assertIs(back.kind, state.kind)
        self.assertEqual(back.base_shape, state.base_shape)
        self.assertEqual(back.extras(), state.extras())
        for name, arr in state.tensors().items():
            self.assertEqual(back.tensors()[name].tobytes(), arr.tobytes())
        np.testing.assert_array_equal(effective_weight(base, back), effective_weight(base, state))
        return back

    def test_spectral_a(self):
        back = self.round_trip(self.d, init_adapter(AdapterKind.SPECTRAL_A, self.d, 2,
                                                    columns=ColumnSelect.from_indices([0, 3])))

        self.assertEqual(back.columns.indices.tolist(), [0, 3])
        self.assertEqual(back.base_fingerprint, fingerprint(self.d))

    def test_independent_oft_blocks_keep_order(self):
        self.round_trip(self.w, init_adapter(AdapterKind.OFT, self.w, 3, shared=False))

    def test_frozen_tensors_flagged(self):
        self.round_trip(self.w, init_adapter(AdapterKind.LIDB, self.w, 2, aux_a=3, aux_b=4))
        header = read_json(self.dir / "adapter" / "adapter.json")

        flags = {entry["name"]: entry["frozen"] for entry in header["tensors"]}
        self.assertEqual(flags, {"a": False, "b_t": False, "a_aux": True, "b_aux": True})

    def test_vector_tensors(self):
        self.round_trip(self.w, init_adapter(AdapterKind.DORA_VECTOR, self.w, 1, variant="spectral"))

    def test_wrong_schema_version(self):
        write_adapter(self.dir / "adapter", init_adapter(AdapterKind.FULL, self.w))
        header = read_json(self.dir / "adapter" / "adapter.json")
        header["schema_version"] = 2
        write_json(self.dir / "adapter" / "adapter.json", header)

        with self.assertRaises(FormatError):
            read_adapter(self.dir / "adapter")

    def test_unknown_kind(self):
        write_adapter(self.dir / "adapter", init_adapter(AdapterKind.FULL, self.w))
        header = read_json(self.dir / "adapter" / "adapter.json")
        header["kind"] = "Prefix"
        write_json(self.dir / "adapter" / "adapter.json", header)

        with self.assertRaises(FormatError):
            read_adapter(self.dir / "adapter")

    def test_tensor_shape_mismatch(self):
        write_adapter(self.dir / "adapter", init_adapter(AdapterKind.LORA, self.w, 2))
        header = read_json(self.dir / "adapter" / "adapter.json")
        header["tensors"][0]["shape"] = [5, 2]
        write_json(self.dir / "adapter" / "adapter.json", header)

        with self.assertRaises(FormatError):
            read_adapter(self.dir / "adapter")


class ManifestTestCase(ContainerTestCase):
    """Test CSV output and run manifests"""

    def test_csv_line_endings(self):
        write_csv(self.dir / "t.csv", [["a", "b"], [1, repr(0.1)]])

        self.assertEqual((self.dir / "t.csv").read_bytes(), b"a,b\n1,0.1\n")

    def test_manifest_digests(self):
        write_matrix(self.dir / "out" / "w", np.eye(2))
        write_csv(self.dir / "out" / "t.csv", [["x"]])

        path = write_manifest(self.dir / "out", "decompose", {"matrix": "w"},
                              [self.dir / "out" / "w.json", self.dir / "out" / "w.bin", self.dir / "out" / "t.csv"],
                              {"numpy": np.__version__}, settings={"seed": 0}, measurements={"seconds": 1.5})
        manifest = read_manifest(path)

        self.assertEqual(sorted(manifest["artifacts"]), ["t.csv", "w.bin", "w.json"])
        self.assertEqual(len(manifest["artifacts"]["w.bin"]), 64)
        self.assertEqual(manifest["settings"], {"seed": 0})
        self.assertEqual(manifest["measurements"], {"seconds": 1.5})

    def test_digests_walk_directories(self):
        write_adapter(self.dir / "adapter", init_adapter(AdapterKind.SVDIFF, np.eye(3)))

        digests = artifact_digests([self.dir / "adapter"], self.dir)

        self.assertIn("adapter/adapter.json", digests)
        self.assertIn("adapter/tensor_delta_s.bin", digests)

    def test_manifest_without_command(self):
        write_json(self.dir / "manifest.json", {"schema_version": 1, "params": {}})

        with self.assertRaises(FormatError):
            read_manifest(self.dir / "manifest.json")
