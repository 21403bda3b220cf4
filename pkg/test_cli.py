#!/usr/bin/env python3
"""
Tests for the command-line entry point and its exit codes.
"""

import contextlib
import io
import json
import os
import tempfile
import unittest
from unittest import mock

import pandas as pd

from cli import main
from dataio import load_csv
from projection_model import init, save_checkpoint
from rank_embedding_common import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION
from trainer import CHECKPOINT_FILE, FINAL_REPORT_FILE

SMALL_DATA = ["--coarse", "3", "--fine", "3", "--per-class", "20", "--d-in", "8"]


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        env = mock.patch.dict(os.environ, {"RBL_LOG_TO_FILE": "false"})
        env.start()
        self.addCleanup(env.stop)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def run_cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main(list(argv))
        return code, out.getvalue()


class TestSynthCommand(CliTestCase):
    def test_writes_csv(self):
        output = self.path("synth.csv")
        code, _ = self.run_cli("synth", "--coarse", "3", "--fine", "3", "--per-class", "20", "--d-in", "4",
                               "--output", output)
        self.assertEqual(code, EXIT_OK)
        dataset = load_csv(output)
        self.assertEqual(len(dataset), 180)
        self.assertEqual(dataset.d_in, 4)

    def test_same_seed_same_bytes(self):
        first, second = self.path("a.csv"), self.path("b.csv")
        for output in (first, second):
            self.run_cli("synth", "--per-class", "5", "--d-in", "3", "--seed", "9", "--output", output)
        with open(first) as a, open(second) as b:
            self.assertEqual(a.read(), b.read())

    def test_invalid_settings(self):
        code, _ = self.run_cli("synth", "--coarse", "0", "--output", self.path("x.csv"))
        self.assertEqual(code, EXIT_VALIDATION)

    def test_unwritable_output(self):
        blocker = self.path("file")
        with open(blocker, "w") as f:
            f.write("not a directory")
        code, _ = self.run_cli("synth", "--per-class", "2", "--d-in", "2", "--output", os.path.join(blocker, "x.csv"))
        self.assertEqual(code, EXIT_RUNTIME)


class TestTrainAndEval(CliTestCase):
    def test_train_then_eval(self):
        run_dir = self.path("run")
        code, out = self.run_cli("train", *SMALL_DATA, "--max-epochs", "2", "--output-dir", run_dir)
        self.assertEqual(code, EXIT_OK)
        result = json.loads(out)
        self.assertEqual(result["output_dir"], run_dir)
        self.assertTrue(os.path.isfile(os.path.join(run_dir, CHECKPOINT_FILE)))

        code, out = self.run_cli("eval", "--run-dir", run_dir, "--split", "test")
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(run_dir, FINAL_REPORT_FILE)) as f:
            final = json.load(f)
        self.assertAlmostEqual(json.loads(out)["avSil"], final["reports"]["test"]["avSil"], places=12)

        code, out = self.run_cli("eval", "--run-dir", run_dir, "--split", "all")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(out)["levels"], ["coarse", "fine"])

        code, out = self.run_cli("eval", "--run-dir", run_dir, "--split", "alt_test")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(json.loads(out)["sil_per_level"]), 2)

    def test_raw_features_on_nested_data(self):
        run_dir = self.path("baseline")
        code, _ = self.run_cli("train", "--per-class", "20", "--d-in", "64", "--experiment", "InitEmb",
                               "--output-dir", run_dir)
        self.assertEqual(code, EXIT_OK)
        code, out = self.run_cli("eval", "--config", os.path.join(run_dir, "config.json"),
                                 "--raw-features", "--split", "all")
        self.assertEqual(code, EXIT_OK)
        coarse, fine = json.loads(out)["sil_per_level"]
        self.assertGreaterEqual(coarse, fine)

    def test_eval_needs_a_checkpoint(self):
        code, _ = self.run_cli("eval", "--split", "test")
        self.assertEqual(code, EXIT_VALIDATION)

    def test_checkpoint_dimension_mismatch(self):
        run_dir = self.path("run")
        self.run_cli("train", *SMALL_DATA, "--max-epochs", "0", "--output-dir", run_dir)
        wrong = self.path("wrong.json")
        save_checkpoint(init(0, 5, 3), wrong)
        code, _ = self.run_cli("eval", "--run-dir", run_dir, "--checkpoint", wrong)
        self.assertEqual(code, EXIT_VALIDATION)

    def test_invalid_margins(self):
        code, _ = self.run_cli("train", *SMALL_DATA, "--margin-fine", "0.6", "--margin-coarse", "0.5",
                               "--output-dir", self.path("run"))
        self.assertEqual(code, EXIT_VALIDATION)

    def test_single_class_data(self):
        code, _ = self.run_cli("train", "--coarse", "1", "--fine", "1", "--per-class", "20", "--d-in", "4",
                               "--max-epochs", "1", "--output-dir", self.path("run"))
        self.assertEqual(code, EXIT_VALIDATION)

    def test_malformed_dataset(self):
        csv_path = self.path("bad.csv")
        with open(csv_path, "w") as f:
            f.write("id,labels,f0,f1\na,c/f,1,2\nb,c/f,3\n")
        code, _ = self.run_cli("train", "--dataset", csv_path, "--output-dir", self.path("run"))
        self.assertEqual(code, EXIT_VALIDATION)

    def test_undecodable_dataset(self):
        csv_path = self.path("bytes.csv")
        with open(csv_path, "wb") as f:
            f.write(b"id,labels,f0\na,c/\xff,1\n")
        code, _ = self.run_cli("train", "--dataset", csv_path, "--output-dir", self.path("run"))
        self.assertEqual(code, EXIT_VALIDATION)

        huge = self.path("huge.csv")
        with open(huge, "w") as f:
            f.write("id,labels,f0\na,c/f," + "1" * 200000 + "\n")
        code, _ = self.run_cli("eval", "--dataset", huge, "--raw-features", "--split", "all")
        self.assertEqual(code, EXIT_VALIDATION)

    def test_train_from_csv(self):
        csv_path = self.path("data.csv")
        self.run_cli("synth", "--per-class", "20", "--d-in", "6", "--output", csv_path)
        code, out = self.run_cli("train", "--dataset", csv_path, "--max-epochs", "1", "--loss", "quadruplet",
                                 "--output-dir", self.path("run"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("alt_test", json.loads(out)["reports"])


class TestGradcheckCommand(CliTestCase):
    def test_passes(self):
        code, out = self.run_cli("gradcheck", "--trials", "3")
        self.assertEqual(code, EXIT_OK)
        suites = json.loads(out)
        self.assertEqual(len(suites), 3)
        self.assertTrue(all(suite["passed"] for suite in suites))


class TestCompareCommand(CliTestCase):
    def test_compares_every_preset(self):
        root = self.path("compare")
        code, out = self.run_cli("compare", *SMALL_DATA, "--max-epochs", "1", "--output-dir", root)
        self.assertEqual(code, EXIT_OK)
        for name in ("InitEmb", "QuadL", "RbL", "RbL_unc"):
            self.assertIn(name, out)
            self.assertTrue(os.path.isfile(os.path.join(root, name, "seed_0", FINAL_REPORT_FILE)))
        table = pd.read_csv(os.path.join(root, "comparison.csv"))
        self.assertEqual(len(table), 8)
        self.assertEqual(set(table["split"]), {"test", "alt_test"})
        self.assertIn("avSil", table.columns)
        with open(os.path.join(root, "InitEmb", "seed_0", FINAL_REPORT_FILE)) as f:
            self.assertEqual(json.load(f)["epochs_run"], 0)


if __name__ == "__main__":
    unittest.main()
