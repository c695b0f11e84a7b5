"""
Tests for Settings and the Reporter
"""

import json
import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from config.settings import Settings
from src.backends import TIMEOUT_ENV_VAR
from src.boost import plan_tiles
from src.errors import ConfigError
from src.grid_core import DepthGrid
from src.metrics import AlignMode, DatasetReport, aggregate_reports, evaluate_grids
from src.reporter import Reporter


class TestSettings(unittest.TestCase):
    """Defaults, YAML overrides and environment"""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        patcher = mock.patch.dict(os.environ, {}, clear=False)
        patcher.start()
        self.addCleanup(patcher.stop)
        os.environ.pop(TIMEOUT_ENV_VAR, None)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def write(self, text: str) -> str:
        path = self.tmp / "settings.yaml"
        path.write_text(text, encoding="utf-8")
        return str(path)

    def test_defaults(self):
        settings = Settings()
        cfg = settings.boost_config()
        self.assertEqual((cfg.patch, cfg.overlap, cfg.reference_size, cfg.passthrough_max_side), (640, 320, 518, 960))
        self.assertEqual(settings.eval_config().delta_threshold, 1.25)
        self.assertIs(settings.eval_config().align, AlignMode.LEAST_SQUARES_INVDEPTH)
        self.assertEqual(settings.get("backend.timeout_secs"), 120.0)
        self.assertIsNone(settings.get("boost.missing"))
        self.assertEqual(settings.get("boost.missing", 7), 7)

    def test_yaml_merge_keeps_other_keys(self):
        settings = Settings(self.write("boost:\n  overlap: 100\neval:\n  align: none\n"))
        self.assertEqual(settings.boost_config().overlap, 100)
        self.assertEqual(settings.boost_config().patch, 640)
        self.assertIs(settings.eval_config().align, AlignMode.NONE)

    def test_missing_or_broken_file_falls_back(self):
        self.assertEqual(Settings(str(self.tmp / "absent.yaml")).to_dict(), Settings.DEFAULT_SETTINGS)
        self.assertEqual(Settings(self.write("boost: [unclosed\n")).to_dict(), Settings.DEFAULT_SETTINGS)
        self.assertEqual(Settings(self.write("- just\n- a list\n")).to_dict(), Settings.DEFAULT_SETTINGS)

    def test_environment_timeout(self):
        with mock.patch.dict(os.environ, {TIMEOUT_ENV_VAR: "7.5"}):
            self.assertEqual(Settings().get("backend.timeout_secs"), 7.5)
        with mock.patch.dict(os.environ, {TIMEOUT_ENV_VAR: "later"}):
            with self.assertRaises(ConfigError):
                Settings()
        for raw in ("0", "-4"):
            with mock.patch.dict(os.environ, {TIMEOUT_ENV_VAR: raw}):
                with self.assertRaises(ConfigError):
                    Settings()

    def test_backend_timeout_is_validated(self):
        self.assertEqual(Settings().backend_timeout(), 120.0)
        for text in ("backend:\n  timeout_secs: 0\n", "backend:\n  timeout_secs: soon\n"):
            with self.assertRaises(ConfigError, msg=text):
                Settings(self.write(text)).backend_timeout()

    def test_invalid_values(self):
        settings = Settings(self.write("boost:\n  patch: 200\n  overlap: 300\nlosses:\n  alpha_l: -1\n"))
        with self.assertRaises(ConfigError):
            settings.boost_config()
        with self.assertRaises(ConfigError):
            settings.loss_weights()

    def test_to_dict_is_a_copy(self):
        settings = Settings()
        data = settings.to_dict()
        data["boost"]["patch"] = 1
        self.assertEqual(settings.get("boost.patch"), 640)


class TestReporter(unittest.TestCase):
    """Tables and JSON reports"""

    def setUp(self):
        self.reporter = Reporter()
        rng = np.random.default_rng(0)
        gt = DepthGrid(rng.uniform(0.2, 2.0, (4, 4)))
        self.sample_gt = gt
        self.sample = evaluate_grids(gt, gt, sample_id="s0")

    def test_eval_table(self):
        report = DatasetReport(samples=[self.sample], aggregate=aggregate_reports([self.sample]))
        frame = self.reporter.eval_frame(report)
        self.assertEqual(list(frame["id"]), ["s0", "mean"])
        self.assertIn("AbsRel", frame.columns)
        table = self.reporter.to_table(frame)
        self.assertIn("100(1-d1)", table)
        self.assertIn("-", table.splitlines()[1])

    def test_missing_metrics_print_as_dash(self):
        """Depth-only samples leave the WHDR column empty"""
        depth_only = evaluate_grids(self.sample_gt, self.sample_gt, sample_id="d")
        report = DatasetReport(samples=[depth_only], aggregate=aggregate_reports([depth_only]))
        frame = self.reporter.eval_frame(report)
        self.assertEqual(frame["WHDR"].dtype, np.float64)
        table = self.reporter.to_table(frame)
        self.assertNotIn("None", table)
        self.assertIn("-", table.splitlines()[1])

    def test_empty_table(self):
        self.assertEqual(self.reporter.to_table(self.reporter.eval_frame(DatasetReport())), "(no rows)")

    def test_tile_frame(self):
        frame = self.reporter.tile_frame(plan_tiles(2048, 1024))
        self.assertEqual(len(frame), 18)
        self.assertEqual(list(frame.columns[:1]), ["tile"])

    def test_bench_frame(self):
        frame = self.reporter.bench_frame({"a": [1.0, 3.0]})
        self.assertEqual(frame.loc[0, "mean_s"], 2.0)
        self.assertEqual(frame.loc[0, "std_s"], 1.0)

    def test_save_report(self):
        tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, tmp, True)
        path = self.reporter.save_report(self.reporter.to_json({"k": 1}), tmp / "out" / "r.json")
        data = json.loads(path.read_text())
        self.assertEqual(data["data"], {"k": 1})
        self.assertIn("timestamp", data)


if __name__ == "__main__":
    unittest.main()
