"""
Tests for synthetic, directory and external-process depth backends
"""

import os
import shlex
import shutil
import sys
import tempfile
import textwrap
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from src.backends import (
    TIMEOUT_ENV_VAR,
    DepthRequest,
    DirectoryBackend,
    JitterSpec,
    ProcessBackend,
    ProcessPerceptualBackend,
    RecordingBackend,
    SceneKind,
    SyntheticBackend,
    SyntheticScene,
    default_timeout,
    parse_backend_spec,
)
from src.boost import BoostConfig, SimpleBoost
from src.errors import BackendError, ConfigError, MissingEntryError
from src.grid_core import DepthGrid, ImageGrid, Rect
from src.io_formats import save_depth
from src.losses import loss_lpips

SMALL = BoostConfig(patch=64, overlap=32, reference_size=50, passthrough_max_side=100)

PFM_WRITER = """
import struct
import sys

def write_pfm(path, rows):
    height, width = len(rows), len(rows[0])
    with open(path, "wb") as fh:
        fh.write(f"Pf\\n{width} {height}\\n-1.0\\n".encode("ascii"))
        for row in reversed(rows):
            fh.write(struct.pack(f"<{width}f", *row))
"""

CONSTANT_SCRIPT = PFM_WRITER + """
out, width, height = sys.argv[2], int(sys.argv[3]), int(sys.argv[4])
write_pfm(out, [[0.5] * width for _ in range(height)])
"""

RAMP_SCRIPT = PFM_WRITER + """
out = sys.argv[2]
x, y, w, h, out_w, out_h, src_w, src_h = (int(v) for v in sys.argv[3:11])
rows = []
for j in range(out_h):
    v = (y + (j + 0.5) * (h / out_h) - 0.5) / src_h
    row = []
    for i in range(out_w):
        u = (x + (i + 0.5) * (w / out_w) - 0.5) / src_w
        row.append(1.0 + 1.0 * u + 0.0 * v)
    rows.append(row)
write_pfm(out, rows)
"""

FAILING_SCRIPT = """
import sys
sys.stderr.write("model weights not found\\n")
sys.exit(3)
"""

SLEEPING_SCRIPT = """
import time
time.sleep(30)
"""

SILENT_SCRIPT = "pass\n"

DISTANCE_SCRIPT = """
import sys
with open(sys.argv[3], "w") as fh:
    fh.write("0.25\\n")
"""


def blank_image(width: int, height: int) -> ImageGrid:
    return ImageGrid(np.zeros((height, width, 3), dtype=np.float32))


def full_request(width: int, height: int, image_id: str = "image") -> DepthRequest:
    return DepthRequest(blank_image(width, height), Rect.full(width, height), (width, height), width, height, image_id)


class TestSyntheticBackend(unittest.TestCase):
    """Analytic scenes and per-call jitter"""

    def test_ramp_values(self):
        grid = SyntheticBackend(SyntheticScene()).infer(full_request(8, 2))
        expected = 1.0 + np.arange(8) / 8.0
        np.testing.assert_array_equal(grid.values, np.vstack([expected, expected]).astype(np.float32))

    def test_crop_matches_full_evaluation(self):
        backend = SyntheticBackend(SyntheticScene(SceneKind.SINUSOID))
        full = backend.infer(full_request(40, 30)).values
        region = Rect(10, 5, 12, 9)
        request = DepthRequest(blank_image(12, 9), region, (40, 30), 12, 9)
        np.testing.assert_array_equal(backend.infer(request).values, full[5:14, 10:22])

    def test_deterministic(self):
        backend = SyntheticBackend(SyntheticScene(SceneKind.RADIAL, jitter=JitterSpec(seed=7)))
        request = full_request(16, 16)
        self.assertTrue(backend.infer(request).equals(backend.infer(request)))

    def test_jitter_is_affine_on_lattice(self):
        scene = SyntheticScene(jitter=JitterSpec(seed=1))
        backend = SyntheticBackend(scene)
        request = DepthRequest(blank_image(16, 8), Rect(16, 0, 16, 8), (64, 8), 16, 8)
        s, o = backend.jitter_for(request)
        self.assertTrue(0.5 <= s <= 2.0 and -1.0 <= o <= 1.0)
        self.assertEqual(s * 64, round(s * 64))
        self.assertEqual(o * 64, round(o * 64))
        clean = SyntheticBackend(SyntheticScene()).infer(request).values.astype(np.float64)
        np.testing.assert_array_equal(backend.infer(request).values, (s * clean + o).astype(np.float32))

    def test_jitter_depends_on_region(self):
        spec = JitterSpec(seed=2)
        draws = {
            spec.draw(DepthRequest(blank_image(4, 4), Rect(x, 0, 4, 4), (64, 4), 4, 4)) for x in range(0, 60, 4)
        }
        self.assertGreater(len(draws), 1)

    def test_scene_validation(self):
        with self.assertRaises(ConfigError):
            SyntheticScene(SceneKind.RAMP, {"a": 0.5, "bx": -1.0})
        with self.assertRaises(ConfigError):
            SyntheticScene(SceneKind.RADIAL, {"depth": 3.0})
        with self.assertRaises(ConfigError):
            SyntheticScene(SceneKind.SINUSOID, {"a": 1.0, "b": 1.0})

    def test_scenes_are_positive(self):
        for kind in SceneKind:
            truth = SyntheticScene(kind).truth(33, 17)
            self.assertGreater(float(truth.values.min()), 0.0)


class TestDirectoryBackend(unittest.TestCase):
    """Precomputed depth served by file name"""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_key_naming(self):
        request = DepthRequest(blank_image(4, 4), Rect(0, 0, 640, 640), (2048, 1024), 640, 640, "img_0")
        self.assertEqual(request.key(), "img_0_crop_0_0_640_640.pfm")
        resized = DepthRequest(blank_image(4, 4), Rect.full(2048, 1024), (2048, 1024), 518, 259, "img_0")
        self.assertEqual(resized.key(), "img_0_crop_0_0_2048_1024_518x259.pfm")

    def test_served_verbatim(self):
        grid = DepthGrid(np.random.default_rng(0).uniform(0.1, 2.0, (4, 6)))
        request = full_request(6, 4, "scene")
        save_depth(grid, self.tmp / request.key())
        self.assertTrue(DirectoryBackend(self.tmp).infer(request).equals(grid))

    def test_missing_entry_names_file(self):
        request = DepthRequest(blank_image(4, 4), Rect(0, 0, 640, 640), (1280, 640), 640, 640, "img_0")
        with self.assertRaises(MissingEntryError) as ctx:
            DirectoryBackend(self.tmp).infer(request)
        self.assertEqual(ctx.exception.expected_filename, "img_0_crop_0_0_640_640.pfm")
        self.assertIn("img_0_crop_0_0_640_640.pfm", str(ctx.exception))

    def test_wrong_size_file(self):
        request = full_request(6, 4)
        save_depth(DepthGrid(np.ones((3, 3))), self.tmp / request.key())
        with self.assertRaises(BackendError):
            DirectoryBackend(self.tmp).infer(request)

    def test_recorded_run_replays_identically(self):
        scene = SyntheticScene(SceneKind.RADIAL, jitter=JitterSpec(seed=5))
        image = blank_image(256, 128)
        live = SimpleBoost(RecordingBackend(SyntheticBackend(scene), self.tmp), SMALL, jobs=1).run(image, "rec")
        self.assertEqual(len(list(self.tmp.glob("*.pfm"))), live.backend_calls)
        replay = SimpleBoost(DirectoryBackend(self.tmp), SMALL, jobs=1).run(image, "rec")
        self.assertTrue(replay.depth.equals(live.depth))


class TestProcessBackend(unittest.TestCase):
    """External programs exchanging PNG/PFM files"""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _template(self, name: str, source: str, args: str) -> str:
        script = self.tmp / f"{name}.py"
        script.write_text(textwrap.dedent(source), encoding="utf-8")
        return f"{shlex.quote(sys.executable)} {shlex.quote(str(script))} {args}"

    def test_constant_output(self):
        template = self._template("const", CONSTANT_SCRIPT, "{input} {output} {width} {height}")
        grid = ProcessBackend(template, io_dir=self.tmp / "io", timeout=30).infer(full_request(5, 3))
        np.testing.assert_array_equal(grid.values, np.full((3, 5), 0.5, dtype=np.float32))
        self.assertEqual(list((self.tmp / "io").iterdir()), [])

    def test_nonzero_exit(self):
        template = self._template("fail", FAILING_SCRIPT, "{input} {output}")
        with self.assertRaises(BackendError) as ctx:
            ProcessBackend(template, timeout=30).infer(full_request(4, 4))
        self.assertEqual(ctx.exception.exit_code, 3)
        self.assertIn("model weights not found", ctx.exception.stderr)

    def test_missing_output(self):
        template = self._template("silent", SILENT_SCRIPT, "{input} {output}")
        with self.assertRaises(BackendError):
            ProcessBackend(template, timeout=30).infer(full_request(4, 4))

    def test_timeout_from_environment(self):
        template = self._template("sleep", SLEEPING_SCRIPT, "{input} {output}")
        with mock.patch.dict(os.environ, {TIMEOUT_ENV_VAR: "0.5"}):
            self.assertEqual(default_timeout(), 0.5)
            backend = ProcessBackend(template)
        self.assertEqual(backend.timeout, 0.5)
        with self.assertRaises(BackendError) as ctx:
            backend.infer(full_request(4, 4))
        self.assertIn("timed out", str(ctx.exception))

    def test_bad_timeout_environment(self):
        for raw in ("soon", "-1"):
            with mock.patch.dict(os.environ, {TIMEOUT_ENV_VAR: raw}):
                with self.assertRaises(ConfigError):
                    default_timeout()

    def test_non_positive_timeout_rejected(self):
        template = self._template("silent", SILENT_SCRIPT, "{input} {output}")
        for bad in (0, -2.5, "zero"):
            with self.assertRaises(ConfigError, msg=repr(bad)):
                ProcessBackend(template, timeout=bad)
        self.assertEqual(ProcessBackend(template, timeout="3").timeout, 3.0)

    def test_template_needs_placeholders(self):
        with self.assertRaises(ConfigError):
            ProcessBackend("model {input}", timeout=1)

    def test_matches_in_process_oracle(self):
        args = "{input} {output} {x} {y} {w} {h} {width} {height} {source_width} {source_height}"
        template = self._template("ramp", RAMP_SCRIPT, args)
        external = ProcessBackend(template, timeout=30)
        oracle = SyntheticBackend(SyntheticScene())
        request = DepthRequest(blank_image(24, 10), Rect(40, 6, 24, 10), (160, 80), 24, 10)
        np.testing.assert_array_equal(external.infer(request).values, oracle.infer(request).values)

        image = blank_image(160, 80)
        via_process = SimpleBoost(external, SMALL, jobs=1).run(image)
        in_process = SimpleBoost(oracle, SMALL, jobs=1).run(image)
        self.assertEqual(via_process.backend_calls, 9)
        self.assertTrue(via_process.depth.equals(in_process.depth))

    def test_perceptual_command(self):
        template = self._template("dist", DISTANCE_SCRIPT, "{a} {b} {output}")
        backend = ProcessPerceptualBackend(template, timeout=30)
        a = DepthGrid(np.array([[0.0, 1.0], [2.0, 3.0]]))
        b = DepthGrid(np.array([[3.0, 1.0], [2.0, 0.0]]))
        self.assertEqual(loss_lpips(a, b, backend), 0.25)
        with self.assertRaises(ConfigError):
            ProcessPerceptualBackend("lpips {a} {b}", timeout=1)


class TestParseBackendSpec(unittest.TestCase):
    """Backend selection strings"""

    def test_synthetic_options(self):
        backend = parse_backend_spec("synthetic:ramp?bx=2&by=0.5&seed=3&jitter=1&native=40&concurrency=2")
        self.assertIsInstance(backend, SyntheticBackend)
        self.assertEqual(backend.scene.params["bx"], 2.0)
        self.assertEqual(backend.scene.jitter, JitterSpec(seed=3))
        self.assertEqual((backend.native_size, backend.max_concurrency), (40, 2))

    def test_plain_synthetic(self):
        backend = parse_backend_spec("synthetic:sinusoid")
        self.assertIs(backend.scene.kind, SceneKind.SINUSOID)
        self.assertIsNone(backend.scene.jitter)
        self.assertIsNone(backend.native_size)

    def test_directory_and_command(self):
        self.assertEqual(parse_backend_spec("dir:/data/pred").root, Path("/data/pred"))
        backend = parse_backend_spec("cmd:model --in {input} --out {output}", timeout=12.0, io_dir="/tmp/x")
        self.assertIsInstance(backend, ProcessBackend)
        self.assertEqual((backend.timeout, backend.io_dir), (12.0, Path("/tmp/x")))

    def test_invalid_specs(self):
        for spec in (
            "nope",
            "synthetic:",
            "synthetic:cube",
            "ftp:host",
            "synthetic:ramp?native=abc",
            "synthetic:ramp?zz=1",
            "cmd:model {input}",
        ):
            with self.assertRaises(ConfigError, msg=spec):
                parse_backend_spec(spec, timeout=1.0)


if __name__ == "__main__":
    unittest.main()
