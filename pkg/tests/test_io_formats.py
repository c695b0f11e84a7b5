"""
Tests for depth, image and manifest serialization
"""

import io
import json
import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from src.bimodal import BimodalField
from src.errors import FormatError, ManifestError, PfmChannelError
from src.grid_core import DepthGrid, ImageGrid
from src.io_formats import (
    DepthFileFormat,
    encode_png,
    load_depth,
    read_bimodal_pfm,
    read_image,
    read_manifest,
    read_pfm,
    read_png16,
    read_raw_f32le,
    save_depth,
    write_bimodal_pfm,
    write_manifest,
    write_pfm,
    write_png16,
    write_raw_f32le,
)


class TestPfm(unittest.TestCase):
    """Single-channel and bimodal PFM"""

    def test_round_trip_2x2(self):
        grid = DepthGrid(np.array([[1.0, 2.0], [3.0, 4.0]]))
        data = write_pfm(grid)
        self.assertTrue(data.startswith(b"Pf\n2 2\n-1.0\n"))
        # bottom row first on disk
        self.assertEqual(struct.unpack("<4f", data[-16:]), (3.0, 4.0, 1.0, 2.0))
        self.assertTrue(read_pfm(data).equals(grid))

    def test_big_endian_payload(self):
        payload = struct.pack(">3f", 7.0, 8.0, 9.0)
        grid = read_pfm(b"Pf\n3 1\n1.0\n" + payload)
        np.testing.assert_array_equal(grid.values, [[7.0, 8.0, 9.0]])

    def test_nan_becomes_invalid(self):
        grid = read_pfm(b"Pf\n2 1\n-1.0\n" + struct.pack("<2f", float("nan"), 5.0))
        np.testing.assert_array_equal(grid.valid_mask, [[False, True]])

    def test_masked_grid_round_trip(self):
        mask = np.array([[True, False, True]])
        grid = DepthGrid.from_array(np.array([[1.0, 0.0, 3.0]]), mask)
        back = read_pfm(write_pfm(grid))
        np.testing.assert_array_equal(back.valid_mask, mask)
        self.assertEqual(float(back.values[0, 2]), 3.0)

    def test_random_grids_are_bit_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            h, w = rng.integers(1, 24, size=2)
            grid = DepthGrid(rng.normal(scale=1e3, size=(h, w)))
            back = read_pfm(write_pfm(grid))
            self.assertEqual(back.values.tobytes(), grid.values.tobytes())
            self.assertTrue(back.valid_mask.all())

    def test_three_channel_rejected(self):
        with self.assertRaises(PfmChannelError):
            read_pfm(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)

    def test_malformed_inputs(self):
        for bad in (
            b"",
            b"Pf\n2 2\n",
            b"Pf\n2 2\n-1.0\n" + b"\x00" * 15,
            b"Pf\n2 x\n-1.0\n" + b"\x00" * 16,
            b"Pf\n0 2\n-1.0\n",
            b"Pf\n1 1\n0.0\n" + b"\x00" * 4,
            b"Pf\n1 1\nabc\n" + b"\x00" * 4,
            b"P6\n1 1\n-1.0\n" + b"\x00" * 4,
        ):
            with self.assertRaises(FormatError, msg=repr(bad)):
                read_pfm(bad)

    def test_bimodal_round_trip(self):
        rng = np.random.default_rng(0)
        field = BimodalField.from_planes(
            rng.uniform(0, 1, (3, 4)),
            rng.normal(size=(3, 4)),
            rng.uniform(0.1, 2, (3, 4)),
            rng.normal(size=(3, 4)),
            rng.uniform(0.1, 2, (3, 4)),
        )
        data = write_bimodal_pfm(field)
        self.assertTrue(data.startswith(b"Pm\n4 3\n"))
        np.testing.assert_array_equal(read_bimodal_pfm(data).params, field.params)
        with self.assertRaises(FormatError):
            read_bimodal_pfm(write_pfm(DepthGrid(np.ones((2, 2)))))


class TestRawAndPng16(unittest.TestCase):
    """Headerless float32 and quantized 16-bit depth"""

    def test_raw_is_bit_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            h, w = rng.integers(1, 20, size=2)
            grid = DepthGrid(rng.normal(scale=1e3, size=(h, w)))
            back = read_raw_f32le(write_raw_f32le(grid), int(w), int(h))
            self.assertEqual(back.values.tobytes(), grid.values.tobytes())

    def test_raw_negative_and_tiny_values(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(9, 11)) * np.float64(10.0) ** rng.integers(-30, 30, size=(9, 11))
        grid = DepthGrid(values)
        self.assertTrue((grid.values < 0).any())
        back = read_raw_f32le(write_raw_f32le(grid), 11, 9)
        self.assertEqual(back.values.tobytes(), grid.values.tobytes())

    def test_raw_size_mismatch(self):
        with self.assertRaises(FormatError):
            read_raw_f32le(b"\x00" * 12, 2, 2)

    def test_png16_quantization_error(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(-3.0, 40.0, (9, 11))
        grid = DepthGrid(values)
        data, sidecar = write_png16(grid)
        back = read_png16(data, sidecar)
        span = float(grid.values.max() - grid.values.min())
        self.assertTrue(back.is_fully_valid)
        self.assertLessEqual(float(np.max(np.abs(back.values - grid.values))), span / 65535 + 1e-5)

    def test_png16_zero_marks_invalid(self):
        mask = np.array([[True, False], [True, True]])
        grid = DepthGrid.from_array(np.array([[1.0, 9.0], [2.0, 3.0]]), mask)
        data, sidecar = write_png16(grid)
        with Image.open(io.BytesIO(data)) as img:
            self.assertEqual(int(np.asarray(img)[0, 1]), 0)
        np.testing.assert_array_equal(read_png16(data, sidecar).valid_mask, mask)

    def test_png16_bad_sidecar(self):
        data, _ = write_png16(DepthGrid(np.eye(2)))
        with self.assertRaises(FormatError):
            read_png16(data, {"scale": 1.0})


class TestImages(unittest.TestCase):
    """PNG/PPM decoding"""

    def _png(self, array: np.ndarray) -> bytes:
        buffer = io.BytesIO()
        Image.fromarray(array).save(buffer, format="PNG")
        return buffer.getvalue()

    def test_white_pixel_png(self):
        image = read_image(self._png(np.full((1, 1, 3), 255, dtype=np.uint8)))
        self.assertEqual((image.width, image.height, image.channels), (1, 1, 3))
        np.testing.assert_array_equal(image.pixels, 1.0)

    def test_ppm(self):
        data = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
        image = read_image(data)
        self.assertEqual((image.width, image.height), (2, 1))
        np.testing.assert_array_equal(image.pixels[0, 0], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(image.pixels[0, 1], [0.0, 0.0, 1.0])

    def test_gray_png(self):
        image = read_image(self._png(np.array([[0, 255]], dtype=np.uint8)))
        self.assertEqual(image.channels, 1)

    def test_encode_round_trip(self):
        pixels = np.random.default_rng(3).random((16, 16, 3))
        back = read_image(encode_png(ImageGrid(pixels)))
        self.assertLessEqual(float(np.max(np.abs(back.pixels - pixels))), 1.0 / 255.0)

    def test_unsupported_payloads(self):
        for bad in (b"", b"not an image"):
            with self.assertRaises(FormatError):
                read_image(bad)
        buffer = io.BytesIO()
        Image.new("RGB", (2, 2)).save(buffer, format="BMP")
        with self.assertRaises(FormatError):
            read_image(buffer.getvalue())


class TestDepthFiles(unittest.TestCase):
    """load_depth/save_depth dispatch on the extension"""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.grid = DepthGrid(np.random.default_rng(4).uniform(0.1, 5.0, (6, 7)))

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_format_for_path(self):
        self.assertIs(DepthFileFormat.for_path("a/b.PFM"), DepthFileFormat.PFM_GRAY)
        self.assertIs(DepthFileFormat.for_path("x.raw"), DepthFileFormat.RAW_F32LE)
        self.assertIs(DepthFileFormat.for_path("x.png"), DepthFileFormat.PNG16_WITH_SIDECAR)
        with self.assertRaises(FormatError):
            DepthFileFormat.for_path("x.exr")

    def test_pfm_and_raw_exact(self):
        for name in ("d.pfm", "d.raw"):
            path = save_depth(self.grid, self.tmp / name)
            self.assertTrue(load_depth(path).equals(self.grid))
        self.assertTrue((self.tmp / "d.raw.json").exists())

    def test_png16_with_sidecar(self):
        path = save_depth(self.grid, self.tmp / "d.png")
        sidecar = json.loads((self.tmp / "d.png.json").read_text())
        self.assertEqual((sidecar["width"], sidecar["height"]), (7, 6))
        back = load_depth(path)
        np.testing.assert_allclose(back.values, self.grid.values, atol=5.0 / 65535 + 1e-5)

    def test_missing_sidecar(self):
        (self.tmp / "lonely.raw").write_bytes(b"\x00" * 8)
        with self.assertRaises(FormatError):
            load_depth(self.tmp / "lonely.raw")

    def test_unparsable_sidecar(self):
        (self.tmp / "big.raw").write_bytes(b"\x00" * 8)
        (self.tmp / "big.raw.json").write_text('{"width": ' + "9" * 5000 + ', "height": 1}')
        with self.assertRaises(FormatError):
            load_depth(self.tmp / "big.raw")


class TestManifest(unittest.TestCase):
    """JSON dataset manifests"""

    def test_empty(self):
        self.assertEqual(read_manifest('{"entries": []}').entries, [])

    def test_unknown_fields_are_kept(self):
        text = json.dumps({"entries": [{"id": "a", "image_path": "a.png", "scene": "kitchen"}], "version": 2})
        manifest = read_manifest(text)
        self.assertEqual(manifest.entries[0].model_extra["scene"], "kitchen")
        written = json.loads(write_manifest(manifest))
        self.assertEqual(written["entries"][0]["scene"], "kitchen")
        self.assertEqual(written["version"], 2)
        self.assertNotIn("gt_path", written["entries"][0])

    def test_duplicate_ids(self):
        text = json.dumps({"entries": [{"id": "a", "image_path": "1.png"}, {"id": "a", "image_path": "2.png"}]})
        with self.assertRaises(ManifestError) as ctx:
            read_manifest(text)
        self.assertIn("duplicate", str(ctx.exception))

    def test_syntax_error_location(self):
        with self.assertRaises(ManifestError) as ctx:
            read_manifest('{\n  "entries": [,]\n}')
        self.assertIn("line 2", str(ctx.exception))

    def test_garbage_is_manifest_error(self):
        huge = "9" * 5000
        for bad in (
            b"\xff\xfe\x00",
            b"[]",
            b"42",
            b'{"entries": [{"image_path": "x"}]}',
            b'{"entries": 3}',
            '{"entries": [], "n": ' + huge + "}",
            '{"entries": [{"id": "a", "image_path": "a.png", "depth_cap": ' + huge + "}]}",
            "[" * 100000,
        ):
            with self.assertRaises(ManifestError, msg=repr(bad[:40])):
                read_manifest(bad)

    def test_invalid_gt_space(self):
        text = json.dumps({"entries": [{"id": "a", "image_path": "a.png", "gt_space": "disparity"}]})
        with self.assertRaises(ManifestError):
            read_manifest(text)

    def test_relative_paths_resolve_against_base_dir(self):
        manifest = read_manifest(
            json.dumps({"entries": [{"id": "a", "image_path": "imgs/a.png"}]}), base_dir="/data/set"
        )
        self.assertEqual(manifest.resolve("imgs/a.png"), Path("/data/set/imgs/a.png"))
        self.assertEqual(manifest.resolve("/abs/a.png"), Path("/abs/a.png"))
        self.assertIsNone(manifest.resolve(None))


if __name__ == "__main__":
    unittest.main()
