import struct

import numpy as np
import pytest
from PIL import Image as PILImage

from keyreg.errors import DatasetError
from keyreg.image_io import (
    read_fmap,
    read_image,
    read_keypoints,
    read_logits,
    read_mask,
    write_fmap,
    write_image,
    write_keypoints,
    write_mask,
)
from keyreg.imagecore import Keypoint


class TestImages:
    def test_colour_png_values(self, tmp_path, fundus):
        path = tmp_path / "img.png"
        write_image(path, fundus.image)
        back = read_image(path)
        assert back.shape == fundus.image.shape
        assert back.dtype == np.float32
        assert np.abs(back - fundus.image).max() <= 0.5 / 255 + 1e-6

    def test_gray_png(self, tmp_path, texture):
        path = tmp_path / "gray.png"
        write_image(path, texture)
        assert read_image(path).ndim == 2

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DatasetError):
            read_image(bad)

    def test_mask(self, tmp_path, fundus):
        path = tmp_path / "mask.png"
        write_mask(path, fundus.roi)
        np.testing.assert_array_equal(read_mask(path), fundus.roi)


class TestFmap:
    def test_header_layout(self, tmp_path):
        data = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "a.fmap"
        write_fmap(path, data)
        raw = path.read_bytes()
        assert raw[:4] == b"FMAP"
        assert struct.unpack("<III", raw[4:16]) == (3, 2, 1)
        assert len(raw) == 16 + 4 * 6

    def test_values(self, tmp_path, fundus):
        path = tmp_path / "logits.fmap"
        write_fmap(path, fundus.logits)
        np.testing.assert_array_equal(read_fmap(path), fundus.logits)

    def test_multichannel(self, tmp_path, rng):
        data = rng.normal(size=(4, 5, 3)).astype(np.float32)
        path = tmp_path / "d.fmap"
        write_fmap(path, data)
        np.testing.assert_array_equal(read_fmap(path), data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.fmap"
        path.write_bytes(b"NOPE" + struct.pack("<III", 1, 1, 1) + b"\0\0\0\0")
        with pytest.raises(DatasetError):
            read_fmap(path)

    def test_truncated_body(self, tmp_path):
        path = tmp_path / "x.fmap"
        path.write_bytes(b"FMAP" + struct.pack("<III", 2, 2, 1) + b"\0" * 8)
        with pytest.raises(DatasetError):
            read_fmap(path)


class TestLogits:
    def test_png16_affine(self, tmp_path):
        raw = np.array([[0, 1000], [30000, 65535]], dtype=np.uint16)
        path = tmp_path / "logits.png"
        PILImage.fromarray(raw).save(path)
        logits = read_logits(path, scale=0.001, offset=-30.0)
        np.testing.assert_allclose(logits, raw * 0.001 - 30.0, rtol=1e-6)

    def test_fmap_by_extension(self, tmp_path, fundus):
        path = tmp_path / "logits.fmap"
        write_fmap(path, fundus.logits)
        np.testing.assert_array_equal(read_logits(path), fundus.logits)


class TestKeypointFiles:
    def test_round_trip_is_exact(self, tmp_path):
        kps = [Keypoint(1.25, 2.5, 0.1), Keypoint(100.0, 0.0, 3.0)]
        path = tmp_path / "kps.csv"
        write_keypoints(path, kps)
        assert read_keypoints(path) == kps

    def test_response_defaults_to_one(self, tmp_path):
        path = tmp_path / "kps.csv"
        path.write_text("x,y\n3,4\n")
        assert read_keypoints(path) == [Keypoint(3.0, 4.0, 1.0)]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "kps.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DatasetError):
            read_keypoints(path)
