import io

import numpy as np
import pytest
from PIL import Image

from nedf.errors import FormatError
from nedf.imgio import (
    depth_to_gray,
    encode_color_png,
    encode_depth_png,
    encode_gray_png,
    encode_id_png,
    read_color_png,
    read_depth_raw,
    read_ppm,
    write_color_png,
    write_depth_raw,
    write_ppm,
)


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.random((5, 7, 3))
        path = tmp_path / "img.ppm"
        write_ppm(path, rgb)
        back = read_ppm(path)
        assert back.shape == (5, 7, 3)
        assert np.max(np.abs(back - rgb)) <= 0.5 / 255 + 1e-9

    def test_rejects_non_ppm(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            read_ppm(path)


class TestPng:
    def test_color_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.random((6, 4, 3))
        path = tmp_path / "img.png"
        write_color_png(path, rgb)
        back = read_color_png(path)
        assert np.max(np.abs(back - rgb)) <= 0.5 / 255 + 1e-9

    def test_encode_bytes_decodable(self):
        rgb = np.zeros((3, 3, 3))
        rgb[1, 1] = (1, 0, 0)
        data = encode_color_png(rgb)
        img = Image.open(io.BytesIO(data))
        assert img.size == (3, 3)
        assert img.getpixel((1, 1)) == (255, 0, 0)

    def test_id_png_is_16bit_shifted(self):
        ids = np.array([[-1, 0], [1, 500]], dtype=np.int32)
        img = Image.open(io.BytesIO(encode_id_png(ids)))
        vals = np.asarray(img)
        np.testing.assert_array_equal(vals, [[0, 1], [2, 501]])

    def test_gray_png(self):
        plane = np.array([[0.0, 0.5], [1.0, 2.0]])
        img = Image.open(io.BytesIO(encode_gray_png(plane)))
        vals = np.asarray(img)
        np.testing.assert_array_equal(vals, [[0, 128], [255, 255]])


class TestDepthRaw:
    def test_round_trip_with_inf(self, tmp_path):
        depth = np.array([[1.5, np.inf], [0.25, 3.0]])
        path = tmp_path / "d.ndpt"
        write_depth_raw(path, depth, scale=2.0)
        back, scale = read_depth_raw(path)
        assert scale == 2.0
        np.testing.assert_array_equal(back, depth)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "d.ndpt"
        write_depth_raw(path, np.ones((4, 4)))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_depth_raw(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "d.ndpt"
        path.write_bytes(b"XXXX" + b"\0" * 28)
        with pytest.raises(FormatError):
            read_depth_raw(path)


class TestDepthGray:
    def test_near_bright_far_dark_misses_black(self):
        depth = np.array([[1.0, 3.0], [np.inf, 2.0]])
        gray = depth_to_gray(depth)
        assert gray[0, 0] == 255  # nearest
        assert gray[0, 1] == 0  # farthest
        assert gray[1, 0] == 0  # miss
        assert 0 < gray[1, 1] < 255

    def test_all_miss_plane(self):
        gray = depth_to_gray(np.full((2, 2), np.inf))
        np.testing.assert_array_equal(gray, 0)

    def test_encode_depth_png_shape(self):
        data = encode_depth_png(np.full((4, 6), np.inf))
        img = Image.open(io.BytesIO(data))
        assert img.size == (6, 4)
