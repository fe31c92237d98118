
import numpy as np
import pytest
from PIL import Image

from keypatch.errors import ConfigurationError, DecodeError
from keypatch.imaging.image_core import (
    GrayImage,
    RgbImage,
    blur_array,
    center_crop_square,
    gaussian_blur,
    gaussian_kernel,
    load_image,
    prepare_model_input,
    resize_array,
    rotate90,
    save_pgm,
    save_png,
    save_ppm,
    to_grayscale,
)


def dense_blur(arr, sigma):
    """2-D convolution with the outer-product kernel and clamp-to-border padding."""
    k1 = gaussian_kernel(sigma)
    k2 = np.outer(k1, k1)
    r = len(k1) // 2
    padded = np.pad(arr, r, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    h, w = arr.shape
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += k2[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def png_bytes(pixels: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


class TestLoadImage:
    def test_png_rgb(self, tmp_path):
        pixels = np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3)
        path = tmp_path / "a.png"
        path.write_bytes(png_bytes(pixels))
        img = load_image(path)
        assert (img.width, img.height) == (5, 4)
        np.testing.assert_allclose(img.pixels, pixels / 255.0)

    def test_png_grayscale_is_expanded(self, tmp_path):
        pixels = np.full((3, 3), 51, dtype=np.uint8)
        path = tmp_path / "g.png"
        path.write_bytes(png_bytes(pixels))
        img = load_image(path)
        np.testing.assert_allclose(img.pixels, np.full((3, 3, 3), 0.2))

    def test_ppm_with_comment(self, tmp_path):
        body = bytes(range(12))
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 2\n255\n" + body)
        img = load_image(path)
        np.testing.assert_allclose(img.pixels.reshape(-1), np.arange(12) / 255.0)

    def test_unknown_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"GIF89a....")
        with pytest.raises(DecodeError) as exc:
            load_image(path)
        assert exc.value.offset == 0

    def test_truncated_ppm_body(self, tmp_path):
        data = b"P6\n4 4\n255\n" + bytes(10)
        path = tmp_path / "t.ppm"
        path.write_bytes(data)
        with pytest.raises(DecodeError) as exc:
            load_image(path)
        assert exc.value.offset == len(data)

    def test_sixteen_bit_ppm_rejected(self, tmp_path):
        path = tmp_path / "w.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(DecodeError, match="8-bit"):
            load_image(path)

    def test_sample_above_maxval(self, tmp_path):
        header = b"P6\n1 1\n100\n"
        path = tmp_path / "m.ppm"
        path.write_bytes(header + bytes([255, 255, 255]))
        with pytest.raises(DecodeError, match="maxval") as exc:
            load_image(path)
        assert exc.value.offset == len(header)

    def test_ppm_extremes(self, tmp_path):
        black = tmp_path / "black.ppm"
        black.write_bytes(b"P6\n1 1\n255\n" + bytes(3))
        np.testing.assert_array_equal(load_image(black).pixels, np.zeros((1, 1, 3)))
        white = tmp_path / "white.ppm"
        white.write_bytes(b"P6\n2 2\n255\n" + bytes([255] * 12))
        np.testing.assert_array_equal(load_image(white).pixels, np.ones((2, 2, 3)))

    def test_png_crc_mismatch_reports_chunk_offset(self, tmp_path):
        data = bytearray(png_bytes(np.zeros((2, 2, 3), dtype=np.uint8)))
        # IHDR starts right after the signature; flip a byte of its CRC
        data[8 + 8 + 13] ^= 0xFF
        path = tmp_path / "bad.png"
        path.write_bytes(bytes(data))
        with pytest.raises(DecodeError, match="CRC") as exc:
            load_image(path)
        assert exc.value.offset == 8

    def test_png_truncated(self, tmp_path):
        data = png_bytes(np.zeros((8, 8, 3), dtype=np.uint8))
        path = tmp_path / "cut.png"
        path.write_bytes(data[:-6])
        with pytest.raises(DecodeError) as exc:
            load_image(path)
        assert exc.value.offset is not None

    def test_png_without_iend(self, tmp_path):
        data = png_bytes(np.zeros((2, 2, 3), dtype=np.uint8))
        iend = data.rindex(b"IEND") - 4
        path = tmp_path / "noend.png"
        path.write_bytes(data[:iend])
        with pytest.raises(DecodeError, match="IEND") as exc:
            load_image(path)
        assert exc.value.offset == iend


class TestWriters:
    def test_pgm_header_and_quantization(self, tmp_path):
        path = tmp_path / "h.pgm"
        save_pgm(path, GrayImage(np.array([[0.0, 0.5], [1.0, 2.0]])))
        data = path.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [0, 128, 255, 255]

    def test_ppm_and_png_decode_back(self, tmp_path):
        pixels = np.random.default_rng(0).integers(0, 256, size=(6, 7, 3)) / 255.0
        img = RgbImage(pixels)
        save_ppm(tmp_path / "a.ppm", img)
        save_png(tmp_path / "a.png", img)
        np.testing.assert_allclose(load_image(tmp_path / "a.ppm").pixels, pixels)
        np.testing.assert_allclose(load_image(tmp_path / "a.png").pixels, pixels)


class TestGrayscale:
    def test_luma_weights(self):
        img = RgbImage(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]]))
        np.testing.assert_allclose(to_grayscale(img).pixels, [[0.299, 0.587, 0.114, 1.0]])


class TestGaussianBlur:
    def test_kernel_normalized(self):
        for sigma in (0.5, 1.0, 1.6, 3.2):
            k = gaussian_kernel(sigma)
            assert len(k) == 2 * int(np.ceil(4 * sigma)) + 1
            assert k.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(k, k[::-1])

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_non_positive_sigma(self, sigma):
        with pytest.raises(ConfigurationError):
            gaussian_kernel(sigma)

    def test_matches_dense_convolution(self, rng):
        arr = rng.random((23, 31))
        for sigma in (0.8, 1.6, 2.5):
            np.testing.assert_allclose(blur_array(arr, sigma), dense_blur(arr, sigma), atol=1e-12)

    def test_constant_image_unchanged(self):
        img = GrayImage(np.full((17, 9), 0.37))
        np.testing.assert_allclose(gaussian_blur(img, 2.0).pixels, 0.37, atol=1e-12)

    def test_impulse_spreads_symmetrically(self):
        arr = np.zeros((21, 21))
        arr[10, 10] = 1.0
        out = blur_array(arr, 1.5)
        assert out.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(out, out.T, atol=1e-15)
        np.testing.assert_allclose(out, out[::-1, ::-1], atol=1e-15)

    def test_impulse_peak_is_normalized_gaussian(self):
        arr = np.zeros((33, 33))
        arr[16, 16] = 1.0
        sigma = 1.6
        out = blur_array(arr, sigma)
        assert out[16, 16] == pytest.approx(1.0 / (2.0 * np.pi * sigma ** 2), rel=1e-4)
        assert out.max() == out[16, 16]

    def test_semigroup(self, rng):
        arr = rng.random((64, 64))
        s1, s2 = 1.0, 1.2
        twice = blur_array(blur_array(arr, s1), s2)
        once = blur_array(arr, float(np.hypot(s1, s2)))
        np.testing.assert_allclose(twice[12:-12, 12:-12], once[12:-12, 12:-12], atol=1e-3)

    def test_mean_preserved_away_from_borders(self, rng):
        arr = np.zeros((60, 60))
        arr[20:40, 20:40] = rng.random((20, 20))
        for sigma in (0.8, 1.6, 2.4):
            assert blur_array(arr, sigma).mean() == pytest.approx(arr.mean(), abs=1e-12)

    def test_extremes_move_inward(self, rng):
        level = rng.random((40, 40))
        for sigma in (0.7, 1.0, 1.6, 2.5):
            nxt = blur_array(level, sigma)
            assert nxt.max() <= level.max() + 1e-6
            assert nxt.min() >= level.min() - 1e-6
            level = nxt


class TestResize:
    def test_same_size_is_copy(self, rng):
        arr = rng.random((5, 6))
        out = resize_array(arr, 6, 5)
        np.testing.assert_array_equal(out, arr)
        assert out is not arr

    def test_constant_stays_constant(self):
        out = resize_array(np.full((10, 14, 3), 0.25), 7, 5)
        assert out.shape == (5, 7, 3)
        np.testing.assert_allclose(out, 0.25)

    def test_halving_averages_pairs(self):
        arr = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = resize_array(arr, 2, 2)
        expected = arr.reshape(2, 2, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out, expected)

    def test_zero_size_rejected(self):
        with pytest.raises(ConfigurationError):
            resize_array(np.zeros((4, 4)), 0, 4)

    def test_checkerboard_to_single_pixel(self):
        out = resize_array(np.array([[0.0, 1.0], [1.0, 0.0]]), 1, 1)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(0.5)


class TestModelInput:
    def test_center_crop(self):
        pixels = np.zeros((4, 8, 3))
        pixels[:, 2:6] = 1.0
        square = center_crop_square(RgbImage(pixels))
        assert (square.width, square.height) == (4, 4)
        np.testing.assert_allclose(square.pixels, 1.0)

    def test_prepare_resizes_to_model_resolution(self, textured_rgb):
        out = prepare_model_input(textured_rgb, 32)
        assert (out.width, out.height) == (32, 32)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


class TestRotate90:
    def test_coordinate_mapping(self, rng):
        arr = rng.random((6, 9))
        rot = rotate90(GrayImage(arr))
        assert (rot.width, rot.height) == (6, 9)
        for y, x in [(0, 0), (2, 5), (5, 8)]:
            assert rot.pixels[9 - 1 - x, y] == arr[y, x]
