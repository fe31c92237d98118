import math

import numpy as np
import pytest

from keypatch.errors import ConfigurationError
from keypatch.imaging.image_core import GrayImage, rotate90
from keypatch.imaging.sift import (
    DoGPyramid,
    ExtremumSite,
    SiftParams,
    build_dog,
    build_scale_space,
    count_octaves,
    detect_extrema,
    detect_keypoints,
    level_sigmas,
    passes_edge_test,
    to_image_coords,
)


def brute_force_extrema(dog):
    found = set()
    for o, d in enumerate(dog.octaves):
        n, h, w = d.shape
        for s in range(1, n - 1):
            for y in range(1, h - 1):
                for x in range(1, w - 1):
                    v = d[s, y, x]
                    nb = d[s - 1:s + 2, y - 1:y + 2, x - 1:x + 2].reshape(-1)
                    others = np.delete(nb, 13)
                    if np.all(v > others) or np.all(v < others):
                        found.add((o, s, y, x))
    return found


def dense_gaussian(arr, sigma):
    """Full 2-D Gaussian convolution with clamp-to-border padding."""
    r = int(math.ceil(4.0 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    h, w = arr.shape
    padded = np.pad(arr, r, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += k[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def spatial_hessian(d, level, y, x):
    c = d[level, y, x]
    dxx = d[level, y, x + 1] - 2 * c + d[level, y, x - 1]
    dyy = d[level, y + 1, x] - 2 * c + d[level, y - 1, x]
    dxy = 0.25 * (d[level, y + 1, x + 1] - d[level, y + 1, x - 1]
                  - d[level, y - 1, x + 1] + d[level, y - 1, x - 1])
    return np.array([[dxx, dxy], [dxy, dyy]])


class TestParams:
    def test_defaults_are_valid(self):
        p = SiftParams()
        assert p.scales_per_octave == 3
        assert p.base_sigma == 1.6

    @pytest.mark.parametrize("kwargs", [
        {"scales_per_octave": 0},
        {"contrast_threshold": 0.0},
        {"edge_ratio": 1.0},
        {"base_sigma": 0.4},
        {"octaves": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            SiftParams(**kwargs)


class TestScaleSpace:
    @pytest.mark.parametrize("size,expected", [(64, 2), (128, 3), (256, 4), (31, 0), (32, 1)])
    def test_octave_count(self, size, expected):
        assert count_octaves(size, size, SiftParams()) == expected

    def test_octave_count_uses_smaller_side_and_caps(self):
        assert count_octaves(256, 64, SiftParams()) == 2
        assert count_octaves(256, 256, SiftParams(octaves=2)) == 2
        assert count_octaves(64, 64, SiftParams(upsample_first_octave=True)) == 3

    def test_level_sigma_schedule(self):
        expected = 1.6 * np.array([1, 2 ** (1 / 3), 2 ** (2 / 3), 2, 2 ** (4 / 3), 2 ** (5 / 3)])
        np.testing.assert_allclose(level_sigmas(SiftParams()), expected)

    def test_pyramid_shapes(self, blob_image):
        ss = build_scale_space(blob_image, SiftParams())
        assert [o.shape for o in ss.octaves] == [(6, 64, 64), (6, 32, 32)]
        dog = build_dog(ss)
        assert [o.shape for o in dog.octaves] == [(5, 64, 64), (5, 32, 32)]

    def test_blur_increases_with_level(self, blob_image):
        first = build_scale_space(blob_image, SiftParams()).octaves[0]
        peaks = first[:, 32, 32]
        assert np.all(np.diff(peaks) < 0)

    def test_next_octave_seeded_by_decimation(self, textured_image):
        params = SiftParams()
        ss = build_scale_space(textured_image, params)
        s = params.scales_per_octave
        for o in range(1, len(ss.octaves)):
            np.testing.assert_array_equal(ss.octaves[o][0], ss.octaves[o - 1][s][::2, ::2])

    def test_impulse_dog_matches_dense_convolution(self):
        pixels = np.zeros((64, 64))
        pixels[32, 32] = 1.0
        params = SiftParams()
        dog = build_dog(build_scale_space(GrayImage(pixels), params))
        applied = np.sqrt(level_sigmas(params) ** 2 - params.assumed_input_blur ** 2)
        for lvl in range(len(applied) - 1):
            expected = dense_gaussian(pixels, applied[lvl + 1]) - dense_gaussian(pixels, applied[lvl])
            np.testing.assert_allclose(dog.octaves[0][lvl], expected, atol=1e-4)


class TestExtrema:
    def test_matches_brute_force_scan(self, rng):
        dog = DoGPyramid(
            octaves=[rng.normal(size=(5, 9, 11)), rng.normal(size=(5, 5, 6))],
            sigmas=level_sigmas(SiftParams())[:-1],
            image_size=(11, 9),
        )
        sites = detect_extrema(dog)
        assert len(sites) == len(set(sites))
        assert {tuple(s) for s in sites} == brute_force_extrema(dog)

    def test_plateau_is_not_an_extremum(self):
        d = np.zeros((3, 5, 5))
        d[1, 2, 2] = d[1, 2, 3] = 1.0
        dog = DoGPyramid(octaves=[d], sigmas=np.ones(3), image_size=(5, 5))
        assert detect_extrema(dog) == []

    def test_single_peak(self):
        d = np.zeros((3, 5, 5))
        d[1, 2, 3] = -1.0
        dog = DoGPyramid(octaves=[d], sigmas=np.ones(3), image_size=(5, 5))
        assert detect_extrema(dog) == [ExtremumSite(0, 1, 2, 3)]


class TestEdgeTest:
    def test_isotropic_passes(self):
        assert passes_edge_test(np.eye(2), 10.0)

    def test_elongated_rejected(self):
        assert not passes_edge_test(np.diag([1.0, 0.05]), 10.0)

    def test_saddle_rejected(self):
        assert not passes_edge_test(np.diag([1.0, -1.0]), 10.0)


class TestDetectKeypoints:
    def test_constant_image(self):
        assert detect_keypoints(GrayImage(np.full((64, 64), 0.5))) == []

    def test_step_edge_has_no_keypoints(self):
        pixels = np.zeros((64, 64))
        pixels[:, 32:] = 1.0
        assert detect_keypoints(GrayImage(pixels)) == []

    def test_blob_found_near_center(self, blob_image):
        keypoints = detect_keypoints(blob_image)
        assert keypoints
        nearest = min(math.hypot(k.x - 32.0, k.y - 32.0) for k in keypoints)
        assert nearest <= 2.0
        for k in keypoints:
            assert abs(k.response) >= SiftParams().contrast_threshold
            assert 0.0 <= k.x < 64 and 0.0 <= k.y < 64

    def test_blob_scale_tracks_blob_size(self, blob_image):
        k = min(detect_keypoints(blob_image), key=lambda k: math.hypot(k.x - 32.0, k.y - 32.0))
        assert 1.6 < k.sigma < 8.0

    def test_output_sorted(self, textured_image):
        keypoints = detect_keypoints(textured_image)
        keys = [(k.y, k.x, k.sigma) for k in keypoints]
        assert keys == sorted(keys)

    def test_deterministic(self, textured_image):
        assert detect_keypoints(textured_image) == detect_keypoints(textured_image)

    def test_contrast_threshold_is_monotone(self, textured_image):
        counts = [len(detect_keypoints(textured_image, SiftParams(contrast_threshold=t)))
                  for t in (0.01, 0.02, 0.03, 0.05, 0.08)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_rotation_correspondence(self, textured_image):
        width = textured_image.width
        original = detect_keypoints(textured_image)
        rotated = detect_keypoints(rotate90(textured_image))
        assert len(original) >= 5
        pts = np.array([(k.x, k.y) for k in rotated])
        matched = 0
        for k in original:
            # (x, y) -> (y, width - 1 - x) under the quarter turn
            target = np.array([k.y, width - 1 - k.x])
            if len(pts) and np.min(np.hypot(*(pts - target).T)) <= 2.0:
                matched += 1
        assert matched / len(original) >= 0.8

    def test_upsampled_first_octave_keeps_image_coordinates(self, blob_image):
        keypoints = detect_keypoints(blob_image, SiftParams(upsample_first_octave=True))
        assert keypoints
        nearest = min(math.hypot(k.x - 32.0, k.y - 32.0) for k in keypoints)
        assert nearest <= 2.0

    def test_every_keypoint_passes_edge_test(self, textured_image):
        params = SiftParams()
        dog = build_dog(build_scale_space(textured_image, params))
        keypoints = detect_keypoints(textured_image, params)
        assert keypoints
        for k in keypoints:
            hessian = spatial_hessian(dog.octaves[k.octave], k.level, k.iy, k.ix)
            assert passes_edge_test(hessian, params.edge_ratio)

    @pytest.mark.parametrize("shift", [-0.2, -0.1, 0.1, 0.2])
    def test_brightness_shift_keeps_count(self, textured_image, shift):
        base = len(detect_keypoints(textured_image))
        shifted = len(detect_keypoints(GrayImage(textured_image.pixels + shift)))
        assert base > 0
        assert abs(shifted - base) <= 0.1 * base


class TestImageCoords:
    def test_octave_scaling(self):
        assert to_image_coords(3.0, 4.5, 2, SiftParams()) == (12.0, 18.0, 4.0)
        assert to_image_coords(3.0, 4.5, 0, SiftParams()) == (3.0, 4.5, 1.0)

    def test_upsampled_base(self):
        params = SiftParams(upsample_first_octave=True)
        assert to_image_coords(2.0, 4.0, 0, params) == (0.75, 1.75, 0.5)
        assert to_image_coords(2.0, 4.0, 1, params) == (1.75, 3.75, 1.0)
