"""SIFT keypoint detector: Gaussian scale space, DoG pyramid, 26-neighbour
extrema, quadratic subpixel refinement, contrast and edge-response filtering.

Only keypoint locations are produced; orientations and descriptors are not
computed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from keypatch import config
from keypatch.errors import ConfigurationError
from keypatch.imaging.image_core import GrayImage, blur_array, resize_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SiftParams:
    octaves: Optional[int] = None          # None -> derived from image size
    scales_per_octave: int = config.SIFT_SCALES_PER_OCTAVE
    base_sigma: float = config.SIFT_BASE_SIGMA
    assumed_input_blur: float = config.SIFT_ASSUMED_BLUR
    contrast_threshold: float = config.SIFT_CONTRAST
    edge_ratio: float = config.SIFT_EDGE_RATIO
    upsample_first_octave: bool = config.SIFT_UPSAMPLE
    max_octaves: int = config.SIFT_MAX_OCTAVES
    min_octave_dim: int = config.SIFT_MIN_OCTAVE_DIM
    refine_steps: int = config.SIFT_REFINE_STEPS

    def __post_init__(self):
        if self.scales_per_octave < 1:
            raise ConfigurationError(f"scales_per_octave must be >= 1, got {self.scales_per_octave}")
        if not self.base_sigma > self.assumed_input_blur:
            raise ConfigurationError(
                f"base_sigma ({self.base_sigma}) must exceed assumed_input_blur ({self.assumed_input_blur})"
            )
        if not self.contrast_threshold > 0:
            raise ConfigurationError(f"contrast_threshold must be positive, got {self.contrast_threshold}")
        if not self.edge_ratio > 1:
            raise ConfigurationError(f"edge_ratio must be > 1, got {self.edge_ratio}")
        if self.octaves is not None and self.octaves < 0:
            raise ConfigurationError(f"octaves must be >= 0, got {self.octaves}")


@dataclass
class ScaleSpace:
    octaves: List[np.ndarray]   # each (s+3, H_o, W_o)
    sigmas: np.ndarray          # octave-relative level sigmas, length s+3
    image_size: Tuple[int, int]  # (width, height) of the input image


@dataclass
class DoGPyramid:
    octaves: List[np.ndarray]   # each (s+2, H_o, W_o)
    sigmas: np.ndarray          # sigma of the lower Gaussian level of each difference
    image_size: Tuple[int, int]


class ExtremumSite(NamedTuple):
    octave: int
    level: int
    y: int
    x: int


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    octave: int
    response: float     # refined DoG value, |response| >= contrast threshold
    level: int = field(default=0, compare=False)
    ix: int = field(default=0, compare=False)   # final integer anchor in the octave grid
    iy: int = field(default=0, compare=False)


def count_octaves(width: int, height: int, params: SiftParams) -> int:
    """Octaves kept while the octave still halves to at least the minimum dimension."""
    dim = min(width, height)
    if params.upsample_first_octave:
        dim *= 2
    n = 0
    while dim >= 2 * params.min_octave_dim and n < params.max_octaves:
        n += 1
        dim = (dim + 1) // 2
    if params.octaves is not None:
        n = min(n, params.octaves)
    return n


def level_sigmas(params: SiftParams) -> np.ndarray:
    s = params.scales_per_octave
    return params.base_sigma * 2.0 ** (np.arange(s + 3) / s)


def build_scale_space(img: GrayImage, params: SiftParams) -> ScaleSpace:
    sigmas = level_sigmas(params)
    n_octaves = count_octaves(img.width, img.height, params)
    base = img.pixels.astype(np.float64)
    input_blur = params.assumed_input_blur
    if params.upsample_first_octave:
        base = resize_array(base, 2 * img.width, 2 * img.height)
        input_blur *= 2.0

    octaves: List[np.ndarray] = []
    if n_octaves:
        seed_sigma = math.sqrt(max(params.base_sigma ** 2 - input_blur ** 2, 0.01))
        level = blur_array(base, seed_sigma)
        increments = np.sqrt(sigmas[1:] ** 2 - sigmas[:-1] ** 2)
        for o in range(n_octaves):
            levels = [level]
            for inc in increments:
                levels.append(blur_array(levels[-1], float(inc)))
            octaves.append(np.stack(levels))
            # level s carries 2 * base_sigma, which decimation brings back to base_sigma
            level = levels[params.scales_per_octave][::2, ::2]
    logger.debug("[SIFT] scale space: %d octaves for %dx%d", n_octaves, img.width, img.height)
    return ScaleSpace(octaves=octaves, sigmas=sigmas, image_size=(img.width, img.height))


def build_dog(ss: ScaleSpace) -> DoGPyramid:
    return DoGPyramid(
        octaves=[g[1:] - g[:-1] for g in ss.octaves],
        sigmas=ss.sigmas[:-1],
        image_size=ss.image_size,
    )


def detect_extrema(dog: DoGPyramid) -> List[ExtremumSite]:
    """Strict maxima/minima over the 3x3x3 neighbourhood, borders and outer levels excluded."""
    sites: List[ExtremumSite] = []
    for o, d in enumerate(dog.octaves):
        n, h, w = d.shape
        if n < 3 or h < 3 or w < 3:
            continue
        center = d[1:-1, 1:-1, 1:-1]
        is_max = np.ones(center.shape, dtype=bool)
        is_min = np.ones(center.shape, dtype=bool)
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dz == dy == dx == 0:
                        continue
                    nb = d[1 + dz:n - 1 + dz, 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
                    is_max &= center > nb
                    is_min &= center < nb
        for lvl, y, x in np.argwhere(is_max | is_min):
            sites.append(ExtremumSite(o, int(lvl) + 1, int(y) + 1, int(x) + 1))
    return sites


def _derivatives(cube: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian at the centre of a 3x3x3 (level, y, x) cube, order (x, y, s)."""
    c = cube[1, 1, 1]
    dx = 0.5 * (cube[1, 1, 2] - cube[1, 1, 0])
    dy = 0.5 * (cube[1, 2, 1] - cube[1, 0, 1])
    ds = 0.5 * (cube[2, 1, 1] - cube[0, 1, 1])
    dxx = cube[1, 1, 2] - 2 * c + cube[1, 1, 0]
    dyy = cube[1, 2, 1] - 2 * c + cube[1, 0, 1]
    dss = cube[2, 1, 1] - 2 * c + cube[0, 1, 1]
    dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
    dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
    dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
    gradient = np.array([dx, dy, ds])
    hessian = np.array([
        [dxx, dxy, dxs],
        [dxy, dyy, dys],
        [dxs, dys, dss],
    ])
    return gradient, hessian


def passes_edge_test(hessian_xy: np.ndarray, edge_ratio: float) -> bool:
    """Principal-curvature ratio test on the 2x2 spatial Hessian."""
    tr = hessian_xy[0, 0] + hessian_xy[1, 1]
    det = hessian_xy[0, 0] * hessian_xy[1, 1] - hessian_xy[0, 1] * hessian_xy[1, 0]
    if det <= 0:
        return False
    return tr * tr / det < (edge_ratio + 1.0) ** 2 / edge_ratio


def _refine_site(site: ExtremumSite, d: np.ndarray, params: SiftParams):
    n, h, w = d.shape
    lvl, y, x = site.level, site.y, site.x
    for attempt in range(params.refine_steps + 1):
        cube = d[lvl - 1:lvl + 2, y - 1:y + 2, x - 1:x + 2]
        gradient, hessian = _derivatives(cube)
        try:
            offset = -np.linalg.solve(hessian, gradient)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(offset)):
            return None
        if np.all(np.abs(offset) <= 0.5):
            return lvl, y, x, offset, gradient, hessian
        if attempt == params.refine_steps:
            return None
        x += int(np.round(offset[0]))
        y += int(np.round(offset[1]))
        lvl += int(np.round(offset[2]))
        if not (1 <= x <= w - 2 and 1 <= y <= h - 2 and 1 <= lvl <= n - 2):
            return None
    return None


def to_image_coords(x: float, y: float, octave: int, params: SiftParams) -> Tuple[float, float, float]:
    """Octave (x, y) to input-image pixels, plus the octave's scale factor."""
    scale = 2.0 ** octave
    x, y = x * scale, y * scale
    if params.upsample_first_octave:
        # the doubled base image samples input pixel centres at (j + 0.5) / 2 - 0.5
        return (x + 0.5) / 2.0 - 0.5, (y + 0.5) / 2.0 - 0.5, scale / 2.0
    return x, y, scale


def refine_and_filter(sites: List[ExtremumSite], dog: DoGPyramid, params: SiftParams) -> List[Keypoint]:
    width, height = dog.image_size
    s = params.scales_per_octave
    keypoints: List[Keypoint] = []
    dropped = {"refine": 0, "duplicate": 0, "contrast": 0, "edge": 0}
    anchors = set()
    for site in sites:
        d = dog.octaves[site.octave]
        refined = _refine_site(site, d, params)
        if refined is None:
            dropped["refine"] += 1
            continue
        lvl, y, x, offset, gradient, hessian = refined
        if (site.octave, lvl, y, x) in anchors:
            dropped["duplicate"] += 1
            continue
        anchors.add((site.octave, lvl, y, x))
        value = float(d[lvl, y, x] + 0.5 * gradient @ offset)
        if abs(value) < params.contrast_threshold:
            dropped["contrast"] += 1
            continue
        if not passes_edge_test(hessian[:2, :2], params.edge_ratio):
            dropped["edge"] += 1
            continue
        kx, ky, scale = to_image_coords(x + offset[0], y + offset[1], site.octave, params)
        if not (0.0 <= kx < width and 0.0 <= ky < height):
            dropped["refine"] += 1
            continue
        sigma = params.base_sigma * 2.0 ** ((lvl + offset[2]) / s) * scale
        keypoints.append(Keypoint(
            x=float(kx), y=float(ky), sigma=float(sigma), octave=site.octave,
            response=value, level=lvl, ix=x, iy=y,
        ))
    logger.debug("[SIFT] %d sites -> %d keypoints (dropped %s)", len(sites), len(keypoints), dropped)
    return keypoints


def detect_keypoints(img: GrayImage, params: Optional[SiftParams] = None) -> List[Keypoint]:
    params = params or SiftParams()
    dog = build_dog(build_scale_space(img, params))
    keypoints = refine_and_filter(detect_extrema(dog), dog, params)
    keypoints.sort(key=lambda k: (k.y, k.x, k.sigma))
    logger.info("[SIFT] %d keypoints on %dx%d image", len(keypoints), img.width, img.height)
    return keypoints
