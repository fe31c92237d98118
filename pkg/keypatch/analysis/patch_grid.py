"""Non-overlapping P x P patch grid and per-patch SIFT keypoint counts."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Tuple

import numpy as np

from keypatch.errors import ConfigurationError, ContractError
from keypatch.imaging.sift import Keypoint

logger = logging.getLogger(__name__)


class PatchIdentity(str, Enum):
    KEYPOINT = "keypoint"
    NON_KEYPOINT = "non_keypoint"


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, width: int, height: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise ConfigurationError(f"patch size must be positive, got {patch_size}")
        if width % patch_size or height % patch_size:
            raise ConfigurationError(
                f"image {width}x{height} is not divisible into {patch_size}x{patch_size} patches"
            )
        return cls(patch_size=patch_size, rows=height // patch_size, cols=width // patch_size)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def width(self) -> int:
        return self.cols * self.patch_size

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    def position(self, index: int) -> Tuple[int, int]:
        return divmod(index, self.cols)

    def bounds(self, index: int) -> Tuple[int, int, int, int]:
        """(top, left, bottom, right) pixel bounds of a patch, bottom/right exclusive."""
        row, col = self.position(index)
        p = self.patch_size
        return row * p, col * p, (row + 1) * p, (col + 1) * p


@dataclass(frozen=True)
class PatchStats:
    counts: np.ndarray   # t_j, int64, length N

    @property
    def n_patches(self) -> int:
        return len(self.counts)

    @property
    def is_keypoint(self) -> np.ndarray:
        return self.counts >= 1

    def identity(self, index: int) -> PatchIdentity:
        return PatchIdentity.KEYPOINT if self.counts[index] >= 1 else PatchIdentity.NON_KEYPOINT

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def assign_keypoints(grid: PatchGrid, keypoints: Iterable[Keypoint]) -> PatchStats:
    counts = np.zeros(grid.n_patches, dtype=np.int64)
    p = grid.patch_size
    for kp in keypoints:
        if not (0.0 <= kp.x < grid.width and 0.0 <= kp.y < grid.height):
            raise ContractError(
                f"keypoint ({kp.x:.3f}, {kp.y:.3f}) outside {grid.width}x{grid.height} grid"
            )
        row, col = int(kp.y // p), int(kp.x // p)
        counts[row * grid.cols + col] += 1
    stats = PatchStats(counts)
    logger.debug("[GRID] %d keypoints over %d patches, %d keypoint patches",
                 stats.total, grid.n_patches, int(stats.is_keypoint.sum()))
    return stats


def split_identity_sets(stats: PatchStats) -> Tuple[np.ndarray, np.ndarray]:
    """(S_Key, S_Non) as ascending index arrays."""
    key = stats.is_keypoint
    return np.flatnonzero(key), np.flatnonzero(~key)
