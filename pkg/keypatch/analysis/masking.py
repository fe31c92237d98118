"""Patch mask plans: Top/Bottom by theta-bar, guided keypoint-fraction masks and the beta curriculum."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from keypatch import config
from keypatch.analysis.patch_grid import PatchGrid, PatchStats, split_identity_sets
from keypatch.errors import ConfigurationError, ContractError, DecodeError
from keypatch.imaging.image_core import RgbImage

logger = logging.getLogger(__name__)

GRAY_FILL = 0.5


class MaskMode(str, Enum):
    TOP = "top"
    BOTTOM = "bottom"
    GUIDED = "guided"
    RANDOM = "random"

    @classmethod
    def parse(cls, value: str) -> "MaskMode":
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigurationError(f"unknown mask mode {value!r}") from None


class FillMode(str, Enum):
    MEAN = "mean"
    GRAY = "gray"
    BLACK = "black"

    @classmethod
    def parse(cls, value: str) -> "FillMode":
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigurationError(f"unknown fill mode {value!r}") from None


@dataclass(frozen=True)
class MaskPlan:
    mode: MaskMode
    ratio: float
    masked: Tuple[int, ...]      # ascending, distinct
    beta: Optional[float] = None
    seed: Optional[int] = None
    shortfall: bool = False

    def __len__(self) -> int:
        return len(self.masked)

    def as_array(self) -> np.ndarray:
        return np.array(self.masked, dtype=np.int64)


def _check_ratio(r: float) -> None:
    if not (0.0 < r <= 1.0):
        raise ConfigurationError(f"mask ratio must be in (0, 1], got {r}")


def _check_beta(beta: float) -> None:
    if not (0.0 <= beta <= 1.0):
        raise ConfigurationError(f"beta must be in [0, 1], got {beta}")


def _check_seed(seed: int) -> None:
    if seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_count(n_patches: int, r: float) -> int:
    """round(N * r), halves rounded up, clamped to [0, N]."""
    _check_ratio(r)
    return min(max(_round_half_up(n_patches * r), 0), n_patches)


def rank_mask(theta_bar: Sequence[float], r: float, mode: MaskMode = MaskMode.TOP) -> MaskPlan:
    scores = np.asarray(theta_bar, dtype=np.float64)
    n = len(scores)
    count = mask_count(n, r)
    index = np.arange(n)
    if mode is MaskMode.TOP:
        order = np.lexsort((index, -scores))
    elif mode is MaskMode.BOTTOM:
        order = np.lexsort((index, scores))
    else:
        raise ConfigurationError(f"rank_mask needs mode top or bottom, got {mode.value}")
    masked = tuple(sorted(int(i) for i in order[:count]))
    logger.debug("[MASK] %s r=%g: %d of %d patches", mode.value, r, count, n)
    return MaskPlan(mode=mode, ratio=r, masked=masked)


def random_mask(n_patches: int, r: float, seed: int) -> MaskPlan:
    """Plain uniform masking without replacement (MAE baseline)."""
    count = mask_count(n_patches, r)
    _check_seed(seed)
    rng = np.random.default_rng(seed)
    picked = rng.permutation(n_patches)[:count]
    return MaskPlan(mode=MaskMode.RANDOM, ratio=r, masked=tuple(sorted(int(i) for i in picked)), seed=seed)


def guided_mask(stats: PatchStats, r: float, beta: float, seed: int) -> MaskPlan:
    """Mask round(N*r) patches of which round(M*beta) are keypoint patches.

    When a pool is too small the whole pool is taken and the deficit is
    backfilled from the other pool; the plan is flagged with shortfall.
    """
    _check_beta(beta)
    _check_seed(seed)
    m = mask_count(stats.n_patches, r)
    k_key = _round_half_up(m * beta)
    k_non = m - k_key
    key_pool, non_pool = split_identity_sets(stats)

    shortfall = False
    if k_key > len(key_pool):
        k_non += k_key - len(key_pool)
        k_key = len(key_pool)
        shortfall = True
    elif k_non > len(non_pool):
        k_key += k_non - len(non_pool)
        k_non = len(non_pool)
        shortfall = True

    rng = np.random.default_rng(seed)
    key_pick = rng.permutation(key_pool)[:k_key]
    non_pick = rng.permutation(non_pool)[:k_non]
    masked = tuple(sorted(int(i) for i in np.concatenate([key_pick, non_pick])))
    if shortfall:
        logger.warning("[MASK] guided beta=%g: pools too small (%d keypoint, %d non-keypoint), "
                       "masked %d keypoint patches instead of %d",
                       beta, len(key_pool), len(non_pool), k_key, _round_half_up(m * beta))
    return MaskPlan(mode=MaskMode.GUIDED, ratio=r, masked=masked, beta=beta, seed=seed, shortfall=shortfall)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Ordered (beta, rounds) stages; beta never decreases. The last stage persists."""

    stages: Tuple[Tuple[float, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("curriculum schedule has no stages")
        previous = -math.inf
        for beta, rounds in self.stages:
            _check_beta(beta)
            if rounds < 1:
                raise ConfigurationError(f"curriculum stage for beta={beta} must last at least one round")
            if beta < previous:
                raise ConfigurationError("curriculum betas must be non-decreasing")
            previous = beta

    @property
    def total_rounds(self) -> int:
        return sum(rounds for _, rounds in self.stages)

    def stage_for_round(self, round_index: int) -> int:
        if round_index < 0:
            raise ConfigurationError(f"round must be non-negative, got {round_index}")
        end = 0
        for i, (_, rounds) in enumerate(self.stages):
            end += rounds
            if round_index < end:
                return i
        return len(self.stages) - 1

    def beta_for_round(self, round_index: int) -> float:
        return self.stages[self.stage_for_round(round_index)][0]


def stepped_schedule(betas: Sequence[float] = tuple(config.CURRICULUM_BETAS),
                     rounds: int = config.CURRICULUM_ROUNDS) -> CurriculumSchedule:
    """Five datasets from beta 0.1 to 0.5, difficulty stepped every ten rounds."""
    return CurriculumSchedule(tuple((float(b), rounds) for b in betas))


def schedule_masks(stats: PatchStats, r: float, schedule: CurriculumSchedule,
                   round_index: int, seed: int) -> MaskPlan:
    beta = schedule.beta_for_round(round_index)
    return guided_mask(stats, r, beta, seed ^ round_index)


def apply_mask(img: RgbImage, plan: MaskPlan, grid: PatchGrid, fill: FillMode = FillMode.MEAN) -> RgbImage:
    if (img.width, img.height) != (grid.width, grid.height):
        raise ContractError(f"image {img.width}x{img.height} does not match grid {grid.width}x{grid.height}")
    if plan.masked and (plan.masked[0] < 0 or plan.masked[-1] >= grid.n_patches):
        raise ContractError(f"mask plan indexes patches outside a {grid.n_patches}-patch grid")

    if fill is FillMode.MEAN:
        value = img.pixels.reshape(-1, 3).mean(axis=0)
    elif fill is FillMode.GRAY:
        value = np.full(3, GRAY_FILL)
    else:
        value = np.zeros(3)

    out = np.array(img.pixels, dtype=np.float64, copy=True)
    for index in plan.masked:
        top, left, bottom, right = grid.bounds(index)
        out[top:bottom, left:right, :] = value
    return RgbImage(out)


def plan_to_dict(plan: MaskPlan) -> Dict[str, Any]:
    return {
        "mode": plan.mode.value,
        "r": plan.ratio,
        "beta": plan.beta,
        "seed": plan.seed,
        "masked": list(plan.masked),
        "shortfall": plan.shortfall,
    }


def plan_to_json(plan: MaskPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2) + "\n"


def plan_from_json(text: str) -> MaskPlan:
    try:
        raw = json.loads(text)
    except ValueError as e:
        raise DecodeError(f"mask plan is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise DecodeError("mask plan must be a JSON object")
    missing = {"mode", "r", "masked"} - raw.keys()
    if missing:
        raise DecodeError(f"mask plan is missing {sorted(missing)}")

    masked = raw["masked"]
    if not isinstance(masked, list) or not all(isinstance(i, int) and i >= 0 for i in masked):
        raise DecodeError("mask plan 'masked' must be a list of non-negative patch indices")
    if len(set(masked)) != len(masked):
        raise DecodeError("mask plan lists a patch more than once")
    ratio = float(raw["r"])
    _check_ratio(ratio)
    beta = raw.get("beta")
    if beta is not None:
        _check_beta(float(beta))
    return MaskPlan(
        mode=MaskMode.parse(str(raw["mode"])),
        ratio=ratio,
        masked=tuple(sorted(masked)),
        beta=None if beta is None else float(beta),
        seed=raw.get("seed"),
        shortfall=bool(raw.get("shortfall", False)),
    )
