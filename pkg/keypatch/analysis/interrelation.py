"""Patch interrelation scores over attention matrices.

For a start patch i with attention row alpha_i, the detection line is
H = gamma * sum_j(alpha_ij) / N and the attended set is S_i = {j : alpha_ij >= H}.
theta_i is the (keypoint-count weighted) share of keypoint patches in S_i, and
the global scores average theta_i (or 1 - theta_i) over keypoint / non-keypoint
start patches. Start patches with an empty S_i are left out of the averages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from keypatch.analysis.patch_grid import PatchStats, split_identity_sets
from keypatch.errors import ConfigurationError, DimensionError
from keypatch.model.vit import AttentionRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttendedSet:
    start_patch: int
    threshold: float
    members: np.ndarray
    key_members: np.ndarray
    non_members: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.members) == 0


@dataclass(frozen=True)
class InterrelationScore:
    start_patch: int
    theta_unweighted: float   # nan when undefined
    theta_weighted: float
    defined: bool
    weighted: bool = True

    @property
    def theta(self) -> float:
        return self.theta_weighted if self.weighted else self.theta_unweighted


@dataclass(frozen=True)
class GlobalScores:
    layer: int
    head: int
    theta_kk: Optional[float]    # None when not applicable
    theta_kn: Optional[float]
    theta_nk: Optional[float]
    theta_nn: Optional[float]
    undefined_count: int


@dataclass(frozen=True)
class FocusIndex:
    layer: int
    head: int
    delta: float
    per_row: np.ndarray


def patch_attention(alpha: np.ndarray, n_patches: int) -> np.ndarray:
    """N x N patch-to-patch block, dropping a leading CLS token when present."""
    t = alpha.shape[0]
    if alpha.ndim != 2 or alpha.shape[1] != t:
        raise DimensionError(f"attention matrix must be square, got {alpha.shape}")
    if t == n_patches:
        return np.asarray(alpha, dtype=np.float64)
    if t == n_patches + 1:
        return np.asarray(alpha[1:, 1:], dtype=np.float64)
    raise DimensionError(f"attention has {t} tokens, grid has {n_patches} patches")


def detection_threshold(alpha_row: np.ndarray, gamma: float) -> float:
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    row = np.asarray(alpha_row, dtype=np.float64)
    return float(gamma * row.sum() / row.size)


def attended_set(alpha_row: np.ndarray, gamma: float, stats: PatchStats, i: int) -> AttendedSet:
    row = np.asarray(alpha_row, dtype=np.float64)
    if row.size != stats.n_patches:
        raise DimensionError(f"attention row has {row.size} entries, stats cover {stats.n_patches} patches")
    h = detection_threshold(row, gamma)
    members = np.flatnonzero(row >= h)
    is_key = stats.is_keypoint[members]
    return AttendedSet(
        start_patch=i,
        threshold=h,
        members=members,
        key_members=members[is_key],
        non_members=members[~is_key],
    )


def theta(att: AttendedSet, stats: PatchStats, weighted: bool = True) -> InterrelationScore:
    if att.empty:
        return InterrelationScore(att.start_patch, math.nan, math.nan, defined=False, weighted=weighted)
    n_key = len(att.key_members)
    n_non = len(att.non_members)
    t_key = int(stats.counts[att.key_members].sum())
    return InterrelationScore(
        start_patch=att.start_patch,
        theta_unweighted=n_key / (n_non + n_key),
        theta_weighted=t_key / (n_non + t_key),
        defined=True,
        weighted=weighted,
    )


def theta_vector(alpha: np.ndarray, stats: PatchStats, gamma: float, weighted: bool = True) -> np.ndarray:
    """theta_i for every start patch of an N x N matrix, nan where S_i is empty."""
    out = np.full(stats.n_patches, np.nan)
    for i in range(stats.n_patches):
        score = theta(attended_set(alpha[i], gamma, stats, i), stats, weighted)
        if score.defined:
            out[i] = score.theta
    return out


def _mean_over(values: np.ndarray, starts: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    picked = values[starts]
    picked = picked[~np.isnan(picked)]
    if len(picked) == 0:
        return None, None
    mean = math.fsum(picked) / len(picked)
    return mean, 1.0 - mean


def global_thetas(alpha: np.ndarray, stats: PatchStats, gamma: float,
                  layer: int = 0, head: int = 0, weighted: bool = True) -> GlobalScores:
    thetas = theta_vector(alpha, stats, gamma, weighted)
    s_key, s_non = split_identity_sets(stats)
    kk, kn = _mean_over(thetas, s_key)
    nk, nn = _mean_over(thetas, s_non)
    undefined = int(np.isnan(thetas).sum())
    if undefined:
        logger.debug("[ANALYZE] L%d H%d: %d start patches with empty attended set", layer, head, undefined)
    return GlobalScores(layer, head, kk, kn, nk, nn, undefined)


def head_theta_matrix(records: Sequence[AttentionRecord], stats: PatchStats, gamma: float,
                      weighted: bool = True) -> np.ndarray:
    """(L, m, N) array of theta_i per (layer, head), nan where undefined."""
    layers = 1 + max(r.layer for r in records)
    heads = 1 + max(r.head for r in records)
    out = np.full((layers, heads, stats.n_patches), np.nan)
    for rec in records:
        alpha = patch_attention(rec.alpha, stats.n_patches)
        out[rec.layer, rec.head] = theta_vector(alpha, stats, gamma, weighted)
    return out


def per_patch_mean_theta(records: Sequence[AttentionRecord], stats: PatchStats, gamma: float,
                         layers: Optional[Iterable[int]] = None, weighted: bool = True) -> np.ndarray:
    """theta-bar: theta_i averaged over the heads of the selected layers.

    Undefined values are skipped; a patch with no defined value gets 0.
    """
    selected = set(layers) if layers is not None else None
    chosen = [r for r in records if selected is None or r.layer in selected]
    if not chosen:
        raise ConfigurationError("no attention heads selected for theta-bar")
    values = head_theta_matrix(chosen, stats, gamma, weighted).reshape(-1, stats.n_patches)
    count = (~np.isnan(values)).sum(axis=0)
    total = np.nansum(values, axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def row_entropy(row: np.ndarray) -> float:
    """Shannon entropy (nats) of a min-max normalized, renormalized attention row."""
    row = np.asarray(row, dtype=np.float64)
    lo, hi = row.min(), row.max()
    if hi == lo:
        return math.log(row.size)
    q = (row - lo) / (hi - lo)
    p = q / q.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def focus_index(alpha: np.ndarray, layer: int = 0, head: int = 0) -> FocusIndex:
    per_row = np.array([row_entropy(row) for row in np.asarray(alpha, dtype=np.float64)])
    return FocusIndex(layer=layer, head=head, delta=float(per_row.mean()), per_row=per_row)
