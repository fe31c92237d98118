"""Layer-wise interrelation profile and Retrieval / Capture / Coach stage segmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from keypatch.analysis.interrelation import (
    FocusIndex,
    GlobalScores,
    focus_index,
    global_thetas,
    patch_attention,
)
from keypatch.analysis.patch_grid import PatchStats
from keypatch.errors import CompletenessError, ConfigurationError
from keypatch.model.vit import AttentionRecord

logger = logging.getLogger(__name__)

THETA_COLUMNS = ("theta_kk", "theta_kn", "theta_nk", "theta_nn")
TREND_COLUMNS = THETA_COLUMNS + ("focus_index",)
MEAN_TOLERANCE = 1e-12   # flat profiles must not cross their own mean through rounding


class Stage(str, Enum):
    RETRIEVAL = "retrieval"
    CAPTURE = "capture"
    COACH = "coach"


@dataclass(frozen=True)
class HeadRow:
    scores: GlobalScores
    focus: float

    @property
    def head(self) -> int:
        return self.scores.head


@dataclass(frozen=True)
class LayerRow:
    layer: int
    theta_kk: Optional[float]
    theta_kn: Optional[float]
    theta_nk: Optional[float]
    theta_nn: Optional[float]
    focus_index: float
    heads: Tuple[HeadRow, ...]


@dataclass(frozen=True)
class LayerProfile:
    rows: Tuple[LayerRow, ...]

    @property
    def n_layers(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        """Per-layer values of a column, nan where not applicable."""
        values = [getattr(row, name) for row in self.rows]
        return np.array([math.nan if v is None else v for v in values], dtype=np.float64)


@dataclass(frozen=True)
class StageSegmentation:
    b1: int
    b2: int
    rule: str    # "threshold" when both boundaries fired, else "fallback"


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    kept = [v for v in values if v is not None and not math.isnan(v)]
    if not kept:
        return None
    return math.fsum(kept) / len(kept)


def _layer_row(layer: int, heads: Sequence[HeadRow]) -> LayerRow:
    heads = tuple(sorted(heads, key=lambda h: h.head))
    return LayerRow(
        layer=layer,
        theta_kk=_mean_defined([h.scores.theta_kk for h in heads]),
        theta_kn=_mean_defined([h.scores.theta_kn for h in heads]),
        theta_nk=_mean_defined([h.scores.theta_nk for h in heads]),
        theta_nn=_mean_defined([h.scores.theta_nn for h in heads]),
        focus_index=math.fsum(h.focus for h in heads) / len(heads),
        heads=heads,
    )


def layer_profile(records: Sequence[AttentionRecord], stats: PatchStats, gamma: float,
                  layers: Optional[int] = None, heads: Optional[int] = None,
                  weighted: bool = True) -> LayerProfile:
    """Per-layer head averages of the global scores and focus index, layers ascending.

    Expected layer/head counts default to those implied by the records; every
    (layer, head) pair in range must be present.
    """
    if layers is None or heads is None:
        if not records:
            raise CompletenessError("no attention records")
        layers = layers if layers is not None else 1 + max(r.layer for r in records)
        heads = heads if heads is not None else 1 + max(r.head for r in records)
    by_key = {(r.layer, r.head): r for r in records}
    missing = [(l, h) for l in range(layers) for h in range(heads) if (l, h) not in by_key]
    if missing:
        raise CompletenessError(f"missing attention records for (layer, head) {missing[:5]}")

    rows: List[LayerRow] = []
    for layer in range(layers):
        head_rows = []
        for head in range(heads):
            alpha = patch_attention(by_key[(layer, head)].alpha, stats.n_patches)
            scores = global_thetas(alpha, stats, gamma, layer=layer, head=head, weighted=weighted)
            fi: FocusIndex = focus_index(alpha, layer=layer, head=head)
            head_rows.append(HeadRow(scores=scores, focus=fi.delta))
        rows.append(_layer_row(layer, head_rows))
    logger.info("[ANALYZE] profile over %d layers x %d heads (gamma=%g, %s theta)", layers, heads, gamma,
                "weighted" if weighted else "unweighted")
    return LayerProfile(tuple(rows))


def aggregate_profiles(profiles: Sequence[LayerProfile]) -> LayerProfile:
    """Average several per-image profiles head by head (e.g. over an image corpus)."""
    if not profiles:
        raise ConfigurationError("no profiles to aggregate")
    shape = [(p.n_layers, tuple(len(r.heads) for r in p.rows)) for p in profiles]
    if len(set(shape)) != 1:
        raise ConfigurationError("profiles have different layer/head layouts")

    rows = []
    for layer, first in enumerate(profiles[0].rows):
        head_rows = []
        for h in range(len(first.heads)):
            cells = [p.rows[layer].heads[h] for p in profiles]
            scores = GlobalScores(
                layer=layer,
                head=cells[0].head,
                **{c: _mean_defined([getattr(x.scores, c) for x in cells]) for c in THETA_COLUMNS},
                undefined_count=sum(x.scores.undefined_count for x in cells),
            )
            head_rows.append(HeadRow(scores=scores, focus=math.fsum(x.focus for x in cells) / len(cells)))
        rows.append(_layer_row(layer, head_rows))
    return LayerProfile(tuple(rows))


def layer_trend(profile: LayerProfile, column: str) -> Tuple[float, float]:
    """Least-squares (slope, intercept) of a per-layer column against the layer index."""
    values = profile.column(column)
    layers = np.arange(profile.n_layers, dtype=np.float64)
    ok = ~np.isnan(values)
    if ok.sum() < 2:
        raise ConfigurationError(f"need at least two defined layers to fit a trend for {column}")
    slope, intercept = np.polyfit(layers[ok], values[ok], 1)
    return float(slope), float(intercept)


def layer_trends(profile: LayerProfile) -> Dict[str, Optional[Tuple[float, float]]]:
    """layer_trend for every profile column, None where fewer than two layers are defined."""
    out: Dict[str, Optional[Tuple[float, float]]] = {}
    for column in TREND_COLUMNS:
        if (~np.isnan(profile.column(column))).sum() < 2:
            out[column] = None
        else:
            out[column] = layer_trend(profile, column)
    return out


def _two_step(values: np.ndarray, start: int, falling: bool) -> Optional[int]:
    for l in range(max(start, 1), len(values) - 1):
        a, b, c = values[l - 1], values[l], values[l + 1]
        if falling and b < a and c < b:
            return l
        if not falling and b > a and c > b:
            return l
    return None


def segment_stages(profile: LayerProfile) -> Optional[StageSegmentation]:
    """Split layers into Retrieval [0, b1), Capture [b1, b2) and Coach [b2, L).

    b1 is the first layer whose theta_KK is above its mean over layers while the
    focus index is below its own mean. b2 is the first later layer where
    theta_KK falls, or the focus index rises, over two consecutive steps.
    Boundaries that never fire fall back to L/3 and 2L/3. Returns None for
    fewer than three layers.
    """
    n = profile.n_layers
    if n < 3:
        return None
    kk = profile.column("theta_kk")
    fi = profile.column("focus_index")
    kk_mean = np.nanmean(kk) if np.any(~np.isnan(kk)) else math.nan
    fi_mean = fi.mean()
    kk_tol = MEAN_TOLERANCE * max(1.0, abs(kk_mean))
    fi_tol = MEAN_TOLERANCE * max(1.0, abs(fi_mean))

    b1 = next((l for l in range(n) if kk[l] > kk_mean + kk_tol and fi[l] < fi_mean - fi_tol), None)
    fired_b1 = b1 is not None
    if b1 is None:
        b1 = n // 3
    b1 = min(max(b1, 1), n - 2)

    candidates = [c for c in (_two_step(kk, b1 + 1, falling=True), _two_step(fi, b1 + 1, falling=False))
                  if c is not None]
    b2 = min(candidates) if candidates else None
    fired_b2 = b2 is not None
    if b2 is None:
        b2 = (2 * n) // 3
    b2 = min(max(b2, b1 + 1), n - 1)

    rule = "threshold" if fired_b1 and fired_b2 else "fallback"
    logger.info("[ANALYZE] stages: retrieval [0,%d) capture [%d,%d) coach [%d,%d) via %s",
                b1, b1, b2, b2, n, rule)
    return StageSegmentation(b1=b1, b2=b2, rule=rule)


def stage_labels(segmentation: StageSegmentation, n_layers: int) -> List[Stage]:
    return [
        Stage.RETRIEVAL if l < segmentation.b1 else Stage.CAPTURE if l < segmentation.b2 else Stage.COACH
        for l in range(n_layers)
    ]
