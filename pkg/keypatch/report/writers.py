"""Artifact writers: keypoint lists, patch stats, profiles, stage JSON, heatmaps and overlays."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from keypatch.analysis.patch_grid import PatchGrid, PatchStats
from keypatch.analysis.profile import LayerProfile, StageSegmentation, layer_trends, stage_labels
from keypatch.imaging.image_core import GrayImage, save_pgm
from keypatch.imaging.sift import Keypoint

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PATCH_STATS_HEADER = ["patch_index", "row", "col", "t", "identity"]
PROFILE_HEADER = ["layer", "head", "theta_kk", "theta_kn", "theta_nk", "theta_nn",
                  "focus_index", "undefined_count"]
LAYER_MEANS_HEADER = ["layer", "theta_kk", "theta_kn", "theta_nk", "theta_nn", "focus_index", "stage"]
CROSS_ARM = 2   # a single mark covers 4 * CROSS_ARM + 1 pixels


def format_value(value: Any) -> str:
    """CSV cell text: empty for None/nan, repr for floats so values re-parse exactly."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return repr(float(value))
    return str(value)


def csv_writer(f, delimiter: str = ","):
    return csv.writer(f, delimiter=delimiter, lineterminator="\n")


def write_keypoints(path: PathLike, keypoints: Iterable[Keypoint]) -> int:
    n = 0
    with open(path, "w", newline="") as f:
        w = csv_writer(f, delimiter="\t")
        for kp in keypoints:
            w.writerow([format_value(kp.x), format_value(kp.y), format_value(kp.sigma), format_value(kp.response)])
            n += 1
    return n



def write_patch_stats(path: PathLike, grid: PatchGrid, stats: PatchStats) -> None:
    with open(path, "w", newline="") as f:
        w = csv_writer(f)
        w.writerow(PATCH_STATS_HEADER)
        for i in range(stats.n_patches):
            row, col = grid.position(i)
            w.writerow([i, row, col, int(stats.counts[i]), stats.identity(i).value])


def write_profile(path: PathLike, profile: LayerProfile) -> None:
    with open(path, "w", newline="") as f:
        w = csv_writer(f)
        w.writerow(PROFILE_HEADER)
        for row in profile.rows:
            for head in row.heads:
                s = head.scores
                w.writerow([
                    row.layer,
                    head.head,
                    format_value(s.theta_kk),
                    format_value(s.theta_kn),
                    format_value(s.theta_nk),
                    format_value(s.theta_nn),
                    format_value(head.focus),
                    s.undefined_count,
                ])



def write_layer_means(path: PathLike, profile: LayerProfile,
                      segmentation: Optional[StageSegmentation]) -> None:
    labels = stage_labels(segmentation, profile.n_layers) if segmentation else [None] * profile.n_layers
    with open(path, "w", newline="") as f:
        w = csv_writer(f)
        w.writerow(LAYER_MEANS_HEADER)
        for row, label in zip(profile.rows, labels):
            w.writerow([
                row.layer,
                format_value(row.theta_kk),
                format_value(row.theta_kn),
                format_value(row.theta_nk),
                format_value(row.theta_nn),
                format_value(row.focus_index),
                "" if label is None else label.value,
            ])


def stages_document(segmentation: Optional[StageSegmentation], profile: LayerProfile) -> dict:
    """Stage boundaries and labels plus a least-squares trend line per profile column."""
    trends = {
        column: None if fit is None else {"slope": fit[0], "intercept": fit[1]}
        for column, fit in layer_trends(profile).items()
    }
    if segmentation is None:
        return {"b1": None, "b2": None, "rule": "not_applicable", "labels": [], "trends": trends}
    return {
        "b1": segmentation.b1,
        "b2": segmentation.b2,
        "rule": segmentation.rule,
        "labels": [s.value for s in stage_labels(segmentation, profile.n_layers)],
        "trends": trends,
    }


def write_json(path: PathLike, document: Mapping[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def write_stages(path: PathLike, segmentation: Optional[StageSegmentation], profile: LayerProfile) -> None:
    write_json(path, stages_document(segmentation, profile))


def heatmap_image(values: np.ndarray, grid: PatchGrid) -> GrayImage:
    """Min-max scaled patch grid raster, upsampled to image resolution by pixel replication."""
    arr = np.asarray(values, dtype=np.float64).reshape(grid.rows, grid.cols)
    arr = np.where(np.isnan(arr), 0.0, arr)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    p = grid.patch_size
    return GrayImage(np.kron(scaled, np.ones((p, p))))


def write_heatmap(path: PathLike, values: np.ndarray, grid: PatchGrid) -> None:
    save_pgm(path, heatmap_image(values, grid))


def attention_heatmap(alpha: np.ndarray, grid: PatchGrid) -> GrayImage:
    """Attention received per patch (column mean over start patches)."""
    return heatmap_image(np.asarray(alpha, dtype=np.float64).mean(axis=0), grid)


def keypoint_overlay(gray: GrayImage, keypoints: Sequence[Keypoint]) -> GrayImage:
    """Mark each keypoint with a contrast-inverted cross (arms of CROSS_ARM pixels) at its rounded location."""
    out = np.array(gray.pixels, dtype=np.float64, copy=True)
    h, w = out.shape
    marker = np.zeros_like(out, dtype=bool)
    for kp in keypoints:
        cx, cy = int(round(kp.x)), int(round(kp.y))
        marker[cy, max(cx - CROSS_ARM, 0):min(cx + CROSS_ARM + 1, w)] = True
        marker[max(cy - CROSS_ARM, 0):min(cy + CROSS_ARM + 1, h), cx] = True
    out[marker] = np.where(gray.pixels[marker] >= 0.5, 0.0, 1.0)
    return GrayImage(out)
