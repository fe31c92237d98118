"""Subcommand pipelines: image -> SIFT -> patch grid -> attention -> analysis -> artifacts."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from keypatch.analysis.interrelation import patch_attention, per_patch_mean_theta
from keypatch.analysis.masking import (
    CurriculumSchedule,
    FillMode,
    MaskMode,
    MaskPlan,
    apply_mask,
    guided_mask,
    stepped_schedule,
    plan_to_json,
    random_mask,
    rank_mask,
    schedule_masks,
)
from keypatch.analysis.patch_grid import PatchGrid, PatchStats, assign_keypoints
from keypatch.analysis.profile import (
    LayerProfile,
    StageSegmentation,
    aggregate_profiles,
    layer_profile,
    segment_stages,
)
from keypatch.errors import ConfigurationError
from keypatch.imaging.image_core import (
    RgbImage,
    load_image,
    prepare_model_input,
    save_image,
    save_pgm,
    to_grayscale,
)
from keypatch.imaging.sift import Keypoint, SiftParams, detect_keypoints
from keypatch.model.vit import (
    AttentionRecord,
    ViTConfig,
    build_model,
    bundle_meta,
    export_attention_bundle,
    forward_with_attention,
    load_attention_bundle,
    load_weights,
)
from keypatch.report import writers

logger = logging.getLogger(__name__)


class ModelSource(str, Enum):
    VIT = "vit"          # internal seeded (or --weights) ViT
    BUNDLE = "bundle"    # exported attention tensors


def parse_layers(text: str) -> Optional[Tuple[int, ...]]:
    """'' -> None (all layers), '2,3' -> (2, 3)."""
    text = text.strip()
    if not text:
        return None
    try:
        layers = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigurationError(f"THETA_LAYERS must be comma separated integers, got {text!r}") from None
    if any(l < 0 for l in layers):
        raise ConfigurationError(f"THETA_LAYERS must be non-negative, got {text!r}")
    return layers


@dataclass(frozen=True)
class RunConfig:
    images: Tuple[Path, ...]
    out_dir: Path
    effective: Mapping[str, Any]
    model_source: Optional[ModelSource] = None
    attn_bundle: Optional[Path] = None
    weights: Optional[Path] = None
    export_attention: bool = False
    rounds: Tuple[int, ...] = ()
    sift: SiftParams = field(default_factory=SiftParams)

    def __post_init__(self):
        if self.attn_bundle is not None and self.model_source is ModelSource.VIT:
            raise ConfigurationError("give either an attention bundle or the ViT, not both")
        if self.weights is not None and self.model_source is ModelSource.BUNDLE:
            raise ConfigurationError("--weights applies to the ViT source, not to an attention bundle")
        if (self.attn_bundle is not None) != (self.model_source is ModelSource.BUNDLE):
            raise ConfigurationError("bundle model source needs exactly one attention bundle path")
        if self.gamma <= 0:
            raise ConfigurationError(f"GAMMA must be positive, got {self.gamma}")
        if self.seed < 0:
            raise ConfigurationError(f"SEED must be a non-negative integer, got {self.seed}")
        weighting = self.effective["THETA_WEIGHTING"]
        if weighting not in ("weighted", "unweighted"):
            raise ConfigurationError(f"THETA_WEIGHTING must be weighted or unweighted, got {weighting!r}")

    @classmethod
    def build(cls, effective: Mapping[str, Any], images: Sequence[str], out_dir: str,
              attn_bundle: Optional[str] = None, weights: Optional[str] = None,
              use_vit: bool = False, default_vit: bool = False, **kwargs) -> "RunConfig":
        if attn_bundle and (use_vit or weights):
            raise ConfigurationError("exactly one model source: --attn-bundle or --vit/--weights")
        if attn_bundle:
            source: Optional[ModelSource] = ModelSource.BUNDLE
        elif use_vit or weights or default_vit:
            source = ModelSource.VIT
        else:
            source = None
        sift = SiftParams(
            octaves=effective["SIFT_OCTAVES"] or None,
            scales_per_octave=effective["SIFT_SCALES_PER_OCTAVE"],
            base_sigma=effective["SIFT_BASE_SIGMA"],
            assumed_input_blur=effective["SIFT_ASSUMED_BLUR"],
            contrast_threshold=effective["SIFT_CONTRAST"],
            edge_ratio=effective["SIFT_EDGE_RATIO"],
            upsample_first_octave=effective["SIFT_UPSAMPLE"],
            max_octaves=effective["SIFT_MAX_OCTAVES"],
            min_octave_dim=effective["SIFT_MIN_OCTAVE_DIM"],
            refine_steps=effective["SIFT_REFINE_STEPS"],
        )
        return cls(
            images=tuple(Path(p) for p in images),
            out_dir=Path(out_dir),
            effective=dict(effective),
            model_source=source,
            attn_bundle=Path(attn_bundle) if attn_bundle else None,
            weights=Path(weights) if weights else None,
            sift=sift,
            **kwargs,
        )

    @property
    def gamma(self) -> float:
        return float(self.effective["GAMMA"])

    @property
    def seed(self) -> int:
        return int(self.effective["SEED"])

    @property
    def weighted(self) -> bool:
        return self.effective["THETA_WEIGHTING"] == "weighted"

    @property
    def theta_layers(self) -> Optional[Tuple[int, ...]]:
        return parse_layers(self.effective["THETA_LAYERS"])

    def vit_config(self) -> ViTConfig:
        e = self.effective
        return ViTConfig(
            image_size=e["VIT_IMAGE_SIZE"],
            patch_size=e["VIT_PATCH_SIZE"],
            layers=e["VIT_LAYERS"],
            heads=e["VIT_HEADS"],
            embed_dim=e["VIT_EMBED_DIM"],
            mlp_ratio=e["VIT_MLP_RATIO"],
            use_cls_token=e["VIT_USE_CLS"],
            init_std=e["VIT_INIT_STD"],
        )


class AttentionSource:
    """Resolves the model source once and hands out attention records per image."""

    def __init__(self, run: RunConfig):
        self.run = run
        self.model = None
        self.records: Optional[List[AttentionRecord]] = None
        if run.model_source is ModelSource.BUNDLE:
            self.meta, self.records = load_attention_bundle(run.attn_bundle)
            self.image_size = self.meta["image_size"]
            self.patch_size = self.meta["patch_size"]
            self.layers, self.heads = self.meta["layers"], self.meta["heads"]
        elif run.model_source is ModelSource.VIT:
            self.model = load_weights(run.weights) if run.weights else build_model(run.vit_config(), seed=run.seed)
            cfg = self.model.cfg
            self.meta = bundle_meta(cfg)
            self.image_size, self.patch_size = cfg.image_size, cfg.patch_size
            self.layers, self.heads = cfg.layers, cfg.heads
        else:
            raise ConfigurationError("no attention source: pass --attn-bundle or --vit")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )

    def attention_for(self, img: RgbImage) -> List[AttentionRecord]:
        if self.model is not None:
            _, records = forward_with_attention(img, self.model)
            return records
        return list(self.records)


@dataclass(frozen=True)
class PreparedImage:
    name: str
    image: RgbImage
    keypoints: List[Keypoint]
    grid: PatchGrid
    stats: PatchStats


@dataclass(frozen=True)
class ImageAnalysis:
    prepared: PreparedImage
    profile: LayerProfile
    segmentation: Optional[StageSegmentation]
    theta_bar: np.ndarray


def _image_dirs(images: Sequence[Path]) -> List[str]:
    names, seen = [], set()
    for i, path in enumerate(images):
        name = path.stem if path.stem not in seen else f"{path.stem}_{i}"
        seen.add(name)
        names.append(name)
    return names


def _prepare(path: Path, name: str, size: int, patch_size: int, params: SiftParams) -> PreparedImage:
    img = prepare_model_input(load_image(path), size)
    keypoints = detect_keypoints(to_grayscale(img), params)
    grid = PatchGrid.for_image(img.width, img.height, patch_size)
    stats = assign_keypoints(grid, keypoints)
    return PreparedImage(name=name, image=img, keypoints=keypoints, grid=grid, stats=stats)


def _snapshot(run: RunConfig, out: Path) -> None:
    writers.write_json(out / "config.json", {k: run.effective[k] for k in sorted(run.effective)})


# --------- sift ----------

def cmd_sift(image: Path, params: SiftParams, out: Path) -> List[Keypoint]:
    """Keypoints of the image at its own resolution: keypoints.tsv and overlay.pgm."""
    gray = to_grayscale(load_image(image))
    keypoints = detect_keypoints(gray, params)
    os.makedirs(out, exist_ok=True)
    writers.write_keypoints(out / "keypoints.tsv", keypoints)
    save_pgm(out / "overlay.pgm", writers.keypoint_overlay(gray, keypoints))
    logger.info("[SIFT] %s: %d keypoints -> %s", image, len(keypoints), out)
    return keypoints


def run_sift(run: RunConfig) -> Dict[str, List[Keypoint]]:
    results = {}
    many = len(run.images) > 1
    for name, path in zip(_image_dirs(run.images), run.images):
        out = run.out_dir / name if many else run.out_dir
        results[name] = cmd_sift(path, run.sift, out)
    return results


# --------- analyze ----------

def _write_analysis(out: Path, analysis: ImageAnalysis, records: Sequence[AttentionRecord]) -> None:
    prepared = analysis.prepared
    grid = prepared.grid
    writers.write_keypoints(out / "keypoints.tsv", prepared.keypoints)
    writers.write_patch_stats(out / "patch_stats.csv", grid, prepared.stats)
    writers.write_profile(out / "profile.csv", analysis.profile)
    writers.write_layer_means(out / "layer_means.csv", analysis.profile, analysis.segmentation)
    writers.write_stages(out / "stages.json", analysis.segmentation, analysis.profile)
    writers.write_heatmap(out / "theta_bar.pgm", analysis.theta_bar, grid)
    writers.write_heatmap(out / "keypoints.pgm", prepared.stats.counts.astype(np.float64), grid)
    heads_dir = out / "heads"
    os.makedirs(heads_dir, exist_ok=True)
    for rec in records:
        alpha = patch_attention(rec.alpha, grid.n_patches)
        save_pgm(heads_dir / f"L{rec.layer}_H{rec.head}.pgm", writers.attention_heatmap(alpha, grid))


def analyze_image(prepared: PreparedImage, records: Sequence[AttentionRecord], gamma: float,
                  layers: int, heads: int, theta_layers: Optional[Sequence[int]] = None,
                  weighted: bool = True) -> ImageAnalysis:
    profile = layer_profile(records, prepared.stats, gamma, layers=layers, heads=heads, weighted=weighted)
    segmentation = segment_stages(profile)
    if layers == 0:
        theta_bar = np.zeros(prepared.stats.n_patches)
    else:
        theta_bar = per_patch_mean_theta(records, prepared.stats, gamma, theta_layers, weighted)
    return ImageAnalysis(prepared=prepared, profile=profile, segmentation=segmentation, theta_bar=theta_bar)


def cmd_analyze(run: RunConfig) -> Dict[str, ImageAnalysis]:
    source = AttentionSource(run)
    results: Dict[str, ImageAnalysis] = {}
    os.makedirs(run.out_dir, exist_ok=True)
    _snapshot(run, run.out_dir)
    for name, path in zip(_image_dirs(run.images), run.images):
        prepared = _prepare(path, name, source.image_size, source.patch_size, run.sift)
        records = source.attention_for(prepared.image)
        analysis = analyze_image(prepared, records, run.gamma, source.layers, source.heads,
                                 run.theta_layers, run.weighted)
        out = run.out_dir / name
        os.makedirs(out, exist_ok=True)
        _write_analysis(out, analysis, records)
        if run.export_attention:
            export_attention_bundle(out / "attention.vslt", records, source.meta)
        _snapshot(run, out)
        results[name] = analysis
        logger.info("[ANALYZE] %s: %d keypoints, %d keypoint patches -> %s",
                    path, len(prepared.keypoints), int(prepared.stats.is_keypoint.sum()), out)

    if len(results) > 1:
        corpus = aggregate_profiles([a.profile for a in results.values()])
        writers.write_profile(run.out_dir / "corpus_profile.csv", corpus)
        writers.write_stages(run.out_dir / "corpus_stages.json", segment_stages(corpus), corpus)
    return results



# --------- mask ----------

def _mask_plan(run: RunConfig, prepared: PreparedImage, source: Optional[AttentionSource]) -> MaskPlan:
    e = run.effective
    mode = MaskMode.parse(e["MASK_MODE"])
    ratio = float(e["MASK_RATIO"])
    if mode in (MaskMode.TOP, MaskMode.BOTTOM):
        if source is None:
            raise ConfigurationError(f"mask mode {mode.value} needs an attention source (--attn-bundle or --vit)")
        records = source.attention_for(prepared.image)
        if not records:
            raise ConfigurationError("attention source has no layers to rank patches by")
        theta_bar = per_patch_mean_theta(records, prepared.stats, run.gamma, run.theta_layers, run.weighted)
        return rank_mask(theta_bar, ratio, mode)
    if mode is MaskMode.GUIDED:
        return guided_mask(prepared.stats, ratio, float(e["MASK_BETA"]), run.seed)
    return random_mask(prepared.stats.n_patches, ratio, run.seed)


def cmd_mask(run: RunConfig) -> Dict[str, MaskPlan]:
    source = AttentionSource(run) if run.model_source is not None else None
    if source is not None:
        size, patch_size = source.image_size, source.patch_size
    else:
        size, patch_size = run.effective["VIT_IMAGE_SIZE"], run.effective["VIT_PATCH_SIZE"]
    fill = FillMode.parse(run.effective["MASK_FILL"])
    suffix = ".ppm" if run.effective["IMAGE_FORMAT"].lower() == "ppm" else ".png"

    plans: Dict[str, MaskPlan] = {}
    for name, path in zip(_image_dirs(run.images), run.images):
        prepared = _prepare(path, name, size, patch_size, run.sift)
        plan = _mask_plan(run, prepared, source)
        out = run.out_dir / name
        os.makedirs(out, exist_ok=True)
        (out / "mask_plan.json").write_text(plan_to_json(plan))
        save_image(out / f"masked{suffix}", apply_mask(prepared.image, plan, prepared.grid, fill))
        writers.write_patch_stats(out / "patch_stats.csv", prepared.grid, prepared.stats)
        _snapshot(run, out)
        plans[name] = plan
        logger.info("[MASK] %s: %s plan masks %d of %d patches%s", path, plan.mode.value, len(plan),
                    prepared.grid.n_patches, " (shortfall)" if plan.shortfall else "")
    return plans


# --------- schedule ----------

def run_schedule(run: RunConfig) -> Tuple[CurriculumSchedule, Dict[str, Dict[int, MaskPlan]]]:
    """Per-round beta table, plus one guided plan per requested round for each image."""
    e = run.effective
    schedule = stepped_schedule(e["CURRICULUM_BETAS"], e["CURRICULUM_ROUNDS"])
    os.makedirs(run.out_dir, exist_ok=True)
    last = max([schedule.total_rounds - 1, *run.rounds])
    with open(run.out_dir / "schedule.csv", "w", newline="") as f:
        w = writers.csv_writer(f)
        w.writerow(["round", "stage", "beta"])
        for r in range(last + 1):
            w.writerow([r, schedule.stage_for_round(r), writers.format_value(schedule.beta_for_round(r))])
    _snapshot(run, run.out_dir)

    plans: Dict[str, Dict[int, MaskPlan]] = {}
    ratio = float(e["MASK_RATIO"])
    for name, path in zip(_image_dirs(run.images), run.images):
        prepared = _prepare(path, name, e["VIT_IMAGE_SIZE"], e["VIT_PATCH_SIZE"], run.sift)
        out = run.out_dir / name
        os.makedirs(out, exist_ok=True)
        plans[name] = {}
        for r in run.rounds:
            plan = schedule_masks(prepared.stats, ratio, schedule, r, run.seed)
            (out / f"plan_round{r}.json").write_text(plan_to_json(plan))
            plans[name][r] = plan
    logger.info("[MASK] schedule of %d stages, %d rounds written to %s",
                len(schedule.stages), last + 1, run.out_dir)
    return schedule, plans
