import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from keypatch import __version__, config
from keypatch.config_manager import ConfigManager
from keypatch.errors import ConfigurationError, KeypatchError
from keypatch.report.commands import RunConfig, cmd_analyze, cmd_mask, run_schedule, run_sift

logger = logging.getLogger("keypatch")

IO_EXIT_CODE = 3

# CLI flag (argparse dest) -> config key
FLAG_KEYS = {
    "gamma": "GAMMA",
    "patch_size": "VIT_PATCH_SIZE",
    "image_size": "VIT_IMAGE_SIZE",
    "layers": "VIT_LAYERS",
    "heads": "VIT_HEADS",
    "dim": "VIT_EMBED_DIM",
    "cls": "VIT_USE_CLS",
    "seed": "SEED",
    "theta_layers": "THETA_LAYERS",
    "weighting": "THETA_WEIGHTING",
    "contrast": "SIFT_CONTRAST",
    "upsample": "SIFT_UPSAMPLE",
    "mode": "MASK_MODE",
    "ratio": "MASK_RATIO",
    "beta": "MASK_BETA",
    "fill": "MASK_FILL",
    "format": "IMAGE_FORMAT",
}


def _parse_set(items: Sequence[str]) -> Dict[str, Any]:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except ValueError:
            out[key.strip()] = raw
    return out


def _parse_rounds(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"--rounds must be comma separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", default=None, help="JSON file of config overrides")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, JSON values)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--contrast", type=float, default=None, help="SIFT contrast threshold")
    p.add_argument("--upsample", action="store_const", const=True, default=None,
                   help="double the image before the first SIFT octave")
    p.add_argument("--image-size", type=int, default=None, help="model input resolution")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def _model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attn-bundle", default=None, help="attention tensor file (VSLT) to analyze")
    p.add_argument("--vit", action="store_true", help="use the internal seeded ViT")
    p.add_argument("--weights", default=None, help="VSLT weight bundle for the internal ViT")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--dim", type=int, default=None, help="embedding dimension")
    p.add_argument("--cls", action="store_const", const=True, default=None, help="prepend a CLS token")
    p.add_argument("--gamma", type=float, default=None, help="detection line scale")
    p.add_argument("--theta-layers", default=None, help="layers averaged into theta-bar, e.g. 2,3")
    p.add_argument("--weighting", choices=["weighted", "unweighted"], default=None,
                   help="theta counts keypoints (weighted) or keypoint patches (unweighted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keypatch", description="SIFT keypoint patches vs ViT attention")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sift", help="detect SIFT keypoints, write keypoints.tsv and overlay.pgm")
    p.add_argument("images", nargs="+")
    _common(p)

    p = sub.add_parser("analyze", help="layer-wise patch interrelation and focus analysis")
    p.add_argument("images", nargs="+")
    _common(p)
    _model(p)
    p.add_argument("--export-attention", action="store_true", help="also write attention.vslt per image")

    p = sub.add_parser("mask", help="write a mask plan and the masked image")
    p.add_argument("images", nargs="+")
    _common(p)
    _model(p)
    p.add_argument("--mode", choices=["top", "bottom", "guided", "random"], default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--fill", choices=["mean", "gray", "black"], default=None)
    p.add_argument("--format", choices=["png", "ppm"], default=None)

    p = sub.add_parser("schedule", help="curriculum beta table and per-round guided plans")
    p.add_argument("images", nargs="*")
    _common(p)
    p.add_argument("--rounds", default="", help="rounds to emit plans for, e.g. 0,10,25")
    p.add_argument("--ratio", type=float, default=None)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


def _effective_config(args: argparse.Namespace) -> Dict[str, Any]:
    cfg_mgr = ConfigManager(config, args.config)
    cfg_mgr.set_overrides(_parse_set(args.set))
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()
             if getattr(args, dest, None) is not None}
    cfg_mgr.set_overrides(flags)
    return cfg_mgr.get_effective()


def run(args: argparse.Namespace) -> None:
    effective = _effective_config(args)
    model = {}
    if args.command in ("analyze", "mask"):
        model = dict(attn_bundle=args.attn_bundle, weights=args.weights, use_vit=args.vit,
                     default_vit=args.command == "analyze")
    if args.command == "analyze":
        model["export_attention"] = args.export_attention
    if args.command == "schedule":
        model["rounds"] = tuple(_parse_rounds(args.rounds))
    run_cfg = RunConfig.build(effective, args.images, args.out, **model)

    if args.command == "sift":
        run_sift(run_cfg)
    elif args.command == "analyze":
        cmd_analyze(run_cfg)
    elif args.command == "mask":
        cmd_mask(run_cfg)
    else:
        run_schedule(run_cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        run(args)
    except KeypatchError as e:
        logger.error("[ERROR] %s", e)
        return e.exit_code
    except OSError as e:
        logger.error("[ERROR] %s", e)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
