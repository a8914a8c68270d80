from ._version import __version__

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as _config
from .bins import (
    BinConfig,
    BinModel,
    aggregate_flow,
    bin_centers,
    flow_from_logits,
    flow_loss,
    grad_aggregate,
    grad_bin_centers,
    grad_through_softmax,
    softmax,
)
from .container import load_container, load_kind, save_container
from .errors import OccKitError, UsageError
from .grid import (
    FOREGROUND_CLASSES,
    FeatureGrid,
    FlowField,
    GridSpec,
    OccupancyGrid,
    Pose,
    Trajectory,
    VoxelMask,
    voxel_to_world,
    world_to_voxel,
)
from .metrics import MetricReport, evaluate, evaluate_rays, mave_lq, mave_per_voxel, mave_tp, occ_score, ray_iou, ray_iou_mean
from .raycast import (
    RayBundle,
    RayHit,
    RayPattern,
    cast_first_hit,
    generate_bundle,
    load_bundle,
    select_hard_examples,
    traverse,
    visible_mask_v1,
    visible_mask_v2,
)
from .splat import SplatSample, grad_warp, splat, splat_weights, warp_forward, warp_occupancy, warp_score
from .synth import SynthConfig, synth_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DEFAULT_DILATE = 2.0
GRAD_CHECK_VOXELS = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated class ids, got {text!r}") from e


def _emit(doc: dict, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        logger.info("wrote %s", out)
    print(text)


def _bundle(args, cfg: _config.RunConfig) -> RayBundle:
    if not (args.bundle or args.trajectory):
        raise UsageError("need --bundle, or --trajectory with an optional --pattern")
    return load_bundle(args.bundle, args.trajectory, args.pattern, cfg.pattern)


def _cmd_gen_mask(args, cfg: _config.RunConfig) -> int:
    grid = load_kind(args.gt, OccupancyGrid)
    bundle = _bundle(args, cfg)
    variant = args.variant or ("v2" if cfg.dilate is not None else "v1")
    if variant == "v1":
        mask = visible_mask_v1(grid, bundle, cfg.threads)
        radius = None
    else:
        radius = DEFAULT_DILATE if cfg.dilate is None else cfg.dilate
        mask = visible_mask_v2(grid, bundle, radius, cfg.threads)
    doc = {"variant": variant, "dilate": radius, "rays": bundle.num_rays, "visible": mask.count}

    if cfg.hard_fraction is not None:
        if not args.uncertainty:
            raise UsageError("--hard-fraction needs --uncertainty")
        unc = load_kind(args.uncertainty, FeatureGrid)
        mask = select_hard_examples(unc, mask, cfg.hard_fraction)
        doc["hard"] = mask.count
    elif args.uncertainty:
        raise UsageError("--uncertainty needs --hard-fraction")

    if args.out:
        save_container(args.out, mask)
    _emit(doc)
    return EXIT_OK


def _flow_or_zeros(path: str | None, spec: GridSpec, what: str) -> FlowField:
    if path:
        return load_kind(path, FlowField)
    logger.warning("no %s flow given, using zero flow", what)
    return FlowField.zeros(spec)


def _cmd_eval(args, cfg: _config.RunConfig) -> int:
    gt = load_kind(args.gt, OccupancyGrid)
    pred = load_kind(args.pred, OccupancyGrid)
    report = evaluate(
        gt,
        pred,
        _flow_or_zeros(args.flow_gt, gt.spec, "ground-truth"),
        _flow_or_zeros(args.flow_pred, gt.spec, "predicted"),
        _bundle(args, cfg),
        thresholds=cfg.thresholds,
        foreground=cfg.foreground,
        mave_threshold=cfg.mave_threshold,
        pooled=cfg.pooled_mave,
        threads=cfg.threads,
    )
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def _read_logits(path: str, n_bins: int):
    """(scene_logits, voxel_logits, spec or None) from a JSON or feat file."""
    if Path(path).suffix == ".json":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return np.asarray(doc["scene_logits"], dtype=np.float64), np.asarray(doc["voxel_logits"], dtype=np.float64), None
        except KeyError as e:
            raise UsageError(f"{path} is missing {e}") from e
    feat = load_kind(path, FeatureGrid)
    if feat.channels != 2 * n_bins:
        raise ValueError(f"{path} has {feat.channels} channels, expected 2 x {n_bins} bin logits")
    voxel = feat.values.astype(np.float64).reshape(*feat.spec.dims, 2, n_bins)
    # Scene logits from scene-averaged voxel logits.
    return voxel.mean(axis=(0, 1, 2)), voxel, feat.spec


def _grad_check(scene, voxel, config: BinConfig, seed: int) -> dict:
    from .selftest import flow_chain_errors

    sample = voxel.reshape(-1, *voxel.shape[-2:])[:GRAD_CHECK_VOXELS]
    up = np.random.default_rng(seed).normal(size=sample.shape[:-1])
    err_scene, err_voxel = flow_chain_errors(scene, sample, config, up)
    return {"scene_logits": err_scene, "voxel_logits": err_voxel}


def _cmd_bins(args, cfg: _config.RunConfig) -> int:
    config = BinConfig(cfg.n_bins, cfg.fmin, cfg.fmax)
    scene, voxel, spec = _read_logits(args.logits, config.n_bins)
    model = BinModel.from_logits(scene, voxel, config)
    flow = model.flow()
    doc = {"n_bins": config.n_bins, "f_min": config.f_min, "f_max": config.f_max, "centers": model.centers().tolist()}
    if spec is None:
        doc["flow"] = flow.tolist()
    else:
        doc["voxels"] = spec.num_voxels
        doc["flow_mean"] = flow.reshape(-1, 2).mean(axis=0).tolist()
        if args.out:
            save_container(args.out, FlowField(spec, flow))
    if args.check_grad:
        doc["grad_check_max_rel_err"] = _grad_check(scene, voxel, config, cfg.seed or 0)
    _emit(doc, args.out if spec is None else None)
    return EXIT_OK


def _cmd_warp(args, cfg: _config.RunConfig) -> int:
    features = load_kind(args.features, FeatureGrid)
    flow = load_kind(args.flow, FlowField)
    out = warp_forward(features, flow, cfg.dt, cfg.threads)
    if args.out:
        save_container(args.out, out)
    _emit({
        "channels": features.channels,
        "dt": cfg.dt,
        "mass_in": features.values.astype(np.float64).sum(axis=(0, 1, 2)).tolist(),
        "mass_out": out.values.astype(np.float64).sum(axis=(0, 1, 2)).tolist(),
    })
    return EXIT_OK


def _cmd_warp_occ(args, cfg: _config.RunConfig) -> int:
    current = load_kind(args.gt, OccupancyGrid)
    flow = load_kind(args.flow, FlowField)
    warped = warp_occupancy(current, flow, cfg.dt, cfg.threads)
    if args.out:
        save_container(args.out, warped)
    doc = {"classes": warped.channels, "dt": cfg.dt, "mass": float(warped.values.sum())}
    if args.gt_future:
        future = load_kind(args.gt_future, OccupancyGrid)
        mask = load_kind(args.mask, VoxelMask) if args.mask else None
        doc["warp_score"] = warp_score(warped, future, mask)
    elif args.mask:
        raise UsageError("--mask needs --gt-future")
    _emit(doc)
    return EXIT_OK


def _cmd_synth(args, cfg: _config.RunConfig) -> int:
    if not args.out:
        raise UsageError("synth needs --out DIR")
    synth = cfg.synth
    if cfg.seed is not None:
        synth = replace(synth, seed=cfg.seed)
    current, future, flow, trajectory = synth_scene(synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_container(out / "gt_current.occ", current)
    save_container(out / "gt_future.occ", future)
    save_container(out / "flow.flow", flow)
    (out / "trajectory.json").write_text(trajectory.to_json() + "\n", encoding="utf-8")
    bundle = generate_bundle(trajectory, cfg.pattern or RayPattern.default())
    (out / "bundle.json").write_text(bundle.to_json() + "\n", encoding="utf-8")
    _emit({
        "seed": synth.seed,
        "dims": list(synth.spec.dims),
        "occupied": int(current.occupied.sum()),
        "files": ["gt_current.occ", "gt_future.occ", "flow.flow", "trajectory.json", "bundle.json"],
    })
    return EXIT_OK


def _cmd_selftest(args, cfg: _config.RunConfig) -> int:
    from .selftest import run_selftest

    results = run_selftest(cfg.seed or 0, cfg.threads)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("%d check(s) failed: %s", len(failed), ", ".join(failed))
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file (flags override it)")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (default: OCCKIT_THREADS or all cores)")
    common.add_argument("--seed", type=int, default=None, help="Random seed")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: WARNING)")

    rays = _Parser(add_help=False)
    rays.add_argument("--bundle", default=None, help="Ray bundle JSON")
    rays.add_argument("--trajectory", default=None, help="Trajectory JSON, used with --pattern instead of --bundle")
    rays.add_argument("--pattern", default=None, help="Ray pattern JSON (default: 32 x 1800 rays, 60 m)")

    parser = _Parser(prog="occkit", description="Ray-based occupancy and flow toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-mask", parents=[common, rays], help="Ray visible mask from a grid and ray origins")
    p.add_argument("--gt", required=True, help="Occupancy container (.occ)")
    p.add_argument("--variant", choices=["v1", "v2"], default=None, help="v1: rays only; v2: plus dilation around hits")
    p.add_argument("--dilate", type=float, default=None, help=f"Dilation radius in meters (implies v2, default {DEFAULT_DILATE})")
    p.add_argument("--uncertainty", default=None, help="1-channel feat container for hard-example selection")
    p.add_argument("--hard-fraction", type=float, default=None, help="Keep this fraction of masked voxels by uncertainty")
    p.add_argument("--out", default=None, help="Write the mask container here")
    p.set_defaults(func=_cmd_gen_mask)

    p = sub.add_parser("eval", parents=[common, rays], help="RayIoU, mAVE and Occ Score")
    p.add_argument("--gt", required=True, help="Ground-truth occupancy (.occ)")
    p.add_argument("--pred", required=True, help="Predicted occupancy (.occ)")
    p.add_argument("--flow-gt", default=None, help="Ground-truth flow (.flow)")
    p.add_argument("--flow-pred", default=None, help="Predicted flow (.flow)")
    p.add_argument("--thresholds", type=_floats, default=None, help="Depth thresholds in meters (default 1,2,4)")
    p.add_argument("--foreground", type=_ints, default=None, help="Foreground class ids (default 0-7)")
    p.add_argument("--mave-threshold", type=float, default=None, help="Depth threshold for mAVE@TP (default 2)")
    p.add_argument("--pooled-mave", action="store_true", default=None, help="Pool mAVE over elements instead of classes")
    p.add_argument("--out", default=None, help="Also write the report JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bins", parents=[common], help="Adaptive-bin centers and flows from logits")
    p.add_argument("--logits", required=True, help="JSON {scene_logits, voxel_logits} or feat container with 2 x n channels")
    p.add_argument("--n-bins", type=int, default=None, help="Number of bins (default 32)")
    p.add_argument("--fmin", type=float, default=None, help="Lower flow bound in m/s (default -25)")
    p.add_argument("--fmax", type=float, default=None, help="Upper flow bound in m/s (default 25)")
    p.add_argument("--check-grad", action="store_true", help="Compare analytic gradients against finite differences")
    p.add_argument("--out", default=None, help="Output JSON, or flow container for feat input")
    p.set_defaults(func=_cmd_bins)

    p = sub.add_parser("warp", parents=[common], help="Warp a feature grid along a flow field")
    p.add_argument("--features", required=True, help="Feature container (.feat)")
    p.add_argument("--flow", required=True, help="Flow container (.flow)")
    p.add_argument("--dt", type=float, default=None, help="Time step in seconds (default 0.5)")
    p.add_argument("--out", default=None, help="Write the warped feature container here")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("warp-occ", parents=[common], help="Warp occupancy to soft class mass and score it")
    p.add_argument("--gt", required=True, help="Current occupancy (.occ)")
    p.add_argument("--flow", required=True, help="Flow container (.flow)")
    p.add_argument("--dt", type=float, default=None, help="Time step in seconds (default 0.5)")
    p.add_argument("--gt-future", default=None, help="Future occupancy to score against")
    p.add_argument("--mask", default=None, help="Restrict the score to this mask container")
    p.add_argument("--out", default=None, help="Write the soft occupancy container here")
    p.set_defaults(func=_cmd_warp_occ)

    p = sub.add_parser("synth", parents=[common], help="Write a seeded synthetic scene")
    p.add_argument("--dt", type=float, default=None, help="Time between current and future frame (default 0.5)")
    p.add_argument("--out", default=None, help="Output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("selftest", parents=[common], help="Run the oracle checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


_FLAG_KEYS = (
    "thresholds", "foreground", "dt", "dilate", "mave_threshold", "pooled_mave",
    "threads", "seed", "log_level", "n_bins", "fmin", "fmax", "hard_fraction",
)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="[%(levelname)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config.load(args.config)
        flags = {k: getattr(args, k, None) for k in _FLAG_KEYS}
        cfg = _config.with_flags(cfg, **flags)
        _setup_logging(cfg.log_level)
        return args.func(args, cfg)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (OccKitError, OSError, ValueError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


cli_dispatch = main

__all__ = [
    "BinConfig",
    "BinModel",
    "FOREGROUND_CLASSES",
    "FeatureGrid",
    "FlowField",
    "GridSpec",
    "MetricReport",
    "OccupancyGrid",
    "Pose",
    "RayBundle",
    "RayHit",
    "RayPattern",
    "SplatSample",
    "SynthConfig",
    "Trajectory",
    "VoxelMask",
    "__version__",
    "aggregate_flow",
    "bin_centers",
    "cast_first_hit",
    "cli_dispatch",
    "evaluate",
    "evaluate_rays",
    "flow_from_logits",
    "flow_loss",
    "generate_bundle",
    "grad_aggregate",
    "grad_bin_centers",
    "grad_through_softmax",
    "grad_warp",
    "load_container",
    "main",
    "mave_lq",
    "mave_per_voxel",
    "mave_tp",
    "occ_score",
    "ray_iou",
    "ray_iou_mean",
    "save_container",
    "select_hard_examples",
    "softmax",
    "splat",
    "splat_weights",
    "synth_scene",
    "traverse",
    "visible_mask_v1",
    "visible_mask_v2",
    "voxel_to_world",
    "warp_forward",
    "warp_occupancy",
    "warp_score",
    "world_to_voxel",
]
