"""
Command-line entry point: `python -m gsgrasp <command>`.

Results go to files and a one-line JSON summary on stdout; logs go to stderr.
Any failure prints one JSON error line to stderr and exits nonzero.
"""
import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import uvicorn

from gsgrasp.config import get_settings
from gsgrasp.config.logging import configure_logging
from gsgrasp.core.exceptions import AppException, ValidationError
from gsgrasp.core.telemetry import configure_tracing
from gsgrasp.models.domain import ConvexHull, PointCloud
from gsgrasp.models.schemas import GraspFilterConfig, HullRecord, SyntheticSceneSpec, TrainConfig
from gsgrasp.repositories.checkpoint import load_decoder, load_field, save_decoder, save_field
from gsgrasp.repositories.exports import (
    read_model,
    read_motion,
    read_ply,
    read_proposals,
    read_train_config,
    write_color,
    write_decisions,
    write_depth_mm,
    write_feature_map,
    write_json,
    write_loss_csv,
    write_normal,
    write_ply,
    write_relevance,
)
from gsgrasp.repositories.scene import load_scene, write_mask
from gsgrasp.services.geometry import bbox_hull, convex_hull, field_cloud
from gsgrasp.services.pipeline import (
    run_eval,
    run_grasp_filter,
    run_init,
    run_query,
    run_render,
    run_train,
    run_update,
    select_views,
)
from gsgrasp.services.rasterizer import to_numpy
from gsgrasp.services.synthetic import default_spec, generate_synthetic

logger = logging.getLogger(__name__)

DECODER_SUFFIX = ".decoder.pt"


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload), flush=True)


def _decoder_path(checkpoint: Path, explicit: Optional[Path]) -> Path:
    """Decoder file given explicitly, else stored next to the checkpoint."""
    return explicit if explicit is not None else checkpoint.with_suffix(DECODER_SUFFIX)


def _split(value: Optional[str]) -> Optional[List[str]]:
    if not value:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


def _latency_resolution(args: argparse.Namespace) -> Tuple[int, int]:
    settings = get_settings()
    height = settings.LATENCY_HEIGHT if args.latency_height is None else args.latency_height
    width = settings.LATENCY_WIDTH if args.latency_width is None else args.latency_width
    return height, width


def _train_config(args: argparse.Namespace, **defaults: Any) -> TrainConfig:
    overrides = {"iterations": args.iterations, "seed": args.seed, **defaults}
    if args.config is not None:
        return read_train_config(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def hull_from_record(record: HullRecord) -> ConvexHull:
    """Hull from `query` output; flat vertex sets fall back to their box."""
    vertices = np.asarray(record.vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1:] != (3,) or len(vertices) == 0:
        raise ValidationError("Hull vertices must be a non-empty N x 3 list")
    try:
        return convex_hull(vertices)
    except AppException:
        return bbox_hull(vertices.min(axis=0), vertices.max(axis=0))


def hull_record(hull: ConvexHull, bbox_min: np.ndarray, bbox_max: np.ndarray) -> HullRecord:
    return HullRecord(
        vertices=hull.vertices.tolist(),
        bbox_min=np.asarray(bbox_min).tolist(),
        bbox_max=np.asarray(bbox_max).tolist(),
    )


# =============================================================================
# Commands
# =============================================================================


def cmd_synth(args: argparse.Namespace) -> None:
    if args.spec is not None:
        spec = read_model(args.spec, SyntheticSceneSpec, "synthetic_spec")
    else:
        overrides = {"seed": args.seed}
        if args.width is not None:
            overrides["width"] = args.width
        if args.height is not None:
            overrides["height"] = args.height
        if args.d_clip is not None:
            overrides["d_clip"] = args.d_clip
        spec = default_spec(num_objects=args.objects, **overrides)
    manifest = generate_synthetic(spec, args.out)
    _emit({"manifest": str(manifest), "objects": [o.name for o in spec.objects]})


def cmd_init(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    field = run_init(scene, args.count, seed=args.seed)
    save_field(field, args.out)
    _emit({"checkpoint": str(args.out), "count": field.count})


def cmd_train(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    config = _train_config(args)
    torch.manual_seed(config.seed)
    field = load_field(args.checkpoint, frame_id=scene.frame_id)
    decoder = load_decoder(args.decoder) if args.decoder is not None else None
    views = select_views(scene.views, _split(args.views), args.view_count)

    field, decoder, reports = run_train(field, scene, config, decoder=decoder, views=views)

    save_field(field, args.out)
    decoder_out = _decoder_path(args.out, args.decoder_out)
    save_decoder(decoder, decoder_out)
    loss_csv = args.loss_csv or args.out.with_suffix(".loss.csv")
    write_loss_csv(loss_csv, reports)
    _emit({
        "checkpoint": str(args.out),
        "decoder": str(decoder_out),
        "loss_csv": str(loss_csv),
        "iterations": config.effective_iterations,
        "final_loss": reports[-1].total if reports else None,
        "count": field.count,
    })


def cmd_render(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    field = load_field(args.checkpoint, frame_id=scene.frame_id)
    view = scene.view(args.view)
    if args.pose is not None:
        view = view.with_pose(read_motion(args.pose))

    maps = to_numpy(run_render(field, view))
    out: Path = args.out
    write_color(out / "color.png", maps["color"])
    write_depth_mm(out / "depth.png", maps["depth"])
    write_normal(out / "normal.png", maps["normal"])
    write_feature_map(out / "feature.ggfm", maps["feature"])
    write_feature_map(out / "alpha.ggfm", maps["alpha"])
    _emit({"out": str(out), "view_id": view.view_id, "coverage": float((maps["alpha"] > 0.5).mean())})


def cmd_query(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    field = load_field(args.checkpoint, frame_id=scene.frame_id)
    decoder = load_decoder(_decoder_path(args.checkpoint, args.decoder))
    views = select_views(scene.views, _split(args.views))

    localization = run_query(field, scene, decoder, args.query, views, args.threshold)

    out: Path = args.out
    for vid, scores in localization.relevance.items():
        write_relevance(out / f"relevance_{vid}.png", scores)
        write_mask(out / f"mask_{vid}.png", localization.object_mask[vid])
    write_json(out / "hull.json", hull_record(localization.hull, localization.bbox_min, localization.bbox_max))
    write_ply(out / "object.ply", PointCloud(points=localization.points, colors=localization.colors))

    latency = localization.latency_s
    _emit({
        "query": args.query,
        "bbox_min": localization.bbox_min.tolist(),
        "bbox_max": localization.bbox_max.tolist(),
        "points": int(len(localization.points)),
        "latency_s": {vid: round(t, 6) for vid, t in latency.items()},
        "mean_latency_s": float(np.mean(list(latency.values()))),
    })


def cmd_grasp_filter(args: argparse.Namespace) -> None:
    proposals = read_proposals(args.proposals)
    defaults = GraspFilterConfig()
    config = GraspFilterConfig(
        angle_sum_threshold=np.radians(args.angle_deg) if args.angle_deg is not None else defaults.angle_sum_threshold,
        normal_lookup_radius=args.radius if args.radius is not None else defaults.normal_lookup_radius,
        use_normal_filter=not args.no_normal_filter,
        bbox_margin=args.bbox_margin if args.bbox_margin is not None else defaults.bbox_margin,
    )

    if args.query is not None:
        if args.scene is None or args.checkpoint is None:
            raise ValidationError("--query needs --scene and --checkpoint")
        scene = load_scene(args.scene)
        field = load_field(args.checkpoint, frame_id=scene.frame_id)
        decoder = load_decoder(_decoder_path(args.checkpoint, args.decoder))
        localization = run_query(field, scene, decoder, args.query)
        selection = run_grasp_filter(proposals, config, localization, field, scene.views)
    elif args.cloud is not None:
        selection = run_grasp_filter(proposals, config, cloud=read_ply(args.cloud))
    elif args.checkpoint is not None:
        selection = run_grasp_filter(proposals, config, cloud=field_cloud(load_field(args.checkpoint)))
    elif not config.use_normal_filter:
        selection = run_grasp_filter(proposals, config)
    else:
        raise ValidationError("Grasp filtering needs --query, --cloud or --checkpoint")

    write_decisions(args.out, selection.decisions)
    _emit({
        "selected": selection.best_index,
        "score": selection.best.score,
        "feasible": len(selection.ranked),
        "total": len(selection.decisions),
    })


def cmd_update(args: argparse.Namespace) -> None:
    if (args.hull is None) == (args.query is None):
        raise ValidationError("Exactly one of --hull or --query selects the moved primitives")
    scene = load_scene(args.scene)
    motion = read_motion(args.motion)
    config = _train_config(args, fine_tune=True)
    torch.manual_seed(config.seed)
    decoder_in = _decoder_path(args.checkpoint, args.decoder)
    field = load_field(args.checkpoint, frame_id=scene.frame_id)
    decoder = load_decoder(decoder_in)

    if args.hull is not None:
        selector = hull_from_record(read_model(args.hull, HullRecord, "hull"))
    else:
        selector = run_query(field, scene, decoder, args.query).hull

    views = select_views(scene.views, _split(args.views), args.view_count)
    result = run_update(field, scene, decoder, selector, motion, config, views)

    decoder_out = _decoder_path(args.out, args.decoder_out)
    if result.noop:
        # Unchanged inputs are copied rather than re-encoded
        if args.out.resolve() != args.checkpoint.resolve():
            shutil.copyfile(args.checkpoint, args.out)
        if decoder_out.resolve() != decoder_in.resolve():
            shutil.copyfile(decoder_in, decoder_out)
    else:
        save_field(result.field, args.out)
        save_decoder(result.decoder, decoder_out)

    summary: Dict[str, Any] = {
        "checkpoint": str(args.out),
        "decoder": str(decoder_out),
        "noop": result.noop,
        "iterations": 0 if result.noop else config.effective_iterations,
        "views": [v.view_id for v in views],
    }
    if args.requery is not None:
        localization = run_query(result.field, scene, result.decoder, args.requery)
        requery_path = args.out.parent / f"{args.requery}_hull.json"
        write_json(requery_path, hull_record(localization.hull, localization.bbox_min, localization.bbox_max))
        summary["requery"] = {
            "query": args.requery,
            "hull": str(requery_path),
            "bbox_min": localization.bbox_min.tolist(),
            "bbox_max": localization.bbox_max.tolist(),
        }
    _emit(summary)


def cmd_eval(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    field = load_field(args.checkpoint, frame_id=scene.frame_id)
    decoder = load_decoder(_decoder_path(args.checkpoint, args.decoder))
    report = run_eval(
        field,
        scene,
        decoder,
        queries=_split(args.queries),
        threshold=args.threshold,
        geometry=not args.no_geometry,
        latency_resolution=_latency_resolution(args),
    )
    if args.out is not None:
        write_json(args.out, report)
    _emit(report.model_dump(mode="json", exclude={"queries"}))


def cmd_serve(args: argparse.Namespace) -> None:
    settings = get_settings()
    if args.scene is not None:
        settings.SCENE_MANIFEST = str(args.scene)
    if args.checkpoint is not None:
        settings.CHECKPOINT_PATH = str(args.checkpoint)
        if args.decoder is None and settings.DECODER_PATH is None:
            settings.DECODER_PATH = str(_decoder_path(args.checkpoint, None))
    if args.decoder is not None:
        settings.DECODER_PATH = str(args.decoder)
    uvicorn.run("gsgrasp.main:app", host=args.host, port=args.port)


# =============================================================================
# Parser
# =============================================================================


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value training config file")
    parser.add_argument("--iterations", type=int, help="Overrides the config file")
    parser.add_argument("--seed", type=int, help="Overrides the config file")
    parser.add_argument("--views", help="Comma-separated view ids to train on")
    parser.add_argument("--view-count", type=int, help="Train on this many evenly spaced views")
    parser.add_argument("--decoder-out", type=Path, help=f"Default: <out>{DECODER_SUFFIX}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsgrasp",
        description="Gaussian feature fields for open-vocabulary localization and grasp filtering",
    )
    parser.add_argument("--debug", action="store_true", help="Human-readable logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic scene")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="SyntheticSceneSpec JSON")
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--d-clip", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("init", help="Initialize a field from RGB-D views")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=20000, help="Target primitive count")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser("train", help="Optimize a field and its feature decoder")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--decoder", type=Path, help="Continue from this decoder")
    p.add_argument("--loss-csv", type=Path, help="Default: <out>.loss.csv")
    _add_training_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("render", help="Export rendered maps for a view or pose")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--view", required=True, help="View id supplying intrinsics (and pose)")
    p.add_argument("--pose", type=Path, help="Camera-to-world 4x4 JSON replacing the view pose")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("query", help="Localize an object by embedding name")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--decoder", type=Path)
    p.add_argument("--query", required=True)
    p.add_argument("--views", help="Comma-separated view ids (default: all)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.set_defaults(handler=cmd_query)

    p = sub.add_parser("grasp-filter", help="Select a force-closure grasp")
    p.add_argument("--proposals", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Annotated proposals JSON")
    p.add_argument("--scene", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--decoder", type=Path)
    p.add_argument("--query", help="Restrict to this object's box and surface")
    p.add_argument("--cloud", type=Path, help="PLY point cloud with normals")
    p.add_argument("--angle-deg", type=float, help="Angle sum threshold, degrees")
    p.add_argument("--radius", type=float, help="Normal lookup radius, meters")
    p.add_argument("--bbox-margin", type=float)
    p.add_argument("--no-normal-filter", action="store_true")
    p.set_defaults(handler=cmd_grasp_filter)

    p = sub.add_parser("update", help="Move a selection and fine-tune")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--decoder", type=Path)
    p.add_argument("--motion", type=Path, required=True, help="4x4 rigid motion JSON")
    p.add_argument("--hull", type=Path, help="Hull JSON written by `query`")
    p.add_argument("--query", help="Select by querying this name")
    p.add_argument("--requery", help="Query this name again after the update")
    p.add_argument("--out", type=Path, required=True)
    _add_training_flags(p)
    p.set_defaults(handler=cmd_update)

    p = sub.add_parser("eval", help="Score queries against ground-truth masks")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--decoder", type=Path)
    p.add_argument("--queries", help="Comma-separated names (default: all with masks)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-geometry", action="store_true", help="Skip PSNR and depth/normal errors")
    p.add_argument("--latency-height", type=int, help="Height of the timed relevance render (default: LATENCY_HEIGHT)")
    p.add_argument("--latency-width", type=int, help="Width of the timed relevance render (default: LATENCY_WIDTH)")
    p.add_argument("--out", type=Path, help="Full report JSON")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("serve", help="Serve query and grasp endpoints over HTTP")
    p.add_argument("--scene", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--decoder", type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(debug=args.debug or settings.DEBUG)
    torch.set_num_threads(settings.NUM_THREADS)
    configure_tracing()

    handler: Callable[[argparse.Namespace], None] = args.handler
    try:
        handler(args)
    except AppException as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr, flush=True)
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"Unhandled exception: {exc}")
        payload = {"error": {"code": "INTERNAL_ERROR", "message": str(exc), "details": {}}}
        print(json.dumps(payload), file=sys.stderr, flush=True)
        return 1
    return 0
