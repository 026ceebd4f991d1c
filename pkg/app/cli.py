"""
Command-line driver
Every subcommand takes --config plus repeated --set section.key=value overrides
"""
import functools
import json
import logging
from pathlib import Path

import click
import numpy as np

from app import configure_logging
from app.config import Config
from app.database.codecs import (atomic_write_json, read_augmented, read_cloud, read_gt, read_json,
                                 read_priors, write_augmented, write_calibration, write_cloud,
                                 write_features, write_gt, write_mask, write_priors)
from app.database.fp_store import load_fp_database, save_fp_database
from app.errors import FormatError, PainterError
from app.services.fp_augment import Box3D, build_fp_database, paste_samples
from app.services.fusion_stub import GRID_PRESETS, build_channel_blocks, cascaded_fuse, init_stages, pillarize
from app.services.head_dispatch import assign_category_scales, head_groups, pyramid_levels
from app.services.instance_painter import paint_scene
from app.services.metrics import compute_metrics
from app.services.pipeline import (load_inputs, resolve_config, run_ablation, run_pipeline, stage,
                                   synthetic_inputs)
from app.services.projection_refiner import label_params, refine_scene
from app.services.scene_model import NUSCENES_LABELS, assemble_augmented, stack_sweeps

logger = logging.getLogger(__name__)


def config_options(func):
    func = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                        help="Override one config value (JSON-parsed).")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="Pipeline config JSON.")(func)
    return func


def reports_errors(func):
    """Stage-tagged diagnostics on stderr and exit code 1"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (PainterError, FileNotFoundError) as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(1)
    return wrapper


def _config(config_path, overrides, seed=None):
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"io.seed={seed}")
    return resolve_config(config_path, overrides)


def _echo_json(payload):
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
def cli(log_level):
    """LiDAR/camera instance painting toolkit"""
    configure_logging(log_level.upper() if log_level else None)


# ============== SYNTH ==============

@cli.command()
@config_options
@click.option("--seed", type=int, default=None)
@click.option("--output", type=click.Path(file_okay=False), required=True)
@reports_errors
def synth(config_path, overrides, seed, output):
    """Write a synthetic scene as sweeps, calibration, masks, GT and a files-mode config"""
    config = _config(config_path, overrides, seed)
    out = Path(output)
    with stage("synth"):
        inputs = synthetic_inputs(config)
    with stage("write"):
        sweeps = []
        for i, sweep in enumerate(inputs.sweeps):
            name = f"sweep_{i:02d}.bin"
            write_cloud(out / name, sweep.points, field_count=5)
            sweeps.append({"path": name, "timestamp": sweep.timestamp, "ego_pose": sweep.ego_pose.to_list()})
        write_calibration(inputs.rig, out / "calibration.json")
        masks = []
        for mask in inputs.masks:
            raster, sidecar = f"mask_{mask.camera:02d}.pgm", f"mask_{mask.camera:02d}.json"
            write_mask(mask, out / raster, out / sidecar)
            masks.append({"raster": raster, "sidecar": sidecar})
        write_gt(out / "gt", inputs.gt.boxes, inputs.gt.point_gt)

        files_config = json.loads(json.dumps(config))
        files_config["io"].update({"mode": "files", "calibration": "calibration.json", "sweeps": sweeps,
                                   "keyframe_index": inputs.keyframe_index, "field_count": 5,
                                   "masks": masks, "gt": "gt", "output_dir": str((out / "output").resolve())})
        atomic_write_json(out / "config.json", files_config)
    _echo_json({"output": str(out), "boxes": len(inputs.gt.boxes), "sweeps": len(sweeps),
                "points": int(len(inputs.gt.point_gt))})


# ============== PAINT / REFINE ==============

@cli.command()
@config_options
@click.option("--seed", type=int, default=None)
@click.option("--output", type=click.Path(file_okay=False), required=True)
@reports_errors
def paint(config_path, overrides, seed, output):
    """Stack, project and paint; writes unrefined priors and augmented points"""
    config = _config(config_path, overrides, seed)
    out = Path(output)
    with stage("load"):
        inputs = load_inputs(config)
    with stage("stack"):
        stacked = stack_sweeps(inputs.sweeps, inputs.keyframe_index, inputs.rig,
                               float(config["io"]["min_distance"]))
    with stage("paint"):
        result = paint_scene(stacked, inputs.rig, inputs.masks, z_min=float(config["painter"]["z_min"]),
                             merge_gap=float(config["painter"]["merge_gap"]))
        refined = refine_scene(result.priors, stacked, {}, enabled=False,
                               emit_centers=bool(config["painter"]["emit_centers"]))
        augmented = assemble_augmented(stacked, refined.labels, refined.centers, refined.instance_ids)
    with stage("write"):
        write_priors(result.priors, out / "priors.json")
        write_augmented(augmented, out / "augmented.bin")
    _echo_json({"priors": len(result.priors), "painted": int(augmented.painted.sum()), "points": len(augmented)})


@cli.command()
@config_options
@click.option("--priors", "priors_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--augmented", "augmented_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--output", type=click.Path(file_okay=False), required=True)
@reports_errors
def refine(config_path, overrides, priors_path, augmented_path, output):
    """Refine painted priors with density clustering and medoid centers"""
    config = _config(config_path, overrides)
    refiner = config["refiner"]
    out = Path(output)
    with stage("load"):
        priors = read_priors(priors_path)
        cloud = read_augmented(augmented_path)
    with stage("refine"):
        params = label_params(NUSCENES_LABELS, int(refiner["min_pts"]), float(refiner["eps_scale"]),
                              float(refiner["eps_min"]), float(refiner["eps_max"]))
        refined = refine_scene(priors, cloud.points, params, enabled=True,
                               emit_centers=bool(config["painter"]["emit_centers"]))
        augmented = assemble_augmented(cloud.points, refined.labels, refined.centers, refined.instance_ids)
    with stage("write"):
        write_priors(refined.priors, out / "priors.json")
        write_augmented(augmented, out / "augmented.bin")
    _echo_json({"priors": len(refined.priors), "evicted": refined.evicted_count,
                "low_confidence": sum(1 for p in refined.priors if p.low_confidence)})


# ============== FUSE ==============

@cli.command()
@config_options
@click.option("--augmented", "augmented_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="Fused feature file.")
@reports_errors
def fuse(config_path, overrides, augmented_path, output):
    """Cascaded attention over the channel blocks plus grid and head-dispatch summary"""
    config = _config(config_path, overrides)
    fusion, dispatch = config["fusion"], config["dispatch"]
    with stage("fuse"):
        cloud = read_augmented(augmented_path)
        blocks = build_channel_blocks(cloud, len(NUSCENES_LABELS))
        stages = init_stages([b.shape[1] for b in blocks], int(fusion["stages"]), int(fusion["hidden"]),
                             float(fusion["weight_scale"]), int(fusion["seed"]))
        fused = cascaded_fuse(blocks, stages)
        grid = GRID_PRESETS[fusion["grid"]]
        cells = pillarize(cloud, grid)
        levels = pyramid_levels(int(dispatch["levels"]), grid.dims[:2], grid.voxel_size[0],
                                float(dispatch["growth"]))
        table = assign_category_scales(NUSCENES_LABELS, levels)
    if output:
        write_features(output, fused.features)
    _echo_json({"points": len(cloud), "fused_dim": int(fused.features.shape[1]), "grid": list(grid.dims),
                "occupied_cells": len(cells), "dispatch": table.to_json(),
                "head_groups": {str(k): v for k, v in head_groups(table).items()}})


# ============== FP AUGMENTATION ==============

@cli.group("augment-fp")
def augment_fp():
    """False-positive database build and paste"""


@augment_fp.command("build")
@config_options
@click.option("--scene", "scenes", multiple=True, nargs=3, type=click.Path(exists=True),
              metavar="CLOUD DETECTIONS GT_PREFIX", required=True,
              help="Cloud file, detections JSON list of boxes, GT sidecar prefix.")
@click.option("--database", type=click.Path(file_okay=False), required=True)
@reports_errors
def augment_fp_build(config_path, overrides, scenes, database):
    """Mine false positives from detections and crop them into a database"""
    config = _config(config_path, overrides)
    rows = []
    with stage("load"):
        for cloud_path, det_path, gt_prefix in scenes:
            points = read_cloud(cloud_path, int(config["io"]["field_count"]))
            detections = [Box3D.from_json(r) for r in read_json(det_path, "detections")]
            boxes, _ = read_gt(gt_prefix)
            rows.append((Path(cloud_path).stem, points, detections, boxes))
    with stage("augment_fp"):
        db = build_fp_database(rows, float(config["fpa"]["iou_threshold"]))
        save_fp_database(db, database)
    _echo_json({"records": len(db), "points": db.point_count})


@augment_fp.command("paste")
@config_options
@click.option("--augmented", "augmented_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--database", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", "gt_prefix", default=None, help="GT sidecar prefix guarding the paste.")
@click.option("--count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output", type=click.Path(dir_okay=False), required=True)
@reports_errors
def augment_fp_paste(config_path, overrides, augmented_path, database, gt_prefix, count, seed, output):
    """Paste database records into an augmented cloud as background"""
    config = _config(config_path, overrides, seed)
    fpa = config["fpa"]
    count = int(fpa["paste_count"]) if count is None else count
    with stage("augment_fp"):
        cloud = read_augmented(augmented_path)
        gt_boxes = read_gt(gt_prefix)[0] if gt_prefix else []
        result = paste_samples(cloud, load_fp_database(database), count, gt_boxes,
                               rng_seed=int(config["io"]["seed"]),
                               random_translation=float(fpa["random_translation"]))
        write_augmented(result.cloud, output)
    _echo_json({"requested": count, "pasted": result.pasted, "points": len(result.cloud)})


# ============== EVAL / PIPELINE ==============

@cli.command("eval")
@click.option("--augmented", "augmented_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--priors", "priors_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--gt", "gt_prefix", required=True, help="GT sidecar prefix.")
@reports_errors
def evaluate(augmented_path, priors_path, gt_prefix):
    """Metrics of written artifacts against a GT sidecar"""
    with stage("metrics"):
        cloud = read_augmented(augmented_path)
        priors = read_priors(priors_path)
        boxes, point_gt = read_gt(gt_prefix)
        if len(point_gt) != len(cloud):
            raise FormatError(f"GT covers {len(point_gt)} points, the augmented cloud has {len(cloud)}",
                              Path(gt_prefix).with_suffix(".bin"))
        box_labels = np.array([b.label for b in boxes] or [0], dtype=np.int32)
        gt_labels = np.where(point_gt >= 0, box_labels[np.maximum(point_gt, 0)], 0)
        metrics = compute_metrics(cloud, priors, gt_labels, point_gt, boxes,
                                  evicted=sum(len(p.evicted) for p in priors))
    _echo_json(metrics.to_json())


@cli.command()
@config_options
@click.option("--seed", type=int, default=None)
@click.option("--no-refine", is_flag=True, help="Skip the projection refiner.")
@click.option("--no-centers", is_flag=True, help="Paint semantic labels only.")
@click.option("--output", type=click.Path(file_okay=False), default=None)
@reports_errors
def pipeline(config_path, overrides, seed, no_refine, no_centers, output):
    """Full run: stack, paint, refine, assemble, write, report"""
    extra = list(overrides)
    if seed is not None:
        extra.append(f"io.seed={seed}")
    if no_refine:
        extra.append("refiner.enabled=false")
    if no_centers:
        extra.append("painter.emit_centers=false")
    result = run_pipeline(config_path, extra, output_dir=output)
    _echo_json({"metrics": result.metrics.to_json(), "artifacts": result.artifacts})


@cli.command()
@config_options
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--first-seed", type=int, default=0, show_default=True)
@reports_errors
def ablate(config_path, overrides, seeds, first_seed):
    """Label-only vs mean-center vs refined over seeded synthetic scenes"""
    report = run_ablation(config_path, range(first_seed, first_seed + seeds), list(overrides))
    _echo_json(report.summary())


@cli.command()
@click.option("--host", default="0.0.0.0")
@click.option("--port", type=int, default=5000)
def serve(host, port):
    """Run the HTTP service"""
    from app import create_app
    create_app().run(host=host, port=port, debug=Config.DEBUG)
