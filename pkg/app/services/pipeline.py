"""
Pipeline Service
Wires stacking, painting, refinement, fusion and FP pasting into one run,
writes the artifacts and reports metrics
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import apply_overrides, load_pipeline_config, merge_pipeline_config
from app.database.codecs import (atomic_write_json, read_calibration, read_cloud, read_gt, read_mask,
                                 write_augmented, write_features, write_priors)
from app.database.fp_store import load_fp_database
from app.errors import RejectedInputError, StageError
from app.services.fp_augment import Box3D, paste_samples
from app.services.fusion_stub import (GRID_PRESETS, build_channel_blocks, cascaded_fuse, init_stages,
                                      pillarize)
from app.services.instance_painter import InstanceMask, PaintResult, paint_scene
from app.services.metrics import Metrics, center_error, compute_metrics, label_accuracy
from app.services.projection import CalibrationRig, RigidTransform, ring_rig
from app.services.projection_refiner import RefineResult, label_params, refine_scene
from app.services.scene_model import (NUSCENES_LABELS, AugmentedCloud, LabelTable, Sweep, as_cloud,
                                      assemble_augmented, stack_sweeps)
from app.services.synth import (NoiseSpec, SceneSpec, SyntheticScene, generate_scene, observed_centers,
                                split_into_sweeps, visible_mask)

logger = logging.getLogger(__name__)


@contextmanager
def stage(name):
    """Tag any failure inside the block with the stage name"""
    logger.info(f"▶️ {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"❌ Stage {name} failed: {str(e)}")
        raise StageError(name, e) from e


# ============== INPUTS ==============

@dataclass
class GroundTruth:
    boxes: List[Box3D]
    point_gt: np.ndarray                       # per stacked point, -1 background
    labels: np.ndarray                         # per stacked point, 0 background
    visible: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None      # (B, 3) visible-point medoids


@dataclass
class PipelineInputs:
    sweeps: List[Sweep]
    keyframe_index: int
    rig: CalibrationRig
    masks: List[InstanceMask]
    labels: LabelTable = NUSCENES_LABELS
    gt: Optional[GroundTruth] = None
    scene: Optional[SyntheticScene] = None


def resolve_config(config=None, overrides=None):
    """Path, dict or None → a full, validated pipeline config"""
    if config is None or isinstance(config, (str, Path)):
        resolved = load_pipeline_config(config)
    else:
        resolved = merge_pipeline_config(config)
    return apply_overrides(resolved, overrides)


def scene_spec_from_config(config, seed=None) -> SceneSpec:
    synth = config["synth"]
    noise = NoiseSpec(
        rotation_deg=float(synth["rotation_deg"]),
        translation_m=float(synth["translation_m"]),
        sync_offset_s=float(synth["sync_offset_s"]),
        occluders=int(synth["occluders"]),
        mask_erosion_px=int(synth["mask_erosion_px"]),
        parallax=bool(synth["parallax"]),
    )
    return SceneSpec(
        boxes=int(synth["boxes"]),
        density=float(synth["density"]),
        ground_points=int(synth["ground_points"]),
        ground_radius=float(synth["ground_radius"]),
        range=tuple(synth["range"]),
        label_mix=synth["label_mix"],
        seed=int(config["io"]["seed"] if seed is None else seed),
        noise=noise,
        rig=ring_rig(**config["rig"]),
        ego_speed=float(synth["ego_speed"]),
    )


def synthetic_inputs(config, seed=None) -> PipelineInputs:
    synth = config["synth"]
    scene = generate_scene(scene_spec_from_config(config, seed))
    sweeps, order = split_into_sweeps(scene.points, int(synth["sweeps"]), float(synth["sweep_interval"]),
                                      float(synth["ego_speed"]), scene.rig.lidar_to_ego)
    visible = visible_mask(scene)
    gt = GroundTruth(scene.boxes, scene.point_gt[order], scene.point_labels()[order], visible[order],
                     observed_centers(scene, visible))
    return PipelineInputs(sweeps, len(sweeps) - 1, scene.calibration, scene.masks, scene.spec.labels,
                          gt, scene)


def file_inputs(config) -> PipelineInputs:
    io = config["io"]
    if not io["calibration"]:
        raise RejectedInputError("io.calibration is required in files mode")
    if not io["sweeps"]:
        raise RejectedInputError("io.sweeps must list at least one sweep in files mode")
    rig = read_calibration(io["calibration"])
    sweeps = []
    for entry in io["sweeps"]:
        pose = RigidTransform(entry["ego_pose"]) if entry.get("ego_pose") is not None \
            else RigidTransform.identity()
        sweeps.append(Sweep(read_cloud(entry["path"], int(io["field_count"])), pose,
                            float(entry.get("timestamp", 0.0))))
    masks = [read_mask(m["raster"], m["sidecar"], j) for j, m in enumerate(io["masks"])]
    logger.info(f"📦 Loaded {len(sweeps)} sweeps and {len(masks)} masks")

    gt = None
    if io["gt"]:
        boxes, point_gt = read_gt(io["gt"])
        box_labels = np.array([b.label for b in boxes], dtype=np.int32)
        labels = np.where(point_gt >= 0, box_labels[np.maximum(point_gt, 0)] if len(boxes) else 0, 0)
        gt = GroundTruth(boxes, point_gt, labels.astype(np.int32))
    return PipelineInputs(sweeps, int(io["keyframe_index"]), rig, masks, NUSCENES_LABELS, gt)


def load_inputs(config, seed=None) -> PipelineInputs:
    mode = config["io"]["mode"]
    if mode == "synthetic":
        return synthetic_inputs(config, seed)
    if mode == "files":
        return file_inputs(config)
    raise RejectedInputError(f"io.mode must be 'synthetic' or 'files', got {mode!r}")


def _kept_by_min_distance(sweeps: Sequence[Sweep], min_distance):
    return np.concatenate([np.linalg.norm(as_cloud(s.points)[:, :2], axis=1) >= min_distance
                           for s in sweeps])


def _filter_gt(gt: GroundTruth, keep) -> GroundTruth:
    return replace(gt, point_gt=gt.point_gt[keep], labels=gt.labels[keep],
                   visible=None if gt.visible is None else gt.visible[keep])


# ============== CORE ==============

def paint_and_refine(points, rig, masks, labels: LabelTable, config, refine=None, emit_centers=None):
    """paint_scene → refine_scene → assemble_augmented with the config's knobs"""
    painter, refiner = config["painter"], config["refiner"]
    refine = bool(refiner["enabled"]) if refine is None else refine
    emit_centers = bool(painter["emit_centers"]) if emit_centers is None else emit_centers

    with stage("paint"):
        painted: PaintResult = paint_scene(points, rig, masks, z_min=float(painter["z_min"]),
                                           merge_gap=float(painter["merge_gap"]))
    with stage("refine"):
        params = label_params(labels, int(refiner["min_pts"]), float(refiner["eps_scale"]),
                              float(refiner["eps_min"]), float(refiner["eps_max"]))
        refined: RefineResult = refine_scene(painted.priors, points, params, enabled=refine,
                                             emit_centers=emit_centers)
    with stage("assemble"):
        augmented = assemble_augmented(points, refined.labels, refined.centers, refined.instance_ids)
    return painted, refined, augmented


@dataclass
class PipelineResult:
    metrics: Metrics
    artifacts: Dict[str, str]
    augmented: AugmentedCloud
    refined: RefineResult
    config: dict = field(default_factory=dict)


def run_pipeline(config=None, overrides=None, output_dir=None) -> PipelineResult:
    """Run every stage once; any failure surfaces as a StageError"""
    logger.info("=" * 80)
    logger.info("🚀 Running instance-painting pipeline")
    logger.info("=" * 80)

    with stage("config"):
        config = resolve_config(config, overrides)
        out = Path(output_dir or config["io"]["output_dir"])

    with stage("load"):
        inputs = load_inputs(config)

    with stage("stack"):
        min_distance = float(config["io"]["min_distance"])
        stacked = stack_sweeps(inputs.sweeps, inputs.keyframe_index, inputs.rig, min_distance)
        gt = inputs.gt
        if gt is not None and min_distance > 0:
            gt = _filter_gt(gt, _kept_by_min_distance(inputs.sweeps, min_distance))
        if gt is not None and len(gt.point_gt) != len(stacked):
            raise RejectedInputError(f"GT covers {len(gt.point_gt)} points, cloud has {len(stacked)}")

    _, refined, augmented = paint_and_refine(stacked, inputs.rig, inputs.masks, inputs.labels, config)
    artifacts: Dict[str, str] = {}
    extras: Dict[str, float] = {}

    fusion = config["fusion"]
    fused = None
    if fusion["enabled"]:
        with stage("fuse"):
            blocks = build_channel_blocks(augmented, len(inputs.labels))
            stages = init_stages([b.shape[1] for b in blocks], int(fusion["stages"]), int(fusion["hidden"]),
                                 float(fusion["weight_scale"]), int(fusion["seed"]))
            fused = cascaded_fuse(blocks, stages)
            grid = GRID_PRESETS.get(fusion["grid"])
            if grid is None:
                raise RejectedInputError(f"Unknown grid preset {fusion['grid']!r}")
            extras["fused_dim"] = float(fused.features.shape[1])
            extras["occupied_cells"] = float(len(pillarize(augmented, grid)))

    with stage("metrics"):
        if gt is not None:
            metrics = compute_metrics(augmented, refined.priors, gt.labels, gt.point_gt, gt.boxes,
                                      gt.observed, refined.evicted_count)
            if gt.visible is not None:
                extras["visible_accuracy"] = label_accuracy(augmented, gt.labels, mask=gt.visible)
        else:
            metrics = compute_metrics(augmented, refined.priors, evicted=refined.evicted_count)
        metrics.extras.update(extras)

    training_cloud = augmented
    fpa = config["fpa"]
    if int(fpa["paste_count"]) > 0:
        with stage("augment_fp"):
            if not fpa["database"]:
                raise RejectedInputError("fpa.paste_count > 0 needs fpa.database")
            db = load_fp_database(fpa["database"])
            pasted = paste_samples(augmented, db, int(fpa["paste_count"]), gt.boxes if gt else [],
                                   rng_seed=int(config["io"]["seed"]),
                                   random_translation=float(fpa["random_translation"]))
            training_cloud = pasted.cloud
            metrics.extras["fp_pasted"] = float(pasted.pasted)

    with stage("write"):
        artifacts["augmented"] = str(write_augmented(training_cloud, out / "augmented.bin"))
        artifacts["priors"] = str(write_priors(refined.priors, out / "priors.json"))
        if fused is not None:
            artifacts["fused"] = str(write_features(out / "fused.bin", fused.features))
        artifacts["metrics"] = str(atomic_write_json(out / "metrics.json", metrics.to_json()))

    logger.info(f"✅ Pipeline finished; artifacts in {out}")
    return PipelineResult(metrics, artifacts, training_cloud, refined, config)


# ============== ABLATION ==============

ABLATION_VARIANTS = {
    "label_only": {"refine": False, "emit_centers": False},
    "label_mean_center": {"refine": False, "emit_centers": True},
    "label_center_refined": {"refine": True, "emit_centers": True},
}


@dataclass
class AblationReport:
    seeds: List[int]
    accuracy: Dict[str, List[float]]
    center_mae: Dict[str, List[Optional[float]]]

    @property
    def refined_not_worse(self) -> int:
        refined = self.accuracy["label_center_refined"]
        unrefined = self.accuracy["label_mean_center"]
        return sum(1 for r, u in zip(refined, unrefined) if r >= u)

    def summary(self):
        def mean(values):
            present = [v for v in values if v is not None]
            return float(np.mean(present)) if present else None

        return {
            "seeds": len(self.seeds),
            "variants": {name: {"accuracy": mean(self.accuracy[name]), "center_mae": mean(self.center_mae[name])}
                         for name in ABLATION_VARIANTS},
            "refined_not_worse": self.refined_not_worse,
        }


def run_ablation(config=None, seeds: Sequence[int] = range(10), overrides=None) -> AblationReport:
    """Label-only / mean-center / refined variants over seeded synthetic scenes"""
    config = resolve_config(config, overrides)
    if config["io"]["mode"] != "synthetic":
        raise RejectedInputError("ablation runs on synthetic scenes only")
    report = AblationReport(list(seeds), {k: [] for k in ABLATION_VARIANTS}, {k: [] for k in ABLATION_VARIANTS})
    for seed in report.seeds:
        with stage("load"):
            inputs = synthetic_inputs(config, seed)
        with stage("stack"):
            stacked = stack_sweeps(inputs.sweeps, inputs.keyframe_index, inputs.rig)
        gt = inputs.gt
        for name, knobs in ABLATION_VARIANTS.items():
            _, refined, augmented = paint_and_refine(stacked, inputs.rig, inputs.masks, inputs.labels,
                                                     config, **knobs)
            report.accuracy[name].append(label_accuracy(augmented, gt.labels))
            report.center_mae[name].append(
                center_error(refined.priors, gt.boxes, gt.point_gt, reference=gt.observed)
                if knobs["emit_centers"] else None)
        logger.info(f"📊 seed {seed}: " + ", ".join(
            f"{k}={report.accuracy[k][-1]:.4f}" for k in ABLATION_VARIANTS))
    return report
