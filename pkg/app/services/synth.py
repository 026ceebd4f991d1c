"""
Synthetic Scene Service
Ground-truth boxes, surface-sampled LiDAR points, z-buffered instance masks
and controlled calibration / sync / occlusion errors
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.transform import Rotation

from app.errors import RejectedInputError, SceneGenerationError
from app.services.fp_augment import Box3D, boxes_overlap
from app.services.instance_painter import InstanceMask, InstanceRecord
from app.services.projection import (CalibrationRig, RigidTransform, compose, project_cloud,
                                     ring_rig)
from app.services.projection_refiner import medoid
from app.services.scene_model import NUSCENES_LABELS, LabelTable, Sweep

logger = logging.getLogger(__name__)

BACKGROUND = -1
PLACEMENT_RETRIES = 200
BOX_SPACING = 1.0          # minimum BEV gap between placed boxes, meters
WALL_SIZE = (8.0, 0.3, 4.0)
WALL_BEHIND = (2.0, 6.0)   # meters behind the box it shadows
TRUNCATED_SCORE = 0.9      # segmentation score of an instance cut by a side border

# (l, w, h) per label name
BOX_SIZES = {
    "car": (4.6, 1.9, 1.7),
    "truck": (6.9, 2.5, 2.9),
    "construction_vehicle": (6.4, 2.8, 3.2),
    "bus": (11.0, 2.9, 3.5),
    "trailer": (12.3, 2.9, 3.9),
    "barrier": (2.5, 0.5, 1.0),
    "motorcycle": (2.1, 0.8, 1.5),
    "bicycle": (1.8, 0.6, 1.3),
    "pedestrian": (0.7, 0.7, 1.75),
    "traffic_cone": (0.4, 0.4, 0.9),
}


@dataclass(frozen=True)
class NoiseSpec:
    rotation_deg: float = 0.0     # max extrinsic rotation jitter per camera
    translation_m: float = 0.0    # max extrinsic translation jitter per camera
    sync_offset_s: float = 0.0    # camera/LiDAR time offset
    occluders: int = 0
    mask_erosion_px: int = 0
    parallax: bool = False        # keep points a camera sees on another instance

    def __post_init__(self):
        for name in ("rotation_deg", "translation_m", "sync_offset_s", "occluders", "mask_erosion_px"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise RejectedInputError(f"NoiseSpec.{name} must be >= 0, got {value}")

    @property
    def calibration_is_exact(self):
        return self.rotation_deg == 0 and self.translation_m == 0 and self.sync_offset_s == 0


@dataclass
class SceneSpec:
    boxes: int = 10
    density: float = 6000.0           # points per m^2 at 1 m range
    ground_points: int = 30000
    ground_radius: float = 50.0
    range: Tuple[float, float] = (6.0, 45.0)
    label_mix: Optional[Sequence] = None   # label names or ids; None = whole table
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    labels: LabelTable = NUSCENES_LABELS
    rig: Optional[CalibrationRig] = None
    ego_speed: float = 10.0
    fixed_boxes: Optional[Sequence[Box3D]] = None

    def __post_init__(self):
        if not self.density > 0:
            raise RejectedInputError(f"density must be positive, got {self.density}")
        if self.boxes < 0 or self.ground_points < 0:
            raise RejectedInputError("box and ground point counts must be >= 0")
        lo, hi = self.range
        if not 0 < lo < hi:
            raise RejectedInputError(f"range must satisfy 0 < min < max, got {self.range}")
        if self.rig is None:
            self.rig = ring_rig()

    def label_ids(self) -> List[int]:
        if not self.label_mix:
            return [e.label_id for e in self.labels]
        ids = []
        for item in self.label_mix:
            ids.append(self.labels.by_name(item).label_id if isinstance(item, str)
                       else self.labels.get(int(item)).label_id)
        return ids


@dataclass
class SyntheticScene:
    spec: SceneSpec
    rig: CalibrationRig            # true geometry the masks were rendered with
    calibration: CalibrationRig    # what the painter is told (noise applied)
    boxes: List[Box3D]
    occluders: List[Box3D]
    points: np.ndarray             # (N, 4) keyframe ego frame
    point_gt: np.ndarray           # (N,) box index, -1 for background
    masks: List[InstanceMask] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    @property
    def noise(self):
        return self.spec.noise

    def point_labels(self) -> np.ndarray:
        labels = np.zeros(len(self.points), dtype=np.int32)
        fg = self.point_gt >= 0
        box_labels = np.array([b.label for b in self.boxes], dtype=np.int32)
        labels[fg] = box_labels[self.point_gt[fg]]
        return labels


# ============== GEOMETRY ==============

def _slab(origin_local, dirs_local, half):
    """Ray/box entry and exit parameters for rays o + t·d in the box frame"""
    o = np.broadcast_to(origin_local, dirs_local.shape)
    d = dirs_local
    parallel = np.abs(d) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(parallel, 1.0, d)
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    inside_slab = np.abs(o) <= half
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    return tmin.max(axis=-1), tmax.min(axis=-1)


def _box_ray(box: Box3D, origin, dirs):
    r = box.rotation()
    o_local = (np.asarray(origin) - np.asarray(box.center)) @ r
    d_local = np.asarray(dirs) @ r
    return _slab(o_local, d_local, np.asarray(box.size) / 2.0)


def _sample_faces(box: Box3D, viewpoint, density, rng) -> np.ndarray:
    """Uniform samples on the faces of `box` that face `viewpoint`"""
    half = np.asarray(box.size) / 2.0
    chunks = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            if axis == 2 and sign < 0:
                continue   # underside
            normal_local = np.zeros(3)
            normal_local[axis] = sign
            face_center = box.to_ego(normal_local * half)
            normal = box.rotation() @ normal_local
            if np.dot(normal, face_center - viewpoint) >= 0:
                continue
            span = [k for k in range(3) if k != axis]
            area = 4.0 * half[span[0]] * half[span[1]]
            distance = max(np.linalg.norm(face_center - viewpoint), 1.0)
            count = rng.poisson(density * area / distance ** 2)
            if count == 0:
                continue
            local = np.empty((count, 3))
            local[:, axis] = sign * half[axis]
            for k in span:
                local[:, k] = rng.uniform(-half[k], half[k], size=count)
            chunks.append(box.to_ego(local))
    return np.vstack(chunks) if chunks else np.zeros((0, 3))


def lidar_occluded(points, owner, blockers: Sequence[Box3D], origin) -> np.ndarray:
    """True where the segment origin→point passes through a blocker other than its owner"""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    blocked = np.zeros(len(xyz), dtype=bool)
    for k, box in enumerate(blockers):
        candidates = np.nonzero((owner != k) & ~blocked)[0]
        if len(candidates) == 0:
            continue
        near, far = _box_ray(box, origin, xyz[candidates] - origin)
        hit = np.maximum(near, 0.0) < np.minimum(far, 1.0 - 1e-6)
        blocked[candidates[hit]] = True
    return blocked


# ============== PLACEMENT ==============

def _box_size(labels: LabelTable, label_id):
    entry = labels.get(label_id)
    return BOX_SIZES.get(entry.name, (entry.length, entry.length, entry.length))


def _place_boxes(spec: SceneSpec, rng) -> List[Box3D]:
    ids = spec.label_ids()
    lo, hi = spec.range
    boxes: List[Box3D] = []
    for i in range(spec.boxes):
        label = ids[int(rng.integers(len(ids)))]
        size = _box_size(spec.labels, label)
        for _ in range(PLACEMENT_RETRIES):
            r = rng.uniform(lo, hi)
            azimuth = rng.uniform(-math.pi, math.pi)
            yaw = rng.uniform(-math.pi, math.pi)
            box = Box3D((r * math.cos(azimuth), r * math.sin(azimuth), size[2] / 2.0), size, yaw, label)
            if not any(boxes_overlap(box, other, margin=BOX_SPACING) for other in boxes):
                boxes.append(box)
                break
        else:
            raise SceneGenerationError(
                f"Could not place box {i} ({spec.labels.get(label).name}) after {PLACEMENT_RETRIES} tries")
    return boxes


def _place_occluders(spec: SceneSpec, boxes: Sequence[Box3D], rng) -> List[Box3D]:
    walls: List[Box3D] = []
    lo, hi = spec.range
    for k in range(int(spec.noise.occluders)):
        for _ in range(PLACEMENT_RETRIES):
            if boxes:
                anchor = boxes[int(rng.integers(len(boxes)))]
                azimuth = math.atan2(anchor.center[1], anchor.center[0])
                r = math.hypot(anchor.center[0], anchor.center[1]) + rng.uniform(*WALL_BEHIND)
            else:
                azimuth = rng.uniform(-math.pi, math.pi)
                r = rng.uniform(lo, hi)
            wall = Box3D((r * math.cos(azimuth), r * math.sin(azimuth), WALL_SIZE[2] / 2.0),
                         WALL_SIZE, azimuth + math.pi / 2.0, 0)
            if not any(boxes_overlap(wall, other, margin=0.5) for other in list(boxes) + walls):
                walls.append(wall)
                break
        else:
            logger.warning(f"⚠️ Occluder {k} could not be placed, skipping")
    return walls


# ============== SCENE ==============

def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Boxes, surface points, background, rendered masks and noisy calibration"""
    rng = np.random.default_rng(spec.seed)
    logger.info(f"🔍 Generating synthetic scene (seed {spec.seed}, {spec.boxes} boxes)")
    rig = spec.rig
    origin = rig.lidar_to_ego.translation.copy()

    boxes = list(spec.fixed_boxes) if spec.fixed_boxes is not None else _place_boxes(spec, rng)
    occluders = _place_occluders(spec, boxes, rng)
    solids = boxes + occluders

    xyz_parts, owner_parts = [], []
    for k, solid in enumerate(solids):
        pts = _sample_faces(solid, origin, spec.density, rng)
        xyz_parts.append(pts)
        owner_parts.append(np.full(len(pts), k, dtype=np.int64))

    n_ground = int(spec.ground_points)
    radius = rng.uniform(2.0, spec.ground_radius, size=n_ground)
    theta = rng.uniform(-math.pi, math.pi, size=n_ground)
    ground = np.stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(n_ground)], axis=1)
    xyz_parts.append(ground)
    owner_parts.append(np.full(n_ground, -1, dtype=np.int64))

    xyz = np.vstack(xyz_parts) if xyz_parts else np.zeros((0, 3))
    owner = np.concatenate(owner_parts) if owner_parts else np.zeros(0, dtype=np.int64)
    reflectance = np.where(owner >= 0, rng.uniform(0.0, 1.0, size=len(xyz)),
                           rng.uniform(0.0, 0.3, size=len(xyz)))

    hidden = lidar_occluded(xyz, owner, solids, origin)
    keep = ~hidden
    points = np.hstack([xyz[keep], reflectance[keep, None]])
    owner = owner[keep]
    point_gt = np.where(owner < len(boxes), owner, BACKGROUND).astype(np.int64)

    scene = SyntheticScene(spec, rig, rig, boxes, occluders, points, point_gt)
    scene.masks = render_instance_masks(scene)

    parallax_culled = 0
    if not spec.noise.parallax:
        # judge against unshrunk masks so erosion does not cull object edges
        masks = scene.masks if not spec.noise.mask_erosion_px else render_instance_masks(scene, erosion_px=0)
        _, misplaced = misplaced_hits(points, point_gt, rig, masks)
        consistent = misplaced == 0
        parallax_culled = int(np.count_nonzero(~consistent))
        scene.points = points[consistent]
        scene.point_gt = point_gt[consistent]

    scene.calibration = perturb_calibration(rig, spec.noise, seed=spec.seed, ego_speed=spec.ego_speed)
    logger.info(f"✅ Scene ready: {len(boxes)} boxes, {len(occluders)} occluders, {len(scene.points)} points "
                f"({int(np.count_nonzero(hidden))} culled as LiDAR-occluded, {parallax_culled} as "
                f"camera-inconsistent)")
    return scene


def _camera_rays(cam):
    """Per-pixel ray directions (ego frame) through pixel centers, shape (H, W, 3)"""
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    return d_cam @ cam.extrinsic.rotation


def render_instance_masks(scene: SyntheticScene, rig: CalibrationRig = None,
                          erosion_px: int = None) -> List[InstanceMask]:
    """Z-buffered per-pixel ray casting of the GT boxes; instance id = box index + 1"""
    rig = rig or scene.rig
    erosion_px = int(scene.noise.mask_erosion_px if erosion_px is None else erosion_px)
    masks = []
    for j, cam in enumerate(rig.cameras):
        raster = np.zeros((cam.height, cam.width), dtype=np.uint16)
        if scene.boxes:
            origin = cam.extrinsic.inverse().translation
            dirs = _camera_rays(cam).reshape(-1, 3)
            depth = np.full(len(dirs), np.inf)
            ids = np.zeros(len(dirs), dtype=np.uint16)
            for b, box in enumerate(scene.boxes):
                near, far = _box_ray(box, origin, dirs)
                hit = (near > 0.0) & (near <= far) & (near < depth)
                depth[hit] = near[hit]
                ids[hit] = b + 1
            raster = ids.reshape(cam.height, cam.width)

        if erosion_px > 0:
            eroded = np.zeros_like(raster)
            for k in np.unique(raster[raster != 0]).tolist():
                region = binary_erosion(raster == k, iterations=erosion_px, border_value=1)
                eroded[region] = k
            raster = eroded

        records = {}
        for k in np.unique(raster[raster != 0]).tolist():
            touches_left = bool(np.any(raster[:, 0] == k))
            touches_right = bool(np.any(raster[:, -1] == k))
            score = TRUNCATED_SCORE if touches_left or touches_right else 1.0
            records[int(k)] = InstanceRecord(int(k), scene.boxes[k - 1].label, score,
                                             touches_left, touches_right)
        masks.append(InstanceMask(j, raster, records))
    logger.debug(f"📦 Rendered {len(masks)} instance masks")
    return masks


# ============== ERROR INJECTION ==============

def jitter_extrinsic(extrinsic: RigidTransform, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Compose a camera-frame rotation (axis-angle, radians) and shift onto cam<-ego"""
    delta = RigidTransform.from_rt(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(),
                                   translation)
    return compose(delta, extrinsic)


def _random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_calibration(rig: CalibrationRig, noise: NoiseSpec, seed=0, ego_speed=10.0) -> CalibrationRig:
    """Per-camera extrinsic jitter plus the ego displacement of a sync offset"""
    if noise.calibration_is_exact:
        return rig
    rng = np.random.default_rng(seed)
    max_angle = math.radians(noise.rotation_deg)
    sync_shift = RigidTransform.from_rt(np.eye(3), (-ego_speed * noise.sync_offset_s, 0.0, 0.0))
    cameras = []
    for cam in rig.cameras:
        rotvec = _random_direction(rng) * rng.uniform(0.0, max_angle)
        translation = _random_direction(rng) * rng.uniform(0.0, noise.translation_m)
        extrinsic = jitter_extrinsic(cam.extrinsic, rotvec, translation)
        if noise.sync_offset_s:
            extrinsic = compose(extrinsic, sync_shift)
        cameras.append(cam.with_extrinsic(extrinsic))
    logger.debug(f"🔧 Perturbed {len(cameras)} cameras (rot ≤ {noise.rotation_deg}°, "
                 f"trans ≤ {noise.translation_m} m, sync {noise.sync_offset_s} s)")
    return CalibrationRig(rig.lidar_to_ego, cameras)


# ============== GROUND TRUTH ==============

def misplaced_hits(points, point_gt, rig: CalibrationRig, masks: Sequence[InstanceMask]):
    """Per point: (true-rig hit count, hits landing off its own instance id)"""
    n = len(points)
    hits = project_cloud(points, rig)
    if len(hits) == 0:
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    cols, rows = hits.pixels()
    landed = np.empty(len(hits), dtype=np.int64)
    for j, mask in enumerate(masks):
        sel = hits.camera == j
        landed[sel] = mask.raster[rows[sel], cols[sel]]
    expected = np.where(point_gt >= 0, point_gt + 1, 0)
    wrong = landed != expected[hits.point_index]
    return hits.hits_per_point(), np.bincount(hits.point_index[wrong], minlength=n)


def visible_mask(scene: SyntheticScene) -> np.ndarray:
    """Points with at least one true-rig hit, all of them on their own instance id"""
    hit_count, misplaced = misplaced_hits(scene.points, scene.point_gt, scene.rig, scene.masks)
    return (hit_count > 0) & (misplaced == 0)


def observed_centers(scene: SyntheticScene, visible=None) -> np.ndarray:
    """Medoid of each box's visible points; NaN rows for boxes nobody sees"""
    visible = visible_mask(scene) if visible is None else visible
    centers = np.full((len(scene.boxes), 3), np.nan)
    xyz = scene.points[:, :3]
    for b in range(len(scene.boxes)):
        own = np.nonzero((scene.point_gt == b) & visible)[0]
        if len(own):
            centers[b] = xyz[own[medoid(xyz[own])]]
    return centers


def split_into_sweeps(points, count=10, interval=0.05, ego_speed=10.0,
                      lidar_to_ego: RigidTransform = None) -> Tuple[List[Sweep], np.ndarray]:
    """Spread a static keyframe cloud over `count` sweeps of a forward-driving ego

    The last sweep is the keyframe. Returns the sweeps (each in its own LiDAR
    frame) and the original point index of every stacked row.
    """
    if count < 1:
        raise RejectedInputError("need at least one sweep")
    cloud = np.asarray(points, dtype=np.float64)[:, :4]
    lidar_to_ego = lidar_to_ego or RigidTransform.identity()
    ego_to_lidar = lidar_to_ego.inverse()
    key_time = (count - 1) * interval
    key_x = ego_speed * key_time
    sweeps, order = [], []
    for s in range(count):
        idx = np.arange(s, len(cloud), count)
        t = s * interval
        x = ego_speed * t
        xyz = cloud[idx, :3] + np.array([key_x - x, 0.0, 0.0])
        local = ego_to_lidar.apply(xyz) if len(idx) else np.zeros((0, 3))
        sweeps.append(Sweep(np.hstack([local, cloud[idx, 3:4]]),
                            RigidTransform.from_rt(np.eye(3), (x, 0.0, 0.0)), t))
        order.append(idx)
    return sweeps, np.concatenate(order)
