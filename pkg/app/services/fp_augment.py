"""
False Positive Augmentation Service
Mines false-positive detections against ground truth and pastes them back
into raw clouds as background hard examples
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from app.errors import RejectedInputError
from app.services.scene_model import AugmentedCloud

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.1
INSIDE_TOL = 1e-4


def wrap_yaw(yaw):
    """Map an angle into (-pi, pi]"""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


# ============== BOXES ==============

@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]   # (l, w, h)
    yaw: float = 0.0
    label: int = 0
    score: float = 1.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise RejectedInputError("Box3D needs a 3D center and an (l, w, h) size")
        if not all(math.isfinite(c) for c in center + size + (float(self.yaw),)):
            raise RejectedInputError("Box3D fields must be finite")
        if min(size) <= 0:
            raise RejectedInputError(f"Box3D sizes must be positive, got {size}")
        if not 0.0 <= float(self.score) <= 1.0:
            raise RejectedInputError(f"Box3D score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_yaw(self.yaw))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "score", float(self.score))

    def rotation(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corners counter-clockwise in the ego x-y plane"""
        l, w, _ = self.size
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
        r = self.rotation()[:2, :2]
        return local @ r.T + np.asarray(self.center[:2])

    def to_local(self, xyz) -> np.ndarray:
        return (np.asarray(xyz, dtype=np.float64) - np.asarray(self.center)) @ self.rotation()

    def to_ego(self, local) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.rotation().T + np.asarray(self.center)

    def contains(self, xyz, tol=INSIDE_TOL) -> np.ndarray:
        local = self.to_local(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        half = np.asarray(self.size) / 2.0 + tol
        return np.all(np.abs(local) <= half, axis=1)

    def translated(self, dx, dy):
        cx, cy, cz = self.center
        return replace(self, center=(cx + dx, cy + dy, cz))

    def to_json(self):
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "label": self.label, "score": self.score}

    @classmethod
    def from_json(cls, row):
        return cls(row["center"], row["size"], row.get("yaw", 0.0), row.get("label", 0),
                   row.get("score", 1.0))


# ============== BEV OVERLAP ==============

def bev_polygon(box: Box3D) -> Polygon:
    return Polygon(box.bev_corners())


def bev_iou(a: Box3D, b: Box3D) -> float:
    """BEV intersection over union of the two yawed rectangles"""
    pa, pb = bev_polygon(a), bev_polygon(b)
    inter = pa.intersection(pb).area
    if inter <= 0.0:
        return 0.0
    return float(inter / (pa.area + pb.area - inter))


def boxes_overlap(a: Box3D, b: Box3D, margin=0.0) -> bool:
    """True when the BEV rectangles share area, or come closer than `margin` meters"""
    pa, pb = bev_polygon(a), bev_polygon(b)
    if margin > 0.0:
        return pa.distance(pb) < margin
    return pa.intersection(pb).area > 0.0


# ============== MINING ==============

def mine_false_positives(detections: Sequence[Box3D], ground_truth: Sequence[Box3D],
                         iou_threshold=DEFAULT_IOU_THRESHOLD) -> List[Box3D]:
    """Detections whose best BEV IoU against every GT box stays below the threshold"""
    if not 0.0 <= iou_threshold < 1.0:
        raise RejectedInputError(f"iou_threshold must lie in [0, 1), got {iou_threshold}")
    mined = []
    for det in detections:
        best = max((bev_iou(det, gt) for gt in ground_truth), default=0.0)
        if best < iou_threshold:
            mined.append(det)
    logger.debug(f"🔍 Mined {len(mined)} false positives from {len(detections)} detections")
    return mined


# ============== DATABASE ==============

@dataclass
class FpRecord:
    points: np.ndarray     # (K, 4) float32 x, y, z, r in the box-local frame
    box: Box3D
    scene_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        half = np.asarray(self.box.size) / 2.0 + INSIDE_TOL
        if len(self.points) and np.any(np.abs(self.points[:, :3].astype(np.float64)) > half):
            raise RejectedInputError(f"FP record from scene {self.scene_id!r} has points outside its box")

    def __len__(self):
        return len(self.points)

    def ego_points(self, box: Box3D = None) -> np.ndarray:
        """(K, 4) float64 points placed at `box` (default: the stored pose)"""
        box = box or self.box
        xyz = box.to_ego(self.points[:, :3].astype(np.float64))
        return np.hstack([xyz, self.points[:, 3:4].astype(np.float64)])


@dataclass
class FpDatabase:
    records: List[FpRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def add(self, record: FpRecord):
        self.records.append(record)

    @property
    def point_count(self):
        return int(sum(len(r) for r in self.records))


def crop_box_points(points, box: Box3D) -> np.ndarray:
    """Points inside `box`, expressed in its local frame as (K, 4)"""
    cloud = np.asarray(points, dtype=np.float64)
    inside = box.contains(cloud[:, :3], tol=0.0)
    local = box.to_local(cloud[inside, :3])
    return np.hstack([local, cloud[inside, 3:4]])


def build_fp_database(scenes: Iterable[Tuple[str, np.ndarray, Sequence[Box3D], Sequence[Box3D]]],
                      iou_threshold=DEFAULT_IOU_THRESHOLD) -> FpDatabase:
    """Crop every mined false positive from (scene_id, points, detections, gt) tuples"""
    db = FpDatabase()
    empty = 0
    for scene_id, points, detections, gt in scenes:
        for box in mine_false_positives(detections, gt, iou_threshold):
            local = crop_box_points(points, box)
            if len(local) == 0:
                empty += 1
                continue
            db.add(FpRecord(local, box, str(scene_id)))
    if empty:
        logger.warning(f"⚠️ Skipped {empty} false positives with no points inside")
    logger.info(f"✅ Built FP database: {len(db)} records, {db.point_count} points")
    return db


# ============== PASTING ==============

@dataclass
class PasteResult:
    cloud: AugmentedCloud
    pasted: int
    boxes: List[Box3D]


def paste_samples(cloud: AugmentedCloud, db: FpDatabase, count, gt_boxes: Sequence[Box3D],
                  rng_seed=0, random_translation=0.0) -> PasteResult:
    """Paste up to `count` database records into `cloud` as background points

    Records are drawn without replacement. A placement whose BEV rectangle
    overlaps a GT box or an earlier paste is skipped, so the result can hold
    fewer than `count` pastes.
    """
    if count < 0:
        raise RejectedInputError(f"paste count must be >= 0, got {count}")
    if random_translation < 0:
        raise RejectedInputError("random_translation must be >= 0")
    if count == 0 or len(db) == 0:
        return PasteResult(cloud, 0, [])

    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(db))[:count]
    occupied = list(gt_boxes)
    pasted_boxes, chunks = [], []
    for k in order.tolist():
        record = db.records[k]
        box = record.box
        if random_translation > 0:
            dx, dy = rng.uniform(-random_translation, random_translation, size=2)
            box = box.translated(dx, dy)
        if any(boxes_overlap(box, other) for other in occupied):
            logger.debug(f"⚠️ Paste of record {k} collides, skipped")
            continue
        occupied.append(box)
        pasted_boxes.append(box)
        chunks.append(record.ego_points(box))

    if len(pasted_boxes) < count:
        logger.warning(f"⚠️ Pasted {len(pasted_boxes)} of {count} requested FP samples")
    if not chunks:
        return PasteResult(cloud, 0, [])
    extra = AugmentedCloud.unpainted(np.vstack(chunks))
    logger.info(f"✅ Pasted {len(pasted_boxes)} FP samples ({len(extra)} points)")
    return PasteResult(cloud.concat(extra), len(pasted_boxes), pasted_boxes)
