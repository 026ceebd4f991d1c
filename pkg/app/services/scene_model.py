"""
Scene Model Service
Core point types, the label table and multi-sweep accumulation
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from app.errors import RejectedInputError
from app.services.projection import CalibrationRig, RigidTransform, apply

logger = logging.getLogger(__name__)

# Column layout of a raw cloud array
X, Y, Z, R, OFFSET = range(5)
CLOUD_FIELDS = 5


class LidarPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: float
    sweep_offset: float = 0.0


class AugmentedPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: float
    s: int
    cx: float
    cy: float
    cz: float
    instance_id: int


def as_cloud(points) -> np.ndarray:
    """Normalise points to a float64 (N, 5) array; 4-field input gets offset 0"""
    if isinstance(points, np.ndarray):
        arr = points.astype(np.float64, copy=False)
    else:
        arr = np.asarray([tuple(p) for p in points], dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, CLOUD_FIELDS))
    if arr.ndim != 2 or arr.shape[1] not in (4, 5):
        raise RejectedInputError(f"Cloud must have 4 or 5 fields per point, got shape {arr.shape}")
    if arr.shape[1] == 4:
        arr = np.hstack([arr, np.zeros((len(arr), 1))])
    if not np.all(np.isfinite(arr)):
        raise RejectedInputError("Cloud contains non-finite values")
    return arr


# ============== LABELS ==============

class LabelEntry(NamedTuple):
    label_id: int
    name: str
    length: float   # characteristic length in meters


@dataclass(frozen=True)
class LabelTable:
    entries: Sequence[LabelEntry]

    def __post_init__(self):
        entries = tuple(LabelEntry(int(e[0]), str(e[1]), float(e[2])) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [e.label_id for e in entries]
        if ids != list(range(1, len(ids) + 1)):
            raise RejectedInputError("Label ids must be dense and start at 1")
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise RejectedInputError("Label names must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[LabelEntry]:
        return iter(self.entries)

    def get(self, label_id) -> LabelEntry:
        if not 1 <= label_id <= len(self.entries):
            raise RejectedInputError(f"Unknown label id {label_id}")
        return self.entries[label_id - 1]

    def by_name(self, name) -> LabelEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise RejectedInputError(f"Unknown label name {name!r}")

    def to_json(self):
        return [{"id": e.label_id, "name": e.name, "length": e.length} for e in self.entries]

    @classmethod
    def from_json(cls, rows):
        return cls([(r["id"], r["name"], r["length"]) for r in rows])


# nuScenes detection classes; length is the longest box side of a typical instance
NUSCENES_LABELS = LabelTable([
    (1, "car", 4.6),
    (2, "truck", 6.9),
    (3, "construction_vehicle", 6.4),
    (4, "bus", 11.0),
    (5, "trailer", 12.3),
    (6, "barrier", 2.5),
    (7, "motorcycle", 2.1),
    (8, "bicycle", 1.8),
    (9, "pedestrian", 0.7),
    (10, "traffic_cone", 0.4),
])


# ============== SWEEPS ==============

@dataclass(frozen=True)
class Sweep:
    """One LiDAR revolution in its own LiDAR frame"""

    points: np.ndarray
    ego_pose: RigidTransform   # ego -> global at capture time
    timestamp: float


def _relative_pose(keyframe: RigidTransform, other: RigidTransform) -> Optional[np.ndarray]:
    """T(ego_key <- ego_other) = inv(pose_key) · pose_other"""
    if np.array_equal(keyframe.matrix, other.matrix):
        return None
    return keyframe.inverse().matrix @ other.matrix


def stack_sweeps(sweeps: Sequence[Sweep], keyframe_index: int, rig: CalibrationRig,
                 min_distance: float = 0.0) -> np.ndarray:
    """Express every sweep's points in the keyframe ego frame

    Returns an (N, 5) array; the last column is keyframe time minus sweep time.
    """
    if len(sweeps) == 0:
        raise RejectedInputError("stack_sweeps needs at least one sweep")
    if not -len(sweeps) <= keyframe_index < len(sweeps):
        raise RejectedInputError(f"keyframe_index {keyframe_index} out of range for {len(sweeps)} sweeps")
    for i, sweep in enumerate(sweeps):
        if not sweep.ego_pose.is_finite() or abs(np.linalg.det(sweep.ego_pose.rotation)) < 1e-12:
            raise RejectedInputError(f"Sweep {i} has a non-invertible ego pose")
    times = [s.timestamp for s in sweeps]
    if any(b < a for a, b in zip(times, times[1:])):
        raise RejectedInputError("Sweep timestamps must be non-decreasing")

    keyframe = sweeps[keyframe_index]
    lidar_to_ego = rig.lidar_to_ego
    mount_is_identity = np.array_equal(lidar_to_ego.matrix, np.eye(4))

    stacked: List[np.ndarray] = []
    for sweep in sweeps:
        cloud = as_cloud(sweep.points).copy()
        if min_distance > 0.0 and len(cloud):
            keep = np.linalg.norm(cloud[:, :2], axis=1) >= min_distance
            cloud = cloud[keep]
        if len(cloud):
            xyz = cloud[:, :3]
            if not mount_is_identity:
                xyz = apply(lidar_to_ego, xyz)
            relative = _relative_pose(keyframe.ego_pose, sweep.ego_pose)
            if relative is not None:
                xyz = xyz @ relative[:3, :3].T + relative[:3, 3]
            cloud[:, :3] = xyz
        cloud[:, OFFSET] = keyframe.timestamp - sweep.timestamp
        stacked.append(cloud)

    result = np.vstack(stacked) if stacked else np.zeros((0, CLOUD_FIELDS))
    logger.info(f"✅ Stacked {len(sweeps)} sweeps → {len(result)} points in the keyframe ego frame")
    return result


# ============== AUGMENTED POINTS ==============

@dataclass
class AugmentedCloud:
    """Column store of painted points: (x, y, z, r, s, Cx, Cy, Cz) + instance id"""

    points: np.ndarray        # (N, 4) x, y, z, r
    labels: np.ndarray        # (N,) int
    centers: np.ndarray       # (N, 3)
    instance_ids: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.points)

    def __iter__(self) -> Iterator[AugmentedPoint]:
        for i in range(len(self)):
            x, y, z, r = self.points[i]
            cx, cy, cz = self.centers[i]
            yield AugmentedPoint(float(x), float(y), float(z), float(r), int(self.labels[i]),
                                 float(cx), float(cy), float(cz), int(self.instance_ids[i]))

    def as_array(self) -> np.ndarray:
        """(N, 8) array in the augmented field order"""
        return np.hstack([self.points, self.labels[:, None].astype(np.float64), self.centers])

    @property
    def painted(self):
        return self.instance_ids != 0

    def concat(self, other: "AugmentedCloud") -> "AugmentedCloud":
        return AugmentedCloud(
            np.vstack([self.points, other.points]),
            np.concatenate([self.labels, other.labels]),
            np.vstack([self.centers, other.centers]),
            np.concatenate([self.instance_ids, other.instance_ids]),
        )

    def validate(self):
        check_augmented_invariants(self.labels, self.centers, self.instance_ids)
        return self

    @classmethod
    def unpainted(cls, points):
        cloud = as_cloud(points)
        n = len(cloud)
        return cls(cloud[:, :4].copy(), np.zeros(n, dtype=np.int32), np.zeros((n, 3)),
                   np.zeros(n, dtype=np.int32))


def check_augmented_invariants(labels, centers, instance_ids):
    """Unpainted points carry zeroed prior fields; instances share their fields"""
    unpainted = instance_ids == 0
    if np.any(labels[unpainted] != 0) or np.any(centers[unpainted] != 0.0):
        raise RejectedInputError("Points with instance_id 0 must have label 0 and a zero center")
    painted = ~unpainted
    if np.any(labels[painted] < 1):
        raise RejectedInputError("Painted points must carry a label id >= 1")
    if np.any(painted):
        ids = instance_ids[painted]
        order = np.argsort(ids, kind="stable")
        ids_sorted = ids[order]
        _, first = np.unique(ids_sorted, return_index=True)
        owner = np.repeat(first, np.diff(np.append(first, len(ids_sorted))))
        lab = labels[painted][order]
        cen = centers[painted][order]
        if np.any(lab != lab[owner]) or np.any(cen != cen[owner]):
            raise RejectedInputError("Points sharing an instance_id must share label and center")


def assemble_augmented(points, labels, centers, instance_ids) -> AugmentedCloud:
    """Field-wise zip of raw points with their prior fields"""
    cloud = as_cloud(points)
    labels = np.asarray(labels, dtype=np.int32).reshape(-1)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    instance_ids = np.asarray(instance_ids, dtype=np.int32).reshape(-1)
    n = len(cloud)
    if not (len(labels) == len(centers) == len(instance_ids) == n):
        raise RejectedInputError(
            f"Length mismatch: points={n} labels={len(labels)} centers={len(centers)} ids={len(instance_ids)}")
    check_augmented_invariants(labels, centers, instance_ids)
    return AugmentedCloud(cloud[:, :4].copy(), labels, centers, instance_ids)
