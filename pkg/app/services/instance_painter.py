"""
Instance Painter Service
Associates projected points with 2D instance masks and builds 3D instance priors
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from app.errors import RejectedInputError
from app.services.projection import DEFAULT_Z_MIN, CalibrationRig, CloudHits, project_cloud

logger = logging.getLogger(__name__)

DEFAULT_MERGE_GAP = 0.5

GroupKey = Tuple[int, int]   # (camera index, 2D instance id)


class InstanceRecord(NamedTuple):
    instance_id: int
    label: int
    score: float
    touches_left: bool = False
    touches_right: bool = False


@dataclass
class InstanceMask:
    """Per-camera instance-id raster; 0 is background"""

    camera: int
    raster: np.ndarray
    records: Dict[int, InstanceRecord]

    def __post_init__(self):
        self.raster = np.asarray(self.raster)
        if self.raster.ndim != 2:
            raise RejectedInputError(f"Mask raster for camera {self.camera} must be 2D")
        if self.raster.dtype != np.uint16:
            if self.raster.size and (self.raster.min() < 0 or self.raster.max() > 0xFFFF):
                raise RejectedInputError("Mask raster values must fit in 16 bits")
            self.raster = self.raster.astype(np.uint16)
        records = {}
        for key, rec in self.records.items():
            if isinstance(rec, dict):
                rec = InstanceRecord(int(key), int(rec["label"]), float(rec["score"]),
                                     bool(rec.get("touches_left", False)),
                                     bool(rec.get("touches_right", False)))
            records[int(key)] = rec
        self.records = records

    @property
    def height(self):
        return self.raster.shape[0]

    @property
    def width(self):
        return self.raster.shape[1]

    def validate(self):
        present = np.unique(self.raster)
        missing = [int(i) for i in present if i != 0 and int(i) not in self.records]
        if missing:
            raise RejectedInputError(
                f"Camera {self.camera}: raster ids {missing} have no instance record")
        for rec in self.records.values():
            if not 0.0 <= rec.score <= 1.0:
                raise RejectedInputError(
                    f"Camera {self.camera}: instance {rec.instance_id} score {rec.score} outside [0, 1]")
            if rec.label < 1:
                raise RejectedInputError(
                    f"Camera {self.camera}: instance {rec.instance_id} has label {rec.label}")
        return self

    @classmethod
    def empty(cls, camera, width, height):
        return cls(camera, np.zeros((height, width), dtype=np.uint16), {})


@dataclass
class Candidates:
    """Flat (point, camera, 2D id, label, score) table from association"""

    point_index: np.ndarray
    camera: np.ndarray
    mask_id: np.ndarray
    label: np.ndarray
    score: np.ndarray
    point_count: int

    def __len__(self):
        return len(self.point_index)

    def for_point(self, i):
        sel = self.point_index == i
        return list(zip(self.camera[sel].tolist(), self.mask_id[sel].tolist(),
                        self.label[sel].tolist(), self.score[sel].tolist()))


@dataclass
class Association:
    groups: Dict[GroupKey, np.ndarray]
    candidates: Candidates


@dataclass
class Resolution:
    """Winning candidate per point; camera -1 / mask_id 0 when unpainted"""

    label: np.ndarray
    score: np.ndarray
    camera: np.ndarray
    mask_id: np.ndarray

    def groups(self) -> Dict[GroupKey, np.ndarray]:
        painted = np.nonzero(self.mask_id != 0)[0]
        if len(painted) == 0:
            return {}
        keys = np.stack([self.camera[painted], self.mask_id[painted].astype(np.int64)], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
        return {(int(k[0]), int(k[1])): painted[order[bounds[i]:bounds[i + 1]]]
                for i, k in enumerate(uniq)}


@dataclass
class MergedGroup:
    keys: List[GroupKey]
    members: np.ndarray
    label: int
    score: float


@dataclass
class Instance3DPrior:
    instance_id: int
    label: int
    score: float
    members: np.ndarray
    center: np.ndarray
    low_confidence: bool = False
    evicted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.int64)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.evicted = np.asarray(self.evicted, dtype=np.int64)

    def validate(self):
        if len(self.members) == 0:
            raise RejectedInputError(f"Prior {self.instance_id} has no members")
        if len(np.unique(self.members)) != len(self.members):
            raise RejectedInputError(f"Prior {self.instance_id} has duplicate members")
        if self.label < 1:
            raise RejectedInputError(f"Prior {self.instance_id} has label {self.label}")
        return self

    def to_json(self):
        return {
            "instance_id": int(self.instance_id),
            "label": int(self.label),
            "score": float(self.score),
            "members": self.members.tolist(),
            "center": self.center.tolist(),
            "low_confidence": bool(self.low_confidence),
            "evicted": self.evicted.tolist(),
        }

    @classmethod
    def from_json(cls, row):
        return cls(row["instance_id"], row["label"], row["score"], row["members"], row["center"],
                   row.get("low_confidence", False), row.get("evicted", []))


@dataclass
class PaintResult:
    priors: List[Instance3DPrior]
    labels: np.ndarray          # per point, 0 when unpainted
    instance_ids: np.ndarray    # per point, 0 when unpainted
    resolution: Resolution


# ============== ASSOCIATION ==============

def _masks_by_camera(masks: Sequence[InstanceMask]) -> Dict[int, InstanceMask]:
    by_camera = {}
    for mask in masks:
        if mask.camera in by_camera:
            raise RejectedInputError(f"Duplicate mask for camera {mask.camera}")
        by_camera[mask.camera] = mask
    return by_camera


def associate(points, hits: CloudHits, masks: Sequence[InstanceMask]) -> Association:
    """Group points by the (camera, 2D instance) their hits land on"""
    by_camera = _masks_by_camera(masks)
    cams_hit = np.unique(hits.camera)
    missing = [int(c) for c in cams_hit if int(c) not in by_camera]
    if missing:
        raise RejectedInputError(f"No instance mask for cameras {missing}")

    cols, rows = hits.pixels()
    parts = []
    for cam in cams_hit.tolist():
        mask = by_camera[cam].validate()
        sel = np.nonzero(hits.camera == cam)[0]
        r, c = rows[sel], cols[sel]
        inside = (r >= 0) & (r < mask.height) & (c >= 0) & (c < mask.width)
        sel, r, c = sel[inside], r[inside], c[inside]
        ids = mask.raster[r, c].astype(np.int64)
        on = ids != 0
        sel, ids = sel[on], ids[on]
        if len(sel) == 0:
            continue
        label_of = {k: rec.label for k, rec in mask.records.items()}
        score_of = {k: rec.score for k, rec in mask.records.items()}
        uniq, inv = np.unique(ids, return_inverse=True)
        parts.append((
            hits.point_index[sel],
            np.full(len(sel), cam, dtype=np.int64),
            ids,
            np.array([label_of[int(k)] for k in uniq], dtype=np.int64)[inv],
            np.array([score_of[int(k)] for k in uniq], dtype=np.float64)[inv],
        ))

    if parts:
        cand = Candidates(*(np.concatenate([p[i] for p in parts]) for i in range(5)),
                          point_count=hits.point_count)
    else:
        z_i = np.zeros(0, dtype=np.int64)
        cand = Candidates(z_i, z_i.copy(), z_i.copy(), z_i.copy(), np.zeros(0), hits.point_count)

    groups: Dict[GroupKey, np.ndarray] = {}
    if len(cand):
        order = np.lexsort((cand.point_index, cand.mask_id, cand.camera))
        keys = np.stack([cand.camera[order], cand.mask_id[order]], axis=1)
        uniq, first = np.unique(keys, axis=0, return_index=True)
        bounds = np.append(first, len(order))
        for i, k in enumerate(uniq):
            groups[(int(k[0]), int(k[1]))] = cand.point_index[order[bounds[i]:bounds[i + 1]]]

    logger.debug(f"📦 Associated {len(cand)} candidates into {len(groups)} groups")
    return Association(groups, cand)


def resolve_conflicts(candidates: Candidates) -> Resolution:
    """Keep the highest-score candidate per point; ties go to the lower camera index"""
    n = candidates.point_count
    label = np.zeros(n, dtype=np.int64)
    score = np.zeros(n, dtype=np.float64)
    camera = np.full(n, -1, dtype=np.int64)
    mask_id = np.zeros(n, dtype=np.int64)
    if len(candidates):
        order = np.lexsort((candidates.camera, -candidates.score, candidates.point_index))
        pts = candidates.point_index[order]
        _, first = np.unique(pts, return_index=True)
        win = order[first]
        idx = candidates.point_index[win]
        label[idx] = candidates.label[win]
        score[idx] = candidates.score[win]
        camera[idx] = candidates.camera[win]
        mask_id[idx] = candidates.mask_id[win]
    return Resolution(label, score, camera, mask_id)


# ============== TRUNCATION MERGE ==============

class _UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}

    def find(self, k):
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # the smaller key stays root for determinism
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def point_set_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum Euclidean distance between two 3D point sets"""
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    if len(a) < len(b):
        a, b = b, a
    dist, _ = cKDTree(a).query(b, k=1)
    return float(np.min(dist))


def merge_truncated(groups: Dict[GroupKey, np.ndarray], masks: Sequence[InstanceMask], points,
                    merge_gap=DEFAULT_MERGE_GAP, camera_count=None) -> List[MergedGroup]:
    """Merge fragments of one object cut by the seam between adjacent cameras

    Two groups of cameras j and j+1 (ring order) merge when they share a
    label, their point sets come within merge_gap meters, and both touch the
    shared border: the group of j its right border and the group of j+1 its
    left border.
    """
    by_camera = _masks_by_camera(masks)
    xyz = np.asarray(points, dtype=np.float64)[:, :3] if len(groups) else None
    if camera_count is None:
        camera_count = (max(by_camera) + 1) if by_camera else 0

    def record(key) -> InstanceRecord:
        return by_camera[key[0]].records[key[1]]

    uf = _UnionFind(sorted(groups))
    if camera_count >= 2:
        for j in range(camera_count):
            nxt = (j + 1) % camera_count
            if nxt == j:
                continue
            right = [k for k in groups if k[0] == j]
            left = [k for k in groups if k[0] == nxt]
            for a in right:
                for b in left:
                    if record(a).label != record(b).label:
                        continue
                    if not (record(a).touches_right and record(b).touches_left):
                        continue
                    gap = point_set_gap(xyz[groups[a]], xyz[groups[b]])
                    if gap < merge_gap:
                        logger.debug(f"🔗 Merging {a} and {b} across seam (gap {gap:.3f} m)")
                        uf.union(a, b)

    clusters: Dict[GroupKey, List[GroupKey]] = {}
    for key in sorted(groups):
        clusters.setdefault(uf.find(key), []).append(key)

    merged = []
    for keys in clusters.values():
        members = np.unique(np.concatenate([groups[k] for k in keys]))
        merged.append(MergedGroup(
            keys=keys,
            members=members,
            label=record(keys[0]).label,
            score=max(record(k).score for k in keys),
        ))
    merged.sort(key=lambda g: int(g.members[0]))
    return merged


# ============== SCENE PAINTING ==============

def paint_scene(points, rig: CalibrationRig, masks: Sequence[InstanceMask],
                z_min=DEFAULT_Z_MIN, merge_gap=DEFAULT_MERGE_GAP) -> PaintResult:
    """associate → resolve_conflicts → merge_truncated, then number the priors"""
    xyz = np.asarray(points, dtype=np.float64)
    n = len(xyz)
    logger.info(f"🎨 Painting {n} points with {len(masks)} instance masks")

    hits = project_cloud(xyz, rig, z_min=z_min)
    association = associate(xyz, hits, masks)
    resolution = resolve_conflicts(association.candidates)
    merged = merge_truncated(resolution.groups(), masks, xyz, merge_gap=merge_gap,
                             camera_count=rig.camera_count)

    labels = np.zeros(n, dtype=np.int32)
    instance_ids = np.zeros(n, dtype=np.int32)
    priors = []
    for instance_id, group in enumerate(merged, start=1):
        members = group.members
        center = xyz[members, :3].mean(axis=0)
        priors.append(Instance3DPrior(instance_id, group.label, group.score, members, center))
        labels[members] = group.label
        instance_ids[members] = instance_id

    logger.info(f"✅ Painted {int(np.count_nonzero(instance_ids))} points into {len(priors)} priors")
    return PaintResult(priors, labels, instance_ids, resolution)
