"""
On-disk formats
Point clouds, augmented points, instance masks, calibration, priors and GT sidecars.
All binary layouts are little-endian; every write goes to a temp file first and
is renamed into place.
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from app.errors import FormatError, RejectedInputError
from app.services.fp_augment import Box3D
from app.services.instance_painter import Instance3DPrior, InstanceMask, InstanceRecord
from app.services.projection import CalibrationRig, CameraModel, RigidTransform
from app.services.scene_model import AugmentedCloud, AugmentedPoint, as_cloud

logger = logging.getLogger(__name__)

AUGMENTED_DTYPE = np.dtype([("fields", "<f4", (8,)), ("instance_id", "<i4")])
PGM_MAXVAL = 65535


# ============== ATOMIC WRITES ==============

def atomic_write(path, data: bytes):
    """Write bytes to a sibling temp file and rename it over `path`"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except Exception as e:
        logger.error(f"❌ Failed to write {path}: {str(e)}")
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path, payload):
    return atomic_write(path, json.dumps(payload, indent=2, sort_keys=True).encode("utf-8"))


def read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{what} is not valid JSON: {e.msg}", path, e.pos)


# ============== POINT CLOUDS ==============

def read_cloud(path, field_count=5) -> np.ndarray:
    """(N, 5) float64 cloud from float32 rows of 4 or 5 fields"""
    if field_count not in (4, 5):
        raise RejectedInputError(f"field_count must be 4 or 5, got {field_count}")
    data = Path(path).read_bytes()
    row = 4 * field_count
    remainder = len(data) % row
    if remainder:
        raise FormatError(f"cloud size {len(data)} is not a multiple of {row} bytes", path,
                          len(data) - remainder)
    values = np.frombuffer(data, dtype="<f4")
    bad = np.nonzero(~np.isfinite(values))[0]
    if len(bad):
        raise FormatError("cloud holds a non-finite value", path, int(bad[0]) * 4)
    cloud = as_cloud(values.reshape(-1, field_count).astype(np.float64))
    logger.debug(f"📦 Read {len(cloud)} points from {path}")
    return cloud


def write_cloud(path, points, field_count=5):
    cloud = as_cloud(points)
    if field_count not in (4, 5):
        raise RejectedInputError(f"field_count must be 4 or 5, got {field_count}")
    return atomic_write(path, cloud[:, :field_count].astype("<f4").tobytes())


# ============== AUGMENTED POINTS ==============

def _augmented_columns(points):
    if isinstance(points, AugmentedCloud):
        return points.as_array(), points.instance_ids
    rows = [AugmentedPoint(*p) for p in points]
    if not rows:
        return np.zeros((0, 8)), np.zeros(0, dtype=np.int32)
    arr = np.asarray([r[:8] for r in rows], dtype=np.float64)
    return arr, np.asarray([r.instance_id for r in rows], dtype=np.int32)


def write_augmented(points, path):
    """36-byte records: (x, y, z, r, s, Cx, Cy, Cz) as float32 + int32 instance id"""
    fields, ids = _augmented_columns(points)
    records = np.zeros(len(fields), dtype=AUGMENTED_DTYPE)
    records["fields"] = fields
    records["instance_id"] = ids
    atomic_write(path, records.tobytes())
    logger.debug(f"📦 Wrote {len(records)} augmented points to {path}")
    return Path(path)


def read_augmented(path) -> AugmentedCloud:
    data = Path(path).read_bytes()
    remainder = len(data) % AUGMENTED_DTYPE.itemsize
    if remainder:
        raise FormatError(f"augmented file size {len(data)} is not a multiple of "
                          f"{AUGMENTED_DTYPE.itemsize} bytes", path, len(data) - remainder)
    records = np.frombuffer(data, dtype=AUGMENTED_DTYPE)
    fields = records["fields"].astype(np.float64)
    bad = np.nonzero(~np.isfinite(fields))
    if len(bad[0]):
        offset = int(bad[0][0]) * AUGMENTED_DTYPE.itemsize + int(bad[1][0]) * 4
        raise FormatError("augmented file holds a non-finite value", path, offset)
    return AugmentedCloud(fields[:, :4].copy(), fields[:, 4].astype(np.int32), fields[:, 5:8].copy(),
                          records["instance_id"].astype(np.int32))


# ============== MASKS ==============

def _pgm_header_tokens(data: bytes, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path, pos)
        tokens.append((data[start:pos], start))
    # exactly one whitespace byte separates the header from the samples
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _pgm_header_tokens(data, path)
    magic = tokens[0][0]
    if magic != b"P5":
        raise FormatError(f"expected binary PGM magic P5, got {magic!r}", path, 0)
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise FormatError("PGM header fields must be integers", path, tokens[1][1])
    if width < 1 or height < 1 or not 0 < maxval <= PGM_MAXVAL:
        raise FormatError(f"bad PGM geometry {width}x{height} maxval {maxval}", path, tokens[1][1])
    sample = ">u2" if maxval > 255 else "u1"
    expected = width * height * np.dtype(sample).itemsize
    body = data[offset:]
    if len(body) != expected:
        raise FormatError(f"PGM body holds {len(body)} bytes, expected {expected}", path,
                          offset + min(len(body), expected))
    return np.frombuffer(body, dtype=sample).reshape(height, width).astype(np.uint16)


def write_pgm(path, raster):
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise RejectedInputError("PGM raster must be 2D")
    height, width = raster.shape
    header = f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii")
    return atomic_write(path, header + raster.astype(">u2").tobytes())


def write_mask(mask: InstanceMask, raster_path, sidecar_path):
    write_pgm(raster_path, mask.raster)
    sidecar = {str(k): {"label": rec.label, "score": rec.score, "touches_left": rec.touches_left,
                        "touches_right": rec.touches_right}
               for k, rec in sorted(mask.records.items())}
    atomic_write_json(sidecar_path, sidecar)


def read_mask(raster_path, sidecar_path, camera) -> InstanceMask:
    raster = read_pgm(raster_path)
    sidecar = read_json(sidecar_path, "mask sidecar")
    if not isinstance(sidecar, dict):
        raise FormatError("mask sidecar must be a JSON object", sidecar_path, 0)
    try:
        records = {int(k): InstanceRecord(int(k), int(v["label"]), float(v["score"]),
                                          bool(v.get("touches_left", False)),
                                          bool(v.get("touches_right", False)))
                   for k, v in sidecar.items()}
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"mask sidecar entry is malformed: {e}", sidecar_path)
    return InstanceMask(camera, raster, records).validate()


# ============== CALIBRATION ==============

def calibration_to_json(rig: CalibrationRig):
    return {
        "lidar_to_ego": rig.lidar_to_ego.to_list(),
        "cameras": [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width,
                     "height": c.height, "extrinsic": c.extrinsic.to_list()} for c in rig.cameras],
    }


def calibration_from_json(payload) -> CalibrationRig:
    cameras = [CameraModel(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                           int(c["width"]), int(c["height"]), RigidTransform(c["extrinsic"]))
               for c in payload["cameras"]]
    return CalibrationRig(RigidTransform(payload["lidar_to_ego"]), cameras).validate()


def write_calibration(rig: CalibrationRig, path):
    return atomic_write_json(path, calibration_to_json(rig))


def read_calibration(path) -> CalibrationRig:
    payload = read_json(path, "calibration")
    try:
        return calibration_from_json(payload)
    except (KeyError, TypeError) as e:
        raise FormatError(f"calibration is missing a field: {e}", path)


# ============== PRIORS & GT ==============

def write_priors(priors: Sequence[Instance3DPrior], path):
    return atomic_write_json(path, [p.to_json() for p in priors])


def read_priors(path) -> List[Instance3DPrior]:
    return [Instance3DPrior.from_json(row) for row in read_json(path, "priors")]


def write_gt(prefix, boxes: Sequence[Box3D], point_gt):
    """<prefix>.json (boxes) + <prefix>.bin (int32 box index per point, -1 background)"""
    prefix = Path(prefix)
    atomic_write_json(prefix.with_suffix(".json"), {"boxes": [b.to_json() for b in boxes]})
    atomic_write(prefix.with_suffix(".bin"), np.asarray(point_gt, dtype="<i4").tobytes())


def read_gt(prefix) -> Tuple[List[Box3D], np.ndarray]:
    prefix = Path(prefix)
    payload = read_json(prefix.with_suffix(".json"), "GT sidecar")
    boxes = [Box3D.from_json(row) for row in payload["boxes"]]
    data = prefix.with_suffix(".bin").read_bytes()
    if len(data) % 4:
        raise FormatError("GT index file is not a multiple of 4 bytes", prefix.with_suffix(".bin"),
                          len(data) - len(data) % 4)
    point_gt = np.frombuffer(data, dtype="<i4").astype(np.int64)
    if len(point_gt) and (point_gt.min() < -1 or point_gt.max() >= len(boxes)):
        raise FormatError("GT index refers to a missing box", prefix.with_suffix(".bin"))
    return boxes, point_gt


def write_features(path, features):
    """Row-major float32 feature matrix"""
    return atomic_write(path, np.asarray(features, dtype="<f4").tobytes())
