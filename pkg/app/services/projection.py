"""
Projection Service
Rigid-transform algebra, pinhole cameras and the LiDAR-to-image chain
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.errors import RejectedInputError

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
DEFAULT_Z_MIN = 0.1


# ============== RIGID TRANSFORMS ==============

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform stored as a row-major 4x4 homogeneous matrix"""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise RejectedInputError(f"RigidTransform needs a 4x4 matrix, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation):
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m)

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        c, s = math.cos(yaw), math.sin(yaw)
        return cls.from_rt([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    @property
    def rotation(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    def is_finite(self):
        return bool(np.all(np.isfinite(self.matrix)))

    def is_valid(self, tol=ORTHO_TOL):
        if not self.is_finite():
            return False
        r = self.rotation
        ortho = np.max(np.abs(r.T @ r - np.eye(3)))
        return ortho <= tol and abs(np.linalg.det(r) - 1.0) <= tol and np.allclose(self.matrix[3], [0, 0, 0, 1])

    def validate(self, what="transform"):
        if not self.is_valid():
            raise RejectedInputError(f"{what} is not a valid rigid transform")
        return self

    def inverse(self):
        r_t = self.rotation.T
        return RigidTransform.from_rt(r_t, -r_t @ self.translation)

    def apply(self, points):
        return apply(self, points)

    def to_list(self):
        return self.matrix.tolist()


def orthonormalize(rotation):
    """Closest rotation matrix in the Frobenius sense"""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a·b, re-orthonormalized if the rotation drifted beyond tolerance"""
    m = a.matrix @ b.matrix
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
        m = m.copy()
        m[:3, :3] = orthonormalize(r)
    return RigidTransform(m)


def apply(t: RigidTransform, points) -> np.ndarray:
    """p' = R·p + t for a single 3-vector or an (N, 3) array"""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


# ============== CAMERAS ==============

@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the cam<-ego extrinsic"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise RejectedInputError("Camera focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise RejectedInputError("Camera image size must be at least 1x1")

    @property
    def intrinsic_matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_extrinsic(self, extrinsic):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsic)


@dataclass(frozen=True)
class CalibrationRig:
    """LiDAR mount plus the M surround cameras in ring order"""

    lidar_to_ego: RigidTransform
    cameras: Sequence[CameraModel]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 1:
            raise RejectedInputError("CalibrationRig needs at least one camera")

    @property
    def camera_count(self):
        return len(self.cameras)

    def validate(self):
        self.lidar_to_ego.validate("lidar_to_ego")
        for j, cam in enumerate(self.cameras):
            cam.extrinsic.validate(f"camera {j} extrinsic")
        return self


@dataclass(frozen=True)
class PixelHit:
    camera: int
    u: float
    v: float
    depth: float

    @property
    def pixel(self):
        return int(math.floor(self.u)), int(math.floor(self.v))


def look_extrinsic(yaw, position):
    """cam<-ego for a camera at `position` looking horizontally along `yaw`

    Camera frame: z forward, x right, y down.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    rotation = np.array([
        [s, -c, 0.0],     # right
        [0.0, 0.0, -1.0],  # down
        [c, s, 0.0],      # forward
    ])
    position = np.asarray(position, dtype=np.float64)
    return RigidTransform.from_rt(rotation, -rotation @ position)


def ring_rig(cameras=6, fov_deg=70.0, width=320, height=180, camera_radius=0.8,
             camera_height=1.6, lidar_height=1.8):
    """Surround rig in clockwise ring order (front, front-right, ...)

    Camera j looks along yaw -j*360/M, so the right border of camera j faces
    the left border of camera j+1.
    """
    fx = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for j in range(cameras):
        yaw = -2.0 * math.pi * j / cameras
        position = (camera_radius * math.cos(yaw), camera_radius * math.sin(yaw), camera_height)
        cams.append(CameraModel(fx, fx, width / 2.0, height / 2.0, width, height,
                                look_extrinsic(yaw, position)))
    lidar_to_ego = RigidTransform.from_rt(np.eye(3), (0.0, 0.0, lidar_height))
    return CalibrationRig(lidar_to_ego, cams)


# ============== PROJECTION ==============

def project_point(p_ego, cam: CameraModel, camera_index=0, z_min=DEFAULT_Z_MIN) -> Optional[PixelHit]:
    """Pinhole projection of one ego-frame point; None when outside the frustum"""
    x, y, z = apply(cam.extrinsic, p_ego)
    if z <= z_min:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return PixelHit(camera_index, float(u), float(v), float(z))


def back_project(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Inverse of project_point for a known depth; accepts scalars or arrays"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    p_cam = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=-1)
    return apply(cam.extrinsic.inverse(), p_cam)


@dataclass
class CloudHits:
    """Flat hit table sorted by (point index, camera)"""

    point_index: np.ndarray
    camera: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    point_count: int

    def __len__(self):
        return len(self.point_index)

    def for_point(self, i) -> List[PixelHit]:
        lo, hi = np.searchsorted(self.point_index, [i, i + 1])
        return [PixelHit(int(self.camera[k]), float(self.u[k]), float(self.v[k]), float(self.depth[k]))
                for k in range(lo, hi)]

    def hits_per_point(self):
        return np.bincount(self.point_index, minlength=self.point_count)

    def pixels(self):
        return np.floor(self.u).astype(np.int64), np.floor(self.v).astype(np.int64)


def project_camera(xyz, cam: CameraModel, z_min=DEFAULT_Z_MIN):
    """Vectorised projection into one camera: (indices, u, v, depth)"""
    p_cam = apply(cam.extrinsic, xyz)
    z = p_cam[:, 2]
    front = z > z_min
    idx = np.nonzero(front)[0]
    zf = z[idx]
    u = cam.fx * p_cam[idx, 0] / zf + cam.cx
    v = cam.fy * p_cam[idx, 1] / zf + cam.cy
    inside = (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return idx[inside], u[inside], v[inside], zf[inside]


def project_cloud(points, rig: CalibrationRig, z_min=DEFAULT_Z_MIN) -> CloudHits:
    """Project an ego-frame cloud into every camera of the rig"""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=np.float64)
        return CloudHits(empty_i, empty_i.copy(), empty_f, empty_f.copy(), empty_f.copy(), 0)

    xyz = pts[:, :3]
    parts = []
    for j, cam in enumerate(rig.cameras):
        idx, u, v, depth = project_camera(xyz, cam, z_min)
        parts.append((idx, np.full(len(idx), j, dtype=np.int64), u, v, depth))

    point_index = np.concatenate([p[0] for p in parts])
    camera = np.concatenate([p[1] for p in parts])
    order = np.lexsort((camera, point_index))
    hits = CloudHits(
        point_index=point_index[order].astype(np.int64),
        camera=camera[order],
        u=np.concatenate([p[2] for p in parts])[order],
        v=np.concatenate([p[3] for p in parts])[order],
        depth=np.concatenate([p[4] for p in parts])[order],
        point_count=n,
    )
    logger.debug(f"📦 Projected {n} points → {len(hits)} hits over {rig.camera_count} cameras")
    return hits
