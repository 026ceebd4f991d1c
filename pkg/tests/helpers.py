"""Builders shared by the test modules"""
import math

import numpy as np

from app.services.fp_augment import Box3D
from app.services.instance_painter import InstanceMask, InstanceRecord
from app.services.projection import CalibrationRig, CameraModel, RigidTransform, look_extrinsic

CAR = (4.6, 1.9, 1.7)


def forward_camera(width=100, height=100, focal=100.0, position=(0.0, 0.0, 0.0), yaw=0.0):
    """A camera at `position` looking along `yaw`; the image center sees the optical axis"""
    return CameraModel(focal, focal, width / 2.0, height / 2.0, width, height, look_extrinsic(yaw, position))


def single_camera_rig(**kwargs):
    return CalibrationRig(RigidTransform.identity(), [forward_camera(**kwargs)])


def block_mask(camera, shape, regions):
    """Mask with rectangular regions: {instance_id: (rows, cols, label, score)}"""
    raster = np.zeros(shape, dtype=np.uint16)
    records = {}
    for instance_id, (rows, cols, label, score) in regions.items():
        raster[rows, cols] = instance_id
        records[instance_id] = InstanceRecord(instance_id, label, score)
    return InstanceMask(camera, raster, records)


def car_at(azimuth_deg, distance, yaw=None, label=1):
    """A car on the ground, broadside to the ego unless `yaw` is given"""
    a = math.radians(azimuth_deg)
    yaw = a + math.pi / 2.0 if yaw is None else yaw
    return Box3D((distance * math.cos(a), distance * math.sin(a), CAR[2] / 2.0), CAR, yaw, label)
