"""Persistence package"""
from app.database.codecs import (
    atomic_write, atomic_write_json, read_json,
    read_cloud, write_cloud,
    read_augmented, write_augmented,
    read_pgm, write_pgm, read_mask, write_mask,
    read_calibration, write_calibration,
    read_priors, write_priors,
    read_gt, write_gt,
    write_features,
)
from app.database.fp_store import load_fp_database, save_fp_database

__all__ = [
    'atomic_write', 'atomic_write_json', 'read_json',
    'read_cloud', 'write_cloud',
    'read_augmented', 'write_augmented',
    'read_pgm', 'write_pgm', 'read_mask', 'write_mask',
    'read_calibration', 'write_calibration',
    'read_priors', 'write_priors',
    'read_gt', 'write_gt',
    'write_features',
    'load_fp_database', 'save_fp_database',
]
