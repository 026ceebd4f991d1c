"""
False-positive database store
One directory: index.json plus points.bin (float32 x, y, z, r rows in box frames)
"""
import logging
from pathlib import Path

import numpy as np

from app.database.codecs import atomic_write, atomic_write_json, read_json
from app.errors import FormatError
from app.services.fp_augment import Box3D, FpDatabase, FpRecord

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
POINTS_FILE = "points.bin"
FORMAT_VERSION = 1


def save_fp_database(db: FpDatabase, directory):
    """Persist every record; offsets count point rows into points.bin"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for record in db:
        index.append({"box": record.box.to_json(), "scene_id": record.scene_id,
                      "point_count": len(record), "offset": offset})
        chunks.append(record.points.astype("<f4"))
        offset += len(record)
    blob = np.vstack(chunks).tobytes() if chunks else b""
    atomic_write(directory / POINTS_FILE, blob)
    atomic_write_json(directory / INDEX_FILE, {"version": FORMAT_VERSION, "records": index})
    logger.info(f"✅ Saved FP database to {directory}: {len(index)} records, {offset} points")
    return directory


def load_fp_database(directory) -> FpDatabase:
    directory = Path(directory)
    logger.info(f"🔍 Loading FP database from {directory}")
    index = read_json(directory / INDEX_FILE, "FP index")
    if index.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported FP database version {index.get('version')}", directory / INDEX_FILE)
    data = (directory / POINTS_FILE).read_bytes()
    if len(data) % 16:
        raise FormatError("points.bin is not a multiple of 16 bytes", directory / POINTS_FILE,
                          len(data) - len(data) % 16)
    points = np.frombuffer(data, dtype="<f4").reshape(-1, 4)

    db = FpDatabase()
    for row in index["records"]:
        start, count = int(row["offset"]), int(row["point_count"])
        if start < 0 or start + count > len(points):
            raise FormatError(f"record range [{start}, {start + count}) exceeds points.bin",
                              directory / POINTS_FILE, (start + count) * 16)
        db.add(FpRecord(points[start:start + count].copy(), Box3D.from_json(row["box"]),
                        row.get("scene_id", "")))
    logger.info(f"✅ Loaded {len(db)} FP records")
    return db
