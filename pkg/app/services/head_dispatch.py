"""
Head Dispatch Service
Multi-scale feature pyramid and the category → scale-aware head assignment
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from app.errors import RejectedInputError
from app.services.fp_augment import Box3D
from app.services.scene_model import LabelTable

logger = logging.getLogger(__name__)

DEFAULT_BASE_CELL = 0.2      # meters per base raster cell (pillar size)
DEFAULT_GROWTH = 10.0
DEFAULT_RANGE_MIN = (-51.2, -51.2)


@dataclass(frozen=True, eq=False)
class PyramidLevel:
    """One pyramid raster; axis 0 is x, axis 1 is y"""

    index: int
    stride: int
    dims: Tuple[int, int]
    receptive_field: float
    raster: np.ndarray = None

    def cell_size(self, base_cell=DEFAULT_BASE_CELL):
        return base_cell * self.stride


def build_pyramid(base_grid, levels=3, base_cell=DEFAULT_BASE_CELL,
                  growth=DEFAULT_GROWTH) -> List[PyramidLevel]:
    """2x average pooling per level over a 2D base raster"""
    raster = np.asarray(base_grid, dtype=np.float64)
    if raster.ndim != 2:
        raise RejectedInputError(f"base grid must be 2D, got shape {raster.shape}")
    if levels < 1:
        raise RejectedInputError(f"levels must be >= 1, got {levels}")
    factor = 2 ** (levels - 1)
    if raster.shape[0] % factor or raster.shape[1] % factor:
        raise RejectedInputError(
            f"base grid {raster.shape} is not divisible by 2^{levels - 1} = {factor}")

    pyramid = []
    for k in range(levels):
        if k > 0:
            h, w = raster.shape
            raster = raster.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        stride = 2 ** k
        pyramid.append(PyramidLevel(k, stride, raster.shape, stride * base_cell * growth, raster))
    logger.debug(f"📦 Built {levels}-level pyramid from a {pyramid[0].dims} base grid")
    return pyramid


def pyramid_levels(levels=3, base_dims=(512, 512), base_cell=DEFAULT_BASE_CELL,
                   growth=DEFAULT_GROWTH) -> List[PyramidLevel]:
    """Level metadata without rasters"""
    out = []
    for k in range(levels):
        stride = 2 ** k
        out.append(PyramidLevel(k, stride, (base_dims[0] // stride, base_dims[1] // stride),
                                stride * base_cell * growth))
    return out


# ============== DISPATCH TABLE ==============

@dataclass(frozen=True)
class DispatchTable:
    levels: Dict[int, int]    # label id → level index

    def level_of(self, label_id) -> int:
        if label_id not in self.levels:
            raise RejectedInputError(f"Label {label_id} has no dispatch level")
        return self.levels[label_id]

    def to_json(self):
        return {str(k): v for k, v in sorted(self.levels.items())}


def assign_category_scales(labels: LabelTable, levels: Sequence[PyramidLevel]) -> DispatchTable:
    """Smallest receptive field >= 2x the label's length; coarsest level otherwise"""
    if len(labels) == 0:
        raise RejectedInputError("label table is empty")
    if len(levels) == 0:
        raise RejectedInputError("need at least one pyramid level")
    ordered = sorted(levels, key=lambda lv: lv.receptive_field)
    coarsest = ordered[-1].index
    table = {}
    for entry in labels:
        table[entry.label_id] = next(
            (lv.index for lv in ordered if lv.receptive_field >= 2.0 * entry.length), coarsest)
    logger.debug(f"🔍 Dispatch table: {table}")
    return DispatchTable(table)


def single_level_table(labels: LabelTable, level=0) -> DispatchTable:
    """Every category on one head (the single-group baseline)"""
    return DispatchTable({e.label_id: level for e in labels})


def head_groups(table: DispatchTable) -> Dict[int, List[int]]:
    """level → sorted label ids it hosts"""
    groups: Dict[int, List[int]] = {}
    for label_id, level in sorted(table.levels.items()):
        groups.setdefault(level, []).append(label_id)
    return groups


# ============== TARGETS ==============

class DispatchTarget(NamedTuple):
    box_index: int
    label: int
    level: int
    cell: Tuple[int, int]


def dispatch_targets(boxes: Sequence[Box3D], table: DispatchTable, levels: Sequence[PyramidLevel],
                     range_min=DEFAULT_RANGE_MIN, base_cell=DEFAULT_BASE_CELL) -> List[List[DispatchTarget]]:
    """Route each box to its label's level and the raster cell holding its center"""
    by_index = {lv.index: lv for lv in levels}
    per_level: List[List[DispatchTarget]] = [[] for _ in range(max(by_index) + 1)] if by_index else []
    dropped = 0
    for i, box in enumerate(boxes):
        level = by_index[table.level_of(box.label)]
        size = level.cell_size(base_cell)
        ix = math.floor((box.center[0] - range_min[0]) / size)
        iy = math.floor((box.center[1] - range_min[1]) / size)
        if not (0 <= ix < level.dims[0] and 0 <= iy < level.dims[1]):
            dropped += 1
            continue
        per_level[level.index].append(DispatchTarget(i, box.label, level.index, (ix, iy)))
    if dropped:
        logger.debug(f"⚠️ Dropped {dropped} boxes outside the grid")
    return per_level
