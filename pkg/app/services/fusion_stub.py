"""
Fusion Stub Service
Pillar/voxel grid front-end and the cascaded channel-attention fusion

Training is out of scope: stage weights are seeded fixtures, and the analytic
backward pass exists so it can be checked against finite differences.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from app.errors import RejectedInputError
from app.services.scene_model import AugmentedCloud

logger = logging.getLogger(__name__)


# ============== GRIDS ==============

@dataclass(frozen=True)
class GridConfig:
    range_min: Tuple[float, float, float]
    range_max: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]

    def __post_init__(self):
        lo, hi, size = (np.asarray(v, dtype=np.float64) for v in
                        (self.range_min, self.range_max, self.voxel_size))
        if lo.shape != (3,) or hi.shape != (3,) or size.shape != (3,):
            raise RejectedInputError("GridConfig needs three values per field")
        if np.any(hi <= lo):
            raise RejectedInputError("GridConfig range max must exceed min on every axis")
        if np.any(size <= 0):
            raise RejectedInputError("GridConfig voxel sizes must be positive")

    @property
    def dims(self) -> Tuple[int, int, int]:
        extent = (np.asarray(self.range_max) - np.asarray(self.range_min)) / np.asarray(self.voxel_size)
        # rounding keeps 102.4 / 0.2 from landing on 512.0000000001
        return tuple(int(d) for d in np.ceil(np.round(extent, 6)))


POINTPILLARS_GRID = GridConfig((-51.2, -51.2, -5.0), (51.2, 51.2, 3.0), (0.2, 0.2, 8.0))
VOXELNET_GRID = GridConfig((-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.075, 0.075, 0.075))
GRID_PRESETS = {"pointpillars": POINTPILLARS_GRID, "voxelnet": VOXELNET_GRID}


def _xyz(points):
    if isinstance(points, AugmentedCloud):
        return points.points[:, :3]
    return np.asarray(points, dtype=np.float64).reshape(len(points), -1)[:, :3]


def voxel_coords(points, grid: GridConfig):
    """(point indices kept, integer voxel coords) for in-range points"""
    xyz = _xyz(points)
    lo = np.asarray(grid.range_min)
    hi = np.asarray(grid.range_max)
    coords = np.floor((xyz - lo) / np.asarray(grid.voxel_size)).astype(np.int64)
    dims = np.asarray(grid.dims)
    keep = np.all((xyz >= lo) & (xyz < hi) & (coords >= 0) & (coords < dims), axis=1)
    return np.nonzero(keep)[0], coords[keep]


def pillarize(points, grid: GridConfig) -> Dict[Tuple[int, int, int], np.ndarray]:
    """Map each occupied cell index to its member point indices"""
    kept, coords = voxel_coords(points, grid)
    if len(kept) == 0:
        return {}
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    cells = {tuple(int(c) for c in uniq[i]): kept[order[bounds[i]:bounds[i + 1]]]
             for i in range(len(uniq))}
    logger.debug(f"📦 Pillarized {len(kept)} in-range points into {len(cells)} cells")
    return cells


# ============== ATTENTION ==============

def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class AttentionStage:
    """in → hidden (ReLU) → one logit per block, squashed by the logistic"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.shape[1] != self.b1.shape[0] or self.w1.shape[1] != self.w2.shape[0] \
                or self.w2.shape[1] != self.b2.shape[0]:
            raise RejectedInputError("AttentionStage weight shapes do not chain")
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise RejectedInputError(f"AttentionStage {name} has non-finite entries")

    @classmethod
    def random(cls, in_dim, n_blocks, hidden=16, scale=0.1, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            rng.uniform(-scale, scale, size=(in_dim, hidden)),
            rng.uniform(-scale, scale, size=hidden),
            rng.uniform(-scale, scale, size=(hidden, n_blocks)),
            rng.uniform(-scale, scale, size=n_blocks),
        )

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def n_blocks(self):
        return self.w2.shape[1]

    def flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        parts, offset = [], 0
        for shape in (self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape):
            size = int(np.prod(shape))
            parts.append(vector[offset:offset + size].reshape(shape))
            offset += size
        return AttentionStage(*parts)


@dataclass
class StageGrad:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


def _check_blocks(blocks: Sequence[np.ndarray]):
    if len(blocks) == 0:
        raise RejectedInputError("attention needs at least one channel block")
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    n = blocks[0].shape[0]
    for b in blocks:
        if b.ndim != 2 or b.shape[0] != n:
            raise RejectedInputError("channel blocks must be 2D with the same point count")
    return blocks


def _pad(block, width):
    if block.shape[1] == width:
        return block
    out = np.zeros((block.shape[0], width))
    out[:, :block.shape[1]] = block
    return out


def _forward(blocks, stage: AttentionStage):
    blocks = _check_blocks(blocks)
    x = np.hstack(blocks)
    if x.shape[1] != stage.in_dim:
        raise RejectedInputError(f"stage expects {stage.in_dim} input channels, got {x.shape[1]}")
    if len(blocks) != stage.n_blocks:
        raise RejectedInputError(f"stage expects {stage.n_blocks} blocks, got {len(blocks)}")
    width = max(b.shape[1] for b in blocks)
    padded = [_pad(b, width) for b in blocks]
    h_pre = x @ stage.w1 + stage.b1
    h = np.maximum(h_pre, 0.0)
    logits = h @ stage.w2 + stage.b2
    mask = _logistic(logits)
    out = np.zeros((x.shape[0], width))
    for k, p in enumerate(padded):
        out += mask[:, k:k + 1] * p
    cache = {"blocks": blocks, "x": x, "padded": padded, "h_pre": h_pre, "h": h, "mask": mask}
    return out, mask, cache


def attention_forward(blocks: Sequence[np.ndarray], stage: AttentionStage):
    """Weighted sum of zero-padded blocks; returns (output, per-point mask)"""
    out, mask, _ = _forward(blocks, stage)
    return out, mask


def attention_backward(blocks: Sequence[np.ndarray], stage: AttentionStage, grad_output):
    """Gradients of sum(grad_output * output) w.r.t. stage weights and blocks"""
    _, mask, cache = _forward(blocks, stage)
    g = np.asarray(grad_output, dtype=np.float64)
    padded = cache["padded"]

    d_mask = np.stack([np.sum(g * p, axis=1) for p in padded], axis=1)
    d_logits = d_mask * mask * (1.0 - mask)
    d_w2 = cache["h"].T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_h = d_logits @ stage.w2.T
    d_h_pre = d_h * (cache["h_pre"] > 0.0)
    d_w1 = cache["x"].T @ d_h_pre
    d_b1 = d_h_pre.sum(axis=0)
    d_x = d_h_pre @ stage.w1.T

    block_grads = []
    offset = 0
    for k, block in enumerate(cache["blocks"]):
        width = block.shape[1]
        grad = d_x[:, offset:offset + width] + mask[:, k:k + 1] * g[:, :width]
        block_grads.append(grad)
        offset += width
    return StageGrad(d_w1, d_b1, d_w2, d_b2), block_grads


# ============== CASCADE ==============

@dataclass
class FusedFeature:
    features: np.ndarray           # (N, channel width + 4)
    masks: List[np.ndarray]        # per-stage (N, blocks) masks

    @property
    def channel_dim(self):
        return self.features.shape[1] - 4


def init_stages(block_widths: Sequence[int], count=2, hidden=16, scale=0.1, seed=0) -> List[AttentionStage]:
    """Seeded stages; stage k > 1 also sees the previous stage's output"""
    if count < 1:
        raise RejectedInputError("cascade needs at least one stage")
    width = max(block_widths)
    stages = []
    for k in range(count):
        extra = 0 if k == 0 else width
        extra_blocks = 0 if k == 0 else 1
        stages.append(AttentionStage.random(sum(block_widths) + extra, len(block_widths) + extra_blocks,
                                            hidden=hidden, scale=scale, seed=seed + k))
    return stages


def cascaded_fuse(blocks: Sequence[np.ndarray], stages: Sequence[AttentionStage], raw=None) -> FusedFeature:
    """Run the stages in sequence and concatenate the raw (x, y, z, r) skip"""
    if len(stages) < 1:
        raise RejectedInputError("cascaded_fuse needs at least one stage")
    blocks = _check_blocks(blocks)
    raw = blocks[0][:, :4] if raw is None else np.asarray(raw, dtype=np.float64)
    masks = []
    out, mask = attention_forward(blocks, stages[0])
    masks.append(mask)
    for stage in stages[1:]:
        out, mask = attention_forward(list(blocks) + [out], stage)
        masks.append(mask)
    return FusedFeature(np.hstack([out, raw]), masks)


def cascaded_backward(blocks: Sequence[np.ndarray], stages: Sequence[AttentionStage], grad_features):
    """Per-stage weight gradients of sum(grad_features * fused features)"""
    blocks = _check_blocks(blocks)
    outputs = []
    out, _ = attention_forward(blocks, stages[0])
    outputs.append(out)
    for stage in stages[1:]:
        out, _ = attention_forward(list(blocks) + [out], stage)
        outputs.append(out)

    g = np.asarray(grad_features, dtype=np.float64)[:, :outputs[-1].shape[1]]
    grads: List[StageGrad] = [None] * len(stages)
    for k in range(len(stages) - 1, -1, -1):
        inputs = list(blocks) if k == 0 else list(blocks) + [outputs[k - 1]]
        grads[k], block_grads = attention_backward(inputs, stages[k], g)
        if k > 0:
            g = block_grads[-1]
    return grads


def numerical_gradient(fn: Callable[[np.ndarray], float], params, h=1e-5) -> np.ndarray:
    """Central differences of a scalar function over a flat parameter vector"""
    if not h > 0:
        raise RejectedInputError("finite-difference step must be positive")
    theta = np.array(params, dtype=np.float64, copy=True).reshape(-1)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        saved = theta[i]
        theta[i] = saved + h
        plus = fn(theta.copy())
        theta[i] = saved - h
        minus = fn(theta.copy())
        theta[i] = saved
        grad[i] = (plus - minus) / (2.0 * h)
    return grad


# ============== CHANNEL BLOCKS ==============

def build_channel_blocks(cloud: AugmentedCloud, num_labels: int) -> List[np.ndarray]:
    """raw (x, y, z, r), semantic one-hot (label 0 included), center offset C − p"""
    n = len(cloud)
    raw = cloud.points[:, :4].astype(np.float64)
    if np.any(cloud.labels < 0) or np.any(cloud.labels > num_labels):
        raise RejectedInputError(f"labels must lie in [0, {num_labels}]")
    onehot = np.zeros((n, num_labels + 1))
    onehot[np.arange(n), cloud.labels] = 1.0
    offset = np.where(cloud.painted[:, None], cloud.centers - raw[:, :3], 0.0)
    return [raw, onehot, offset]
