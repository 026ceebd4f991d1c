"""
Metrics Service
Proxy metrics for the painting stage against per-point ground truth
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from app.errors import RejectedInputError
from app.services.fp_augment import Box3D
from app.services.instance_painter import Instance3DPrior
from app.services.scene_model import AugmentedCloud

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    label_accuracy: float
    center_mae: Optional[float]          # vs the observed (visible-point medoid) center
    box_center_mae: Optional[float]      # vs the geometric box center
    cluster_purity: float
    painted: int
    unpainted: int
    evicted: int
    priors: int
    matched: int
    low_confidence: int = 0
    vacuous: bool = False                # nothing painted; accuracy reported as 1.0
    extras: Dict[str, float] = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def _painted_labels(augmented):
    if isinstance(augmented, AugmentedCloud):
        return augmented.labels, augmented.painted
    labels = np.asarray(augmented)
    return labels, labels != 0


def label_accuracy(augmented, gt_labels, mask=None) -> float:
    """Correct painted labels over painted points; 1.0 when nothing is painted"""
    labels, painted = _painted_labels(augmented)
    gt_labels = np.asarray(gt_labels)
    if len(labels) != len(gt_labels):
        raise RejectedInputError(f"Length mismatch: {len(labels)} points vs {len(gt_labels)} GT labels")
    if mask is not None:
        painted = painted & np.asarray(mask, dtype=bool)
    total = int(np.count_nonzero(painted))
    if total == 0:
        return 1.0
    return float(np.count_nonzero(labels[painted] == gt_labels[painted]) / total)


def match_priors(priors: Sequence[Instance3DPrior], point_gt) -> Dict[int, int]:
    """prior position → GT box index

    A prior's owner is the box holding most of its members. When several
    priors share an owner, the one with the largest share keeps the match.
    """
    point_gt = np.asarray(point_gt)
    best: Dict[int, tuple] = {}
    for k, prior in enumerate(priors):
        owners = point_gt[prior.members]
        owners = owners[owners >= 0]
        if len(owners) == 0:
            continue
        boxes, counts = np.unique(owners, return_counts=True)
        top = int(np.argmax(counts))
        background = int(np.count_nonzero(point_gt[prior.members] < 0))
        if counts[top] <= background:
            continue
        box = int(boxes[top])
        if box not in best or counts[top] > best[box][1]:
            best[box] = (k, int(counts[top]))
    return {k: box for box, (k, _) in best.items()}


def center_error(priors: Sequence[Instance3DPrior], gt_boxes: Sequence[Box3D], point_gt,
                 reference=None) -> Optional[float]:
    """Mean distance from matched prior centers to their boxes; None when nothing matches

    `reference` optionally replaces the box centers (one row per box; NaN rows
    are skipped).
    """
    centers = np.asarray([b.center for b in gt_boxes], dtype=np.float64).reshape(-1, 3) \
        if reference is None else np.asarray(reference, dtype=np.float64)
    errors = []
    for k, box in match_priors(priors, point_gt).items():
        target = centers[box]
        if np.any(np.isnan(target)):
            continue
        errors.append(float(np.linalg.norm(priors[k].center - target)))
    if not errors:
        return None
    return float(np.mean(errors))


def cluster_purity(priors: Sequence[Instance3DPrior], point_gt) -> float:
    """Share of prior members that belong to their prior's majority owner"""
    point_gt = np.asarray(point_gt)
    majority = total = 0
    for prior in priors:
        if len(prior.members) == 0:
            continue
        _, counts = np.unique(point_gt[prior.members], return_counts=True)
        majority += int(counts.max())
        total += len(prior.members)
    return 1.0 if total == 0 else majority / total


def compute_metrics(augmented: AugmentedCloud, priors: Sequence[Instance3DPrior], gt_labels=None,
                    point_gt=None, gt_boxes=None, observed=None, evicted=0) -> Metrics:
    """Bundle every metric that the available ground truth supports"""
    painted = int(np.count_nonzero(augmented.painted))
    low = sum(1 for p in priors if p.low_confidence)
    accuracy = label_accuracy(augmented, gt_labels) if gt_labels is not None else 1.0
    mae = box_mae = None
    purity = 1.0
    matched = 0
    if point_gt is not None:
        purity = cluster_purity(priors, point_gt)
        matched = len(match_priors(priors, point_gt))
        if gt_boxes is not None:
            box_mae = center_error(priors, gt_boxes, point_gt)
            mae = center_error(priors, gt_boxes, point_gt, reference=observed) if observed is not None \
                else box_mae
    metrics = Metrics(accuracy, mae, box_mae, purity, painted, len(augmented) - painted,
                      int(evicted), len(priors), matched, low, vacuous=painted == 0)
    logger.info(f"📊 accuracy={metrics.label_accuracy:.4f} center_mae={metrics.center_mae} "
                f"purity={metrics.cluster_purity:.4f} painted={painted}")
    return metrics
