"""
Projection Refiner Service
Cleans frustum-contaminated priors with density clustering and medoid centers
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from app.errors import RejectedInputError
from app.services.instance_painter import Instance3DPrior
from app.services.scene_model import LabelTable

logger = logging.getLogger(__name__)

NOISE = -1
BRUTE_FORCE_LIMIT = 2000   # above this the radius graph comes from a KD-tree
MEDOID_CHUNK = 1024


@dataclass(frozen=True)
class ClusterParams:
    eps: float
    min_pts: int = 4

    def __post_init__(self):
        if not self.eps > 0:
            raise RejectedInputError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise RejectedInputError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass(frozen=True, eq=False)
class Cluster:
    members: np.ndarray      # indices into the keyframe cloud
    medoid_index: int        # cloud index of the medoid
    count: int
    ego_distance: float

    @property
    def salience(self):
        return self.count / (1.0 + self.ego_distance)


def params_for_label(labels: LabelTable, label_id, min_pts=4, eps_scale=0.25,
                     eps_min=0.3, eps_max=1.5) -> ClusterParams:
    """eps from the label's characteristic length, clamped"""
    length = labels.get(label_id).length
    eps = float(np.clip(eps_scale * length, eps_min, eps_max))
    return ClusterParams(eps, int(min_pts))


# ============== DBSCAN ==============

def _radius_graph(xyz, eps):
    n = len(xyz)
    if n <= BRUTE_FORCE_LIMIT:
        adjacency = cdist(xyz, xyz) <= eps
        return csr_matrix(adjacency)
    tree = cKDTree(xyz)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    return csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))


def dbscan(points, params: ClusterParams) -> Tuple[np.ndarray, np.ndarray]:
    """Density clustering; returns (cluster label per point, noise flags)

    A point is core when at least min_pts points (itself included) lie within
    eps. A border point joins the cluster of its lowest-index core neighbour.
    Clusters are numbered 0.. in order of their smallest member index.
    """
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels, np.zeros(0, dtype=bool)

    graph = _radius_graph(xyz, params.eps)
    neighbour_counts = np.diff(graph.indptr)
    core = neighbour_counts >= params.min_pts
    core_idx = np.nonzero(core)[0]
    if len(core_idx) == 0:
        return labels, np.ones(n, dtype=bool)

    _, component = connected_components(graph[core_idx][:, core_idx], directed=False)
    labels[core_idx] = component

    border_idx = np.nonzero(~core)[0]
    border_rows = graph[border_idx][:, core_idx].tocsr()
    reached = np.diff(border_rows.indptr) > 0
    if np.any(reached):
        starts = border_rows.indptr[:-1][reached]
        lowest_core = np.minimum.reduceat(border_rows.indices, starts)
        labels[border_idx[reached]] = component[lowest_core]

    # renumber by smallest member index
    clustered = labels != NOISE
    _, first = np.unique(labels[clustered], return_index=True)
    old_ids = labels[clustered][np.sort(first)]
    remap = {int(old): new for new, old in enumerate(old_ids)}
    labels[clustered] = [remap[int(k)] for k in labels[clustered]]
    return labels, labels == NOISE


# ============== MEDOID ==============

def medoid(points) -> int:
    """Index minimising the summed distance to all members; ties → smallest index"""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise RejectedInputError("medoid of an empty point set")
    totals = np.empty(len(xyz))
    for start in range(0, len(xyz), MEDOID_CHUNK):
        totals[start:start + MEDOID_CHUNK] = cdist(xyz[start:start + MEDOID_CHUNK], xyz).sum(axis=1)
    return int(np.argmin(totals))


def select_salient(clusters: Sequence[Cluster]) -> Cluster:
    """Highest count/(1 + ego distance); ties → nearer, then smaller medoid index"""
    if len(clusters) == 0:
        raise RejectedInputError("select_salient needs at least one cluster")
    return min(clusters, key=lambda c: (-c.salience, c.ego_distance, c.medoid_index))


# ============== REFINEMENT ==============

def _cluster_of(members, xyz) -> Cluster:
    m = medoid(xyz[members])
    medoid_index = int(members[m])
    return Cluster(members, medoid_index, len(members), float(np.linalg.norm(xyz[medoid_index])))


def refine_instance(prior: Instance3DPrior, points, params: ClusterParams) -> Instance3DPrior:
    """Keep only the salient cluster of a prior and move its center to the medoid"""
    if len(prior.members) == 0:
        raise RejectedInputError(f"Prior {prior.instance_id} has no members")
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    members = np.sort(prior.members)
    labels, noise = dbscan(xyz[members], params)

    if np.all(noise):
        fallback = _cluster_of(members, xyz)
        logger.debug(f"⚠️ Prior {prior.instance_id}: all {len(members)} points are noise, keeping it")
        return replace(prior, members=members, center=xyz[fallback.medoid_index].copy(),
                       low_confidence=True, evicted=np.zeros(0, dtype=np.int64))

    clusters = [_cluster_of(members[labels == k], xyz) for k in range(int(labels.max()) + 1)]
    salient = select_salient(clusters)
    evicted = np.setdiff1d(members, salient.members)
    if len(evicted):
        logger.debug(f"🧹 Prior {prior.instance_id}: evicted {len(evicted)} of {len(members)} points")
    return replace(prior, members=salient.members, center=xyz[salient.medoid_index].copy(),
                   low_confidence=False, evicted=evicted)


@dataclass
class RefineResult:
    priors: List[Instance3DPrior]
    labels: np.ndarray
    centers: np.ndarray
    instance_ids: np.ndarray

    @property
    def evicted_count(self):
        return int(sum(len(p.evicted) for p in self.priors))


def scene_fields(priors: Sequence[Instance3DPrior], point_count, emit_centers=True):
    """Per-point (s, Cx, Cy, Cz, instance_id) from a list of priors"""
    labels = np.zeros(point_count, dtype=np.int32)
    centers = np.zeros((point_count, 3))
    instance_ids = np.zeros(point_count, dtype=np.int32)
    for prior in priors:
        labels[prior.members] = prior.label
        instance_ids[prior.members] = prior.instance_id
        if emit_centers:
            centers[prior.members] = prior.center
    return labels, centers, instance_ids


def refine_scene(priors: Sequence[Instance3DPrior], points, params, enabled=True,
                 emit_centers=True) -> RefineResult:
    """Refine every prior; params is a ClusterParams or a label → ClusterParams map"""
    xyz = np.asarray(points, dtype=np.float64)
    if enabled:
        refined = []
        for prior in priors:
            p = params[prior.label] if isinstance(params, dict) else params
            refined.append(refine_instance(prior, xyz, p))
    else:
        refined = list(priors)

    labels, centers, instance_ids = scene_fields(refined, len(xyz), emit_centers=emit_centers)
    result = RefineResult(refined, labels, centers, instance_ids)
    if enabled:
        low = sum(1 for p in refined if p.low_confidence)
        logger.info(f"✅ Refined {len(refined)} priors: {result.evicted_count} points evicted, "
                    f"{low} low-confidence")
    return result


def label_params(labels: LabelTable, min_pts=4, eps_scale=0.25, eps_min=0.3,
                 eps_max=1.5) -> Dict[int, ClusterParams]:
    return {e.label_id: params_for_label(labels, e.label_id, min_pts, eps_scale, eps_min, eps_max)
            for e in labels}
