"""Association, conflict resolution, seam merging and scene painting"""
import numpy as np
import pytest

from app.errors import RejectedInputError
from app.services.instance_painter import (Candidates, Instance3DPrior, InstanceMask, InstanceRecord, associate,
                                           merge_truncated, paint_scene, point_set_gap, resolve_conflicts)
from app.services.projection import CalibrationRig, RigidTransform, project_cloud
from app.services.synth import visible_mask
from tests.helpers import block_mask, forward_camera, single_camera_rig

CENTER = (slice(40, 60), slice(40, 60))


def twin_rig():
    """Two identical cameras: every point they see is seen by both"""
    cam = forward_camera()
    return CalibrationRig(RigidTransform.identity(), [cam, cam])


def points_near_axis(rng, n=20, depth=10.0):
    # within +-0.8 m of the axis at 10 m stays inside pixels 42..58
    return np.column_stack([np.full(n, depth), rng.uniform(-0.8, 0.8, size=n), rng.uniform(-0.8, 0.8, size=n)])


class TestInstanceMask:
    def test_raster_id_without_record_is_rejected(self):
        raster = np.zeros((4, 4), dtype=np.uint16)
        raster[1, 1] = 7
        with pytest.raises(RejectedInputError):
            InstanceMask(0, raster, {}).validate()

    def test_score_outside_unit_interval_is_rejected(self):
        mask = block_mask(0, (10, 10), {1: (slice(0, 2), slice(0, 2), 1, 1.5)})
        with pytest.raises(RejectedInputError):
            mask.validate()

    def test_records_accept_sidecar_dicts(self):
        mask = InstanceMask(0, np.zeros((2, 2)), {"3": {"label": 2, "score": 0.4, "touches_left": True}})
        assert mask.records[3] == InstanceRecord(3, 2, 0.4, True, False)
        assert mask.raster.dtype == np.uint16


class TestAssociate:
    def test_points_land_on_their_region(self, rng):
        pts = points_near_axis(rng)
        pts = np.vstack([pts, [[10.0, 4.0, 0.0]]])   # left of the region, background
        rig = single_camera_rig()
        mask = block_mask(0, (100, 100), {1: (*CENTER, 3, 0.9)})
        result = associate(pts, project_cloud(pts, rig), [mask])
        assert list(result.groups) == [(0, 1)]
        assert result.groups[(0, 1)].tolist() == list(range(20))
        assert set(result.candidates.label.tolist()) == {3}

    def test_missing_mask_for_a_hit_camera(self, rng):
        pts = points_near_axis(rng)
        with pytest.raises(RejectedInputError):
            associate(pts, project_cloud(pts, twin_rig()), [InstanceMask.empty(0, 100, 100)])

    def test_duplicate_masks_rejected(self, rng):
        pts = points_near_axis(rng)
        masks = [InstanceMask.empty(0, 100, 100), InstanceMask.empty(0, 100, 100)]
        with pytest.raises(RejectedInputError):
            associate(pts, project_cloud(pts, single_camera_rig()), masks)

    def test_no_hits_means_no_candidates(self):
        pts = np.array([[-10.0, 0.0, 0.0]])
        result = associate(pts, project_cloud(pts, single_camera_rig()), [InstanceMask.empty(0, 100, 100)])
        assert result.groups == {} and len(result.candidates) == 0


class TestResolveConflicts:
    def test_higher_score_wins(self):
        cand = Candidates(np.array([0, 0]), np.array([0, 1]), np.array([1, 1]), np.array([2, 3]),
                          np.array([0.7, 0.9]), point_count=1)
        res = resolve_conflicts(cand)
        assert res.label.tolist() == [3] and res.camera.tolist() == [1]

    def test_tie_goes_to_lower_camera(self):
        cand = Candidates(np.array([0, 0]), np.array([2, 1]), np.array([5, 4]), np.array([2, 3]),
                          np.array([0.8, 0.8]), point_count=1)
        res = resolve_conflicts(cand)
        assert res.camera.tolist() == [1] and res.label.tolist() == [3]

    def test_points_without_candidates_stay_unpainted(self):
        cand = Candidates(np.array([1]), np.array([0]), np.array([1]), np.array([2]), np.array([0.5]),
                          point_count=3)
        res = resolve_conflicts(cand)
        assert res.label.tolist() == [0, 2, 0]
        assert res.mask_id.tolist() == [0, 1, 0]
        assert res.camera.tolist() == [-1, 0, -1]

    def test_overlapping_masks_keep_the_confident_label(self):
        """Across seeds, the 0.9 mask always beats the 0.7 mask on the shared points"""
        rig = twin_rig()
        for seed in range(50):
            rng = np.random.default_rng(seed)
            pts = points_near_axis(rng, n=30)
            confident = int(rng.integers(2))
            scores = [0.7, 0.7]
            scores[confident] = 0.9
            masks = [block_mask(j, (100, 100), {1: (*CENTER, 2 + j, scores[j])}) for j in range(2)]
            result = paint_scene(pts, rig, masks)
            assert set(result.labels.tolist()) == {2 + confident}
            assert len(result.priors) == 1
            assert result.priors[0].score == pytest.approx(0.9)


class TestMergeTruncated:
    def _masks(self, touches_right=True, touches_left=True, labels=(1, 1)):
        left = InstanceMask(0, np.zeros((2, 2)), {1: InstanceRecord(1, labels[0], 0.8, False, touches_right)})
        right = InstanceMask(1, np.zeros((2, 2)), {1: InstanceRecord(1, labels[1], 0.6, touches_left, False)})
        return [left, right]

    def _points(self, gap):
        a = np.column_stack([np.linspace(0.0, 1.0, 10), np.zeros(10), np.zeros(10)])
        b = a + [1.0 + gap, 0.0, 0.0]
        return np.vstack([a, b])

    def _groups(self):
        return {(0, 1): np.arange(10), (1, 1): np.arange(10, 20)}

    def test_fragments_across_the_seam_merge(self):
        merged = merge_truncated(self._groups(), self._masks(), self._points(0.2), merge_gap=0.5)
        assert len(merged) == 1
        assert merged[0].members.tolist() == list(range(20))
        assert merged[0].score == pytest.approx(0.8)
        assert merged[0].keys == [(0, 1), (1, 1)]

    @pytest.mark.parametrize("touches_right, touches_left", [(True, False), (False, True)])
    def test_both_sides_must_touch_the_border(self, touches_right, touches_left):
        masks = self._masks(touches_right=touches_right, touches_left=touches_left)
        assert len(merge_truncated(self._groups(), masks, self._points(0.2), merge_gap=0.5)) == 2

    def test_neither_touching_keeps_them_apart(self):
        masks = self._masks(touches_right=False, touches_left=False)
        assert len(merge_truncated(self._groups(), masks, self._points(0.2))) == 2

    def test_different_labels_stay_apart(self):
        assert len(merge_truncated(self._groups(), self._masks(labels=(1, 2)), self._points(0.2))) == 2

    def test_large_gap_stays_apart(self):
        assert len(merge_truncated(self._groups(), self._masks(), self._points(0.8), merge_gap=0.5)) == 2

    def test_wraps_from_last_camera_to_first(self):
        # camera 1 is the last of a 2-camera ring; its right border faces camera 0
        masks = [InstanceMask(0, np.zeros((2, 2)), {1: InstanceRecord(1, 1, 0.8, True, False)}),
                 InstanceMask(1, np.zeros((2, 2)), {1: InstanceRecord(1, 1, 0.6, False, True)})]
        assert len(merge_truncated(self._groups(), masks, self._points(0.2), camera_count=2)) == 1

    def test_point_set_gap(self):
        a = np.zeros((1, 3))
        b = np.array([[3.0, 4.0, 0.0], [10.0, 0.0, 0.0]])
        assert point_set_gap(a, b) == pytest.approx(5.0)
        assert point_set_gap(a, np.zeros((0, 3))) == float("inf")


class TestPaintScene:
    def test_unpainted_points_carry_zero_fields(self, rng):
        pts = np.vstack([points_near_axis(rng), [[10.0, 4.0, 0.0], [-5.0, 0.0, 0.0]]])
        mask = block_mask(0, (100, 100), {1: (*CENTER, 4, 0.8)})
        result = paint_scene(pts, single_camera_rig(), [mask])
        assert result.labels[:20].tolist() == [4] * 20
        assert result.labels[20:].tolist() == [0, 0]
        assert result.instance_ids[20:].tolist() == [0, 0]
        prior = result.priors[0].validate()
        np.testing.assert_allclose(prior.center, pts[:20].mean(axis=0))

    def test_instance_ids_are_dense(self, rng):
        pts = np.vstack([points_near_axis(rng), points_near_axis(rng) + [0.0, 3.0, 0.0]])
        regions = {1: (*CENTER, 1, 0.9), 2: (slice(40, 60), slice(10, 40), 2, 0.9)}
        result = paint_scene(pts, single_camera_rig(), [block_mask(0, (100, 100), regions)])
        assert [p.instance_id for p in result.priors] == [1, 2]
        assert {p.label for p in result.priors} == {1, 2}

    def test_empty_masks_paint_nothing(self, rng):
        pts = points_near_axis(rng)
        result = paint_scene(pts, single_camera_rig(), [InstanceMask.empty(0, 100, 100)])
        assert result.priors == [] and not result.instance_ids.any()

    def test_noiseless_scene_paints_visible_points_correctly(self, noiseless_scene):
        scene = noiseless_scene
        result = paint_scene(scene.points, scene.calibration, scene.masks)
        visible = visible_mask(scene)
        gt = scene.point_labels()
        assert visible.sum() > 1000
        np.testing.assert_array_equal(result.labels[visible], gt[visible])

    def test_seam_car_becomes_one_prior(self, noiseless_scene):
        scene = noiseless_scene
        result = paint_scene(scene.points, scene.calibration, scene.masks)
        visible = visible_mask(scene)
        seam_points = np.nonzero((scene.point_gt == 2) & visible)[0]
        owners = result.instance_ids[seam_points]
        _, counts = np.unique(owners, return_counts=True)
        assert counts.max() / len(seam_points) >= 0.95

    def test_point_order_does_not_matter(self, noiseless_scene, rng):
        scene = noiseless_scene
        perm = rng.permutation(len(scene.points))
        result = paint_scene(scene.points, scene.calibration, scene.masks)
        shuffled = paint_scene(scene.points[perm], scene.calibration, scene.masks)
        np.testing.assert_array_equal(shuffled.labels, result.labels[perm])
        groups = {frozenset(p.members.tolist()) for p in result.priors}
        assert {frozenset(perm[p.members].tolist()) for p in shuffled.priors} == groups

    def test_seam_car_is_really_cut_by_both_cameras(self, noiseless_scene):
        by_camera = {m.camera: set(m.records) for m in noiseless_scene.masks}
        assert 3 in by_camera[4] and 3 in by_camera[5]


class TestPriorJson:
    def test_round_trip(self):
        prior = Instance3DPrior(2, 1, 0.75, [3, 1, 2], [1.0, 2.0, 3.0], True, [7])
        again = Instance3DPrior.from_json(prior.to_json())
        assert again.members.tolist() == [3, 1, 2]
        assert again.evicted.tolist() == [7]
        assert again.low_confidence and again.score == 0.75

    def test_validate_rejects_duplicates(self):
        with pytest.raises(RejectedInputError):
            Instance3DPrior(1, 1, 0.5, [1, 1], [0.0, 0.0, 0.0]).validate()
