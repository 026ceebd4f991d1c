"""Synthetic scenes: placement, LiDAR sampling, mask rendering and error injection"""
import math

import numpy as np
import pytest
from scipy import ndimage

from app.errors import RejectedInputError, SceneGenerationError
from app.services.instance_painter import paint_scene
from app.services.projection import project_cloud, project_point
from app.services.synth import (BACKGROUND, TRUNCATED_SCORE, NoiseSpec, SceneSpec, generate_scene,
                                jitter_extrinsic, lidar_occluded, misplaced_hits, observed_centers,
                                perturb_calibration, render_instance_masks, split_into_sweeps, visible_mask)
from tests.helpers import car_at


def fixed_scene(boxes, **kwargs):
    kwargs.setdefault("ground_points", 0)
    return generate_scene(SceneSpec(boxes=len(boxes), fixed_boxes=boxes, **kwargs))


class TestSpecs:
    def test_negative_noise(self):
        with pytest.raises(RejectedInputError):
            NoiseSpec(rotation_deg=-1.0)

    def test_density_must_be_positive(self):
        with pytest.raises(RejectedInputError):
            SceneSpec(density=0.0)

    def test_range_must_be_ordered(self):
        with pytest.raises(RejectedInputError):
            SceneSpec(range=(20.0, 10.0))

    def test_label_mix_by_name_or_id(self):
        assert SceneSpec(label_mix=["car", 4]).label_ids() == [1, 4]
        assert SceneSpec().label_ids() == list(range(1, 11))

    def test_exact_calibration_flag(self):
        assert NoiseSpec(occluders=3, mask_erosion_px=2).calibration_is_exact
        assert not NoiseSpec(sync_offset_s=0.01).calibration_is_exact


class TestGenerateScene:
    def test_same_seed_same_scene(self):
        spec = SceneSpec(boxes=5, ground_points=3000, seed=21)
        a, b = generate_scene(spec), generate_scene(spec)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.point_gt, b.point_gt)
        assert a.boxes == b.boxes
        for ma, mb in zip(a.masks, b.masks):
            np.testing.assert_array_equal(ma.raster, mb.raster)

    def test_different_seeds_differ(self):
        a = generate_scene(SceneSpec(boxes=3, ground_points=1000, seed=1))
        b = generate_scene(SceneSpec(boxes=3, ground_points=1000, seed=2))
        assert a.boxes != b.boxes

    def test_boxes_respect_range_and_spacing(self):
        from app.services.fp_augment import boxes_overlap
        scene = generate_scene(SceneSpec(boxes=10, ground_points=0, seed=4))
        for i, box in enumerate(scene.boxes):
            assert 6.0 <= math.hypot(box.center[0], box.center[1]) <= 45.0
            assert box.center[2] == pytest.approx(box.size[2] / 2.0)
            for other in scene.boxes[i + 1:]:
                assert not boxes_overlap(box, other)

    def test_empty_scene(self):
        scene = generate_scene(SceneSpec(boxes=0, ground_points=2000, seed=3))
        assert scene.boxes == []
        assert (scene.point_gt == BACKGROUND).all()
        assert all(not m.raster.any() and m.records == {} for m in scene.masks)
        assert len(scene.points) == 2000

    def test_points_have_four_fields_and_ground_is_flat(self):
        scene = generate_scene(SceneSpec(boxes=2, ground_points=500, seed=8))
        assert scene.points.shape[1] == 4
        ground = scene.points[scene.point_gt == BACKGROUND]
        np.testing.assert_array_equal(ground[:, 2], 0.0)
        assert ((scene.points[:, 3] >= 0.0) & (scene.points[:, 3] <= 1.0)).all()

    def test_surface_points_lie_on_their_box(self, noiseless_scene):
        scene = noiseless_scene
        for b, box in enumerate(scene.boxes):
            own = scene.points[scene.point_gt == b, :3]
            assert len(own) > 50
            assert box.contains(own, tol=1e-6).all()

    def test_crowded_placement_gives_up(self):
        with pytest.raises(SceneGenerationError):
            generate_scene(SceneSpec(boxes=200, ground_points=0, range=(6.0, 7.0), label_mix=["bus"]))

    def test_lidar_shadow_is_culled(self):
        near = car_at(0.0, 10.0)
        far = car_at(0.0, 18.0)
        scene = fixed_scene([near, far], seed=2)
        origin = scene.rig.lidar_to_ego.translation
        owner = np.where(scene.point_gt >= 0, scene.point_gt, -1)
        assert not lidar_occluded(scene.points[:, :3], owner, scene.boxes, origin).any()
        # only the far car's roof clears the near one
        assert (scene.point_gt == 1).sum() < (scene.point_gt == 0).sum()

    def test_occluders_are_walls_behind_boxes(self):
        scene = generate_scene(SceneSpec(boxes=3, ground_points=0, seed=6, noise=NoiseSpec(occluders=2)))
        assert len(scene.occluders) == 2
        assert all(w.size == (8.0, 0.3, 4.0) for w in scene.occluders)
        # wall points are background and never rendered into masks
        ids = set()
        for m in scene.masks:
            ids |= set(m.records)
        assert ids <= {1, 2, 3}


class TestRenderMasks:
    def test_one_box_one_region(self):
        scene = fixed_scene([car_at(0.0, 15.0)], seed=1)
        raster = scene.masks[0].raster
        _, regions = ndimage.label(raster > 0)
        assert regions == 1
        assert set(np.unique(raster).tolist()) == {0, 1}
        assert scene.masks[0].records[1].label == 1
        assert scene.masks[0].records[1].score == 1.0

    def test_box_points_project_into_their_camera(self):
        scene = fixed_scene([car_at(0.0, 15.0)], seed=1)
        hits = project_cloud(scene.points, scene.rig)
        for i in range(0, len(scene.points), 5):
            assert 0 in [h.camera for h in hits.for_point(i)]

    def test_nearer_box_hides_the_farther(self):
        near = car_at(0.0, 10.0)
        far = car_at(15.0, 20.0)
        both = fixed_scene([near, far], seed=1).masks[0].raster
        alone = fixed_scene([far], seed=1).masks[0].raster
        near_region = both == 1
        assert near_region.any() and (both == 2).any()
        np.testing.assert_array_equal(both == 2, (alone == 1) & ~near_region)

    def test_touch_flags_follow_the_image_border(self, noiseless_scene):
        records = {m.camera: m.records for m in noiseless_scene.masks}
        assert records[4][3].touches_right and records[5][3].touches_left
        assert not records[0][1].touches_left and not records[0][1].touches_right

    def test_erosion_shrinks_every_region(self):
        scene = fixed_scene([car_at(0.0, 15.0)], seed=1)
        plain = render_instance_masks(scene, erosion_px=0)[0].raster
        eroded = render_instance_masks(scene, erosion_px=2)[0].raster
        assert 0 < (eroded == 1).sum() < (plain == 1).sum()
        assert not ((eroded > 0) & (plain == 0)).any()

    def test_deeper_erosion_stays_inside_shallower(self):
        scene = fixed_scene([car_at(0.0, 12.0), car_at(20.0, 25.0)], seed=1)
        rasters = [render_instance_masks(scene, erosion_px=k)[0].raster for k in (0, 1, 2, 4)]
        for wide, narrow in zip(rasters, rasters[1:]):
            for k in (1, 2):
                assert not ((narrow == k) & (wide != k)).any()
            assert (narrow > 0).sum() < (wide > 0).sum()

    def test_truncated_regions_score_lower(self, noiseless_scene):
        records = {m.camera: m.records for m in noiseless_scene.masks}
        assert records[4][3].score == records[5][3].score == TRUNCATED_SCORE
        assert records[0][1].score == 1.0

    def test_whole_view_wins_over_the_clipped_one(self):
        # 37 deg right of forward: camera 0 clips the car at its right border, camera 1 sees it whole
        scene = fixed_scene([car_at(-37.0, 30.0)], seed=2)
        clipped, whole = scene.masks[0].records[1], scene.masks[1].records[1]
        assert clipped.touches_right and clipped.score == TRUNCATED_SCORE
        assert not (whole.touches_left or whole.touches_right) and whole.score == 1.0
        result = paint_scene(scene.points, scene.calibration, scene.masks)
        assert len(result.priors) == 1


class TestErrorInjection:
    def test_zero_noise_keeps_the_rig(self, rig):
        assert perturb_calibration(rig, NoiseSpec(), seed=3) is rig

    def test_same_seed_same_jitter(self, rig):
        noise = NoiseSpec(rotation_deg=0.5, translation_m=0.05)
        a = perturb_calibration(rig, noise, seed=7)
        b = perturb_calibration(rig, noise, seed=7)
        for ca, cb in zip(a.cameras, b.cameras):
            np.testing.assert_array_equal(ca.extrinsic.matrix, cb.extrinsic.matrix)

    def test_intrinsics_are_untouched(self, rig):
        noisy = perturb_calibration(rig, NoiseSpec(rotation_deg=1.0, translation_m=0.1), seed=1)
        for before, after in zip(rig.cameras, noisy.cameras):
            assert (before.fx, before.fy, before.cx, before.cy) == (after.fx, after.fy, after.cx, after.cy)
            assert after.extrinsic.is_valid()
        noisy.validate()

    def test_one_degree_yaw_moves_a_fifty_meter_point_sideways(self, rig):
        cam = rig.cameras[0]
        target = (50.8, 0.0, 1.6)    # 50 m down camera 0's optical axis
        jittered = jitter_extrinsic(cam.extrinsic, (0.0, math.radians(1.0), 0.0))
        lateral = abs(jittered.apply(np.array(target))[0])
        assert lateral == pytest.approx(50.0 * math.sin(math.radians(1.0)), abs=1e-6)
        assert abs(lateral - 0.87) < 0.01

    def test_sync_offset_shifts_along_the_driving_direction(self, rig):
        noisy = perturb_calibration(rig, NoiseSpec(sync_offset_s=0.1), seed=0, ego_speed=10.0)
        p = np.array([20.0, 0.0, 1.6])
        before = project_point(p, rig.cameras[0])
        after = project_point(p + [1.0, 0.0, 0.0], noisy.cameras[0])
        assert after.u == pytest.approx(before.u) and after.depth == pytest.approx(before.depth)


class TestGroundTruth:
    def test_every_box_has_visible_points(self, noiseless_scene):
        scene = noiseless_scene
        visible = visible_mask(scene)
        for b in range(len(scene.boxes)):
            own = scene.point_gt == b
            assert (visible & own).sum() >= max(30, 0.25 * own.sum())

    def test_observed_centers_sit_on_visible_points(self, noiseless_scene):
        scene = noiseless_scene
        centers = observed_centers(scene)
        for b, box in enumerate(scene.boxes):
            assert box.contains(centers[b][None, :], tol=1e-6).all()

    def test_unseen_box_has_no_observed_center(self):
        # a box straight overhead is never in any camera
        from app.services.fp_augment import Box3D
        scene = fixed_scene([car_at(0.0, 15.0), Box3D((0.0, 0.0, 30.0), (1.0, 1.0, 1.0), 0.0, 1)], seed=1)
        centers = observed_centers(scene)
        assert np.isfinite(centers[0]).all()
        assert np.isnan(centers[1]).all()

    def test_noiseless_points_land_only_on_their_own_instance(self, noiseless_scene):
        scene = noiseless_scene
        hit_count, misplaced = misplaced_hits(scene.points, scene.point_gt, scene.rig, scene.masks)
        assert not misplaced.any()
        np.testing.assert_array_equal(visible_mask(scene), hit_count > 0)

    def test_parallax_keeps_camera_inconsistent_points(self):
        # camera 0 sits ahead of the LiDAR, so the near car hides a sliver of the far one from it only
        boxes = [car_at(0.0, 10.0), car_at(15.0, 20.0)]
        culled = fixed_scene(boxes, ground_points=20000, seed=4)
        kept = fixed_scene(boxes, ground_points=20000, seed=4, noise=NoiseSpec(parallax=True))
        assert len(kept) > len(culled)
        _, misplaced = misplaced_hits(kept.points, kept.point_gt, kept.rig, kept.masks)
        assert np.count_nonzero(misplaced == 0) == len(culled)


class TestSplitIntoSweeps:
    def test_every_point_goes_to_exactly_one_sweep(self, rng):
        cloud = rng.normal(size=(103, 4))
        sweeps, order = split_into_sweeps(cloud, count=10)
        assert sum(len(s.points) for s in sweeps) == 103
        assert sorted(order.tolist()) == list(range(103))
        assert [s.timestamp for s in sweeps] == pytest.approx([0.05 * k for k in range(10)])

    def test_last_sweep_is_the_keyframe_pose(self, rng):
        sweeps, _ = split_into_sweeps(rng.normal(size=(20, 4)), count=4, interval=0.1, ego_speed=5.0)
        np.testing.assert_allclose(sweeps[-1].ego_pose.translation, [1.5, 0.0, 0.0])

    def test_needs_a_sweep(self, rng):
        with pytest.raises(RejectedInputError):
            split_into_sweeps(rng.normal(size=(5, 4)), count=0)
