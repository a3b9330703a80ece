"""
Tests for mask IoU, query evaluation and the timed-render resolution.
"""
from dataclasses import replace

import numpy as np
import pytest

from gsgrasp.core.exceptions import ValidationError
from gsgrasp.services.evaluation import evaluate, evaluate_query, iou


class TestIoU:
    def test_partial_overlap(self):
        pred = np.zeros((4, 4), dtype=bool)
        gt = np.zeros((4, 4), dtype=bool)
        pred[:2] = True
        gt[1:3] = True
        assert iou(pred, gt) == pytest.approx(4 / 12)

    def test_two_empty_masks_match(self):
        empty = np.zeros((3, 3), dtype=bool)
        assert iou(empty, empty) == 1.0


class TestResizedView:
    def test_intrinsics_keep_rays(self, camera_factory):
        view = camera_factory(height=6, width=8, f=10.0, cx=3.5, cy=2.5)
        big = view.resized(12, 16)

        point = np.array([0.02, -0.01, 0.5])
        u, v = view.fx * point[0] / point[2] + view.cx, view.fy * point[1] / point[2] + view.cy
        u2, v2 = big.fx * point[0] / point[2] + big.cx, big.fy * point[1] / point[2] + big.cy

        assert (big.height, big.width) == (12, 16)
        assert u2 == pytest.approx(2 * u + 0.5)
        assert v2 == pytest.approx(2 * v + 0.5)
        np.testing.assert_array_equal(big.pose, view.pose)
        assert not big.depth.any()


class TestEvaluate:
    def test_latency_is_timed_at_requested_resolution(self, labeled_field, labeled_scene, labeled_decoder):
        report = evaluate(
            labeled_field, labeled_scene, labeled_decoder, geometry=False, latency_resolution=(36, 48)
        )

        assert report.resolution == (36, 48)
        assert report.mean_latency_s > 0
        assert all(r.latency_s > 0 for r in report.queries)
        assert {r.query for r in report.queries} == set(labeled_scene.gt_masks)
        for result in report.queries:
            assert set(result.iou) == set(labeled_scene.gt_masks[result.query])
        assert report.psnr is None

    def test_default_resolution_from_settings(self, labeled_field, labeled_scene, labeled_decoder):
        report = evaluate(
            labeled_field, labeled_scene, labeled_decoder, queries=["object_0"], geometry=False
        )
        assert report.resolution == (480, 640)

    def test_empty_resolution(self, labeled_field, labeled_scene, labeled_decoder):
        with pytest.raises(ValidationError):
            evaluate(labeled_field, labeled_scene, labeled_decoder, latency_resolution=(0, 640))

    def test_hits_only_where_the_object_is_visible(self, labeled_field, labeled_scene, labeled_decoder):
        first, second = labeled_scene.views[:2]
        masks = {
            first.view_id: np.zeros((first.height, first.width), dtype=bool),
            second.view_id: labeled_scene.gt_masks["object_0"][second.view_id],
        }
        scene = replace(labeled_scene, gt_masks={"object_0": masks})

        result = evaluate_query(labeled_field, scene, labeled_decoder, "object_0", threshold=0.85)

        assert set(result.hits) == {second.view_id}
        assert set(result.iou) == {first.view_id, second.view_id}

    def test_uncovered_pixels_never_match(self, labeled_field, labeled_scene, labeled_decoder):
        # Above the table looking up: every primitive is behind the camera
        pose = np.eye(4)
        pose[:3, 3] = [0.0, 0.0, 5.0]
        away = labeled_scene.views[0].with_pose(pose)
        mask = np.zeros((away.height, away.width), dtype=bool)
        scene = replace(labeled_scene, views=[away], gt_masks={"object_0": {away.view_id: mask}})

        result = evaluate_query(labeled_field, scene, labeled_decoder, "object_0", threshold=1e-6)

        assert result.iou[away.view_id] == 1.0
        assert result.hits == {}
