"""
Tests for back-projection, depth normals and convex hulls.
"""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gsgrasp.core.exceptions import (
    BadIntrinsicsError,
    DegenerateInputError,
    NoValidDepthError,
    NoValidNeighborhoodError,
)
from gsgrasp.services.geometry import backproject, bbox_hull, convex_hull, normals_from_depth


def _pose(rotvec, translation):
    pose = np.eye(4)
    pose[:3, :3] = Rotation.from_rotvec(rotvec).as_matrix()
    pose[:3, 3] = translation
    return pose


class TestBackproject:
    def test_principal_point_lies_on_optical_axis(self, camera_factory):
        view = camera_factory(height=4, width=4, f=2.0, cx=1.0, cy=1.0)
        depth = np.zeros((4, 4))
        depth[1, 1] = 1.0
        depth[1, 3] = 1.0

        cloud = backproject(depth, view)

        np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]], atol=1e-12)

    def test_matches_inverse_projection(self, camera_factory):
        rng = np.random.default_rng(4)
        pose = _pose([0.2, -0.4, 0.1], [0.3, -0.1, 0.5])
        view = camera_factory(height=6, width=7, f=5.0, cx=3.2, cy=2.6, pose=pose)
        depth = rng.uniform(0.5, 2.0, (6, 7))

        cloud = backproject(depth, view)

        rows, cols = np.nonzero(np.ones((6, 7), dtype=bool))
        pixels = np.stack([cols, rows, np.ones_like(cols)], axis=-1).astype(np.float64)
        cam = (pixels @ np.linalg.inv(view.K).T) * depth[rows, cols][:, None]
        expected = cam @ pose[:3, :3].T + pose[:3, 3]
        np.testing.assert_allclose(cloud.points, expected, atol=1e-12)

    def test_mask_and_colors(self, camera_factory):
        view = camera_factory(height=3, width=3, f=1.0, cx=1.0, cy=1.0, depth=1.0)
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 2] = True
        colors = np.zeros((3, 3, 3))
        colors[0, 2] = [0.1, 0.2, 0.3]

        cloud = backproject(view.depth, view, mask=mask, colors=colors)

        assert len(cloud) == 1
        np.testing.assert_allclose(cloud.colors, [[0.1, 0.2, 0.3]])

    def test_no_valid_depth(self, camera_factory):
        view = camera_factory()
        with pytest.raises(NoValidDepthError):
            backproject(view.depth, view)

    def test_bad_intrinsics(self, camera_factory):
        view = camera_factory(f=0.0, depth=1.0)
        with pytest.raises(BadIntrinsicsError):
            backproject(view.depth, view)


class TestNormalsFromDepth:
    def test_fronto_parallel_plane_faces_camera(self, camera_factory):
        view = camera_factory(height=6, width=6, f=5.0, cx=2.5, cy=2.5, depth=1.0)

        normals, valid = normals_from_depth(view.depth, view)

        assert valid[1:-1, 1:-1].all()
        assert not valid[0].any()
        np.testing.assert_allclose(normals[valid], np.tile([0.0, 0.0, -1.0], (int(valid.sum()), 1)), atol=1e-12)
        assert np.all(normals[~valid] == 0.0)

    def test_tilted_plane(self, camera_factory):
        view = camera_factory(height=9, width=9, f=8.0, cx=4.0, cy=4.0)
        cols = np.arange(9, dtype=np.float64)
        # Plane z = 1 + x along each row
        depth = np.tile(1.0 / (1.0 - (cols - view.cx) / view.fx), (9, 1))

        normals, valid = normals_from_depth(depth, view)

        expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        angles = np.degrees(np.arccos(np.clip(normals[valid] @ expected, -1.0, 1.0)))
        assert angles.max() < 0.5

    def test_rotated_camera_returns_world_normals(self, camera_factory):
        pose = _pose([0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0])
        view = camera_factory(height=5, width=5, f=4.0, cx=2.0, cy=2.0, depth=2.0, pose=pose)

        normals, valid = normals_from_depth(view.depth, view)

        np.testing.assert_allclose(normals[valid], np.tile([0.0, 0.0, -1.0], (int(valid.sum()), 1)), atol=1e-12)

    def test_isolated_pixel_is_invalid(self, camera_factory):
        view = camera_factory(height=7, width=7, f=5.0, cx=3.0, cy=3.0)
        depth = np.zeros((7, 7))
        depth[0:3, 0:3] = 1.0
        depth[5, 5] = 1.0

        _, valid = normals_from_depth(depth, view)

        assert valid[1, 1]
        assert valid.sum() == 1

    def test_no_valid_neighborhood(self, camera_factory):
        view = camera_factory(height=5, width=5)
        depth = np.zeros((5, 5))
        depth[2, 2] = 1.0
        with pytest.raises(NoValidNeighborhoodError):
            normals_from_depth(depth, view)


class TestConvexHull:
    def test_cube_vertices_and_faces(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
        points = np.vstack([corners, [[0.5, 0.5, 0.5], [0.2, 0.7, 0.4]]])

        hull = convex_hull(points)

        assert {tuple(v) for v in hull.vertices} == {tuple(c) for c in corners}
        assert len(hull.normals) == 6
        assert hull.volume == pytest.approx(1.0)
        assert hull.contains(points).all()
        assert not hull.contains(np.array([[1.5, 0.5, 0.5]])).any()

    def test_tetrahedron(self):
        points = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)

        hull = convex_hull(points)

        assert len(hull.vertices) == 4
        assert len(hull.normals) == 4
        np.testing.assert_allclose(np.linalg.norm(hull.normals, axis=1), 1.0)

    def test_coplanar_points(self):
        rng = np.random.default_rng(0)
        points = np.column_stack([rng.uniform(size=(20, 2)), np.zeros(20)])
        with pytest.raises(DegenerateInputError):
            convex_hull(points)

    def test_too_few_points(self):
        with pytest.raises(DegenerateInputError):
            convex_hull(np.zeros((3, 3)))

    def test_bbox_hull_inflates_flat_sets(self):
        hull = bbox_hull(np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 0.0]))
        lo, hi = hull.bounds

        np.testing.assert_allclose(lo, [-1e-3, -1e-3, -1e-3])
        np.testing.assert_allclose(hi, [1.001, 1.001, 1e-3])
        assert hull.volume > 0
