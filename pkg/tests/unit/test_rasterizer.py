"""
Tests for projection, tiled compositing and the hand-written backward pass.
"""
import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from gsgrasp.core.exceptions import ShapeMismatchError, ValidationError
from gsgrasp.core.transforms import random_unit_quaternions
from gsgrasp.models.gaussian import GaussianField, rgb_to_sh
from gsgrasp.services.field import transform_subset
from gsgrasp.services.geometry import bbox_hull
from gsgrasp.services.rasterizer import (
    RasterSettings,
    project,
    rasterize,
    render_backward,
    render_forward,
)

OPAQUE = RasterSettings(alpha_max=1.0)


def _splats(points, colors, opacities, scale=0.01):
    n = len(points)
    dtype = torch.float64
    sh = torch.zeros(n, 16, 3, dtype=dtype)
    sh[:, 0] = rgb_to_sh(torch.as_tensor(colors, dtype=dtype))
    return dict(
        means=torch.as_tensor(points, dtype=dtype),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * n, dtype=dtype),
        scales=torch.full((n, 3), scale, dtype=dtype),
        opacities=torch.as_tensor(opacities, dtype=dtype),
        sh=sh,
        latents=torch.eye(n, dtype=dtype),
    )


def _random_field(n: int, seed: int, dtype=torch.float64) -> GaussianField:
    g = torch.Generator().manual_seed(seed)
    means = torch.stack([
        torch.rand(n, generator=g, dtype=dtype) * 0.6 - 0.3,
        torch.rand(n, generator=g, dtype=dtype) * 0.6 - 0.3,
        torch.rand(n, generator=g, dtype=dtype) + 1.0,
    ], dim=-1)
    scales = torch.rand(n, 3, generator=g, dtype=dtype) * 0.08 + 0.02
    sh = torch.randn(n, 16, 3, generator=g, dtype=dtype) * 0.05
    return GaussianField(
        means=means,
        rotations=random_unit_quaternions(n, g).to(dtype),
        scales=scales,
        opacities=torch.rand(n, generator=g, dtype=dtype) * 0.6 + 0.3,
        sh=sh,
        latents=torch.randn(n, 3, generator=g, dtype=dtype),
        active_sh_degree=0,
    )


def _naive_composite(cache, opacities, payload, raster):
    """Per-pixel full depth sort of every visible splat."""
    mean2d = cache.mean2d.detach().numpy()
    conic = cache.conic.detach().numpy()
    depth = cache.depth.detach().numpy()
    radius = cache.radius.numpy()
    visible = cache.visible.numpy()
    opacities = opacities.detach().numpy()
    payload = payload.detach().numpy()

    order = [i for i in np.argsort(depth, kind="stable") if visible[i]]
    out = np.zeros((cache.height, cache.width, payload.shape[1]))
    for row in range(cache.height):
        for col in range(cache.width):
            T = 1.0
            for i in order:
                dx, dy = col - mean2d[i, 0], row - mean2d[i, 1]
                if abs(dx) > radius[i] or abs(dy) > radius[i]:
                    continue
                a, b, c = conic[i]
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                alpha = min(opacities[i] * np.exp(power), raster.alpha_max)
                if T < raster.transmittance_eps:
                    break
                out[row, col] += alpha * T * payload[i]
                T *= 1.0 - alpha
    return out


class TestForward:
    def test_single_opaque_splat_reproduces_its_attributes(self, camera_factory):
        view = camera_factory()
        splats = _splats([[0.0, 0.0, 2.0]], [[0.2, 0.4, 0.6]], [1.0])

        out = rasterize(**splats, view=view, sh_degree=0, raster=OPAQUE)

        assert out.alpha[3, 3].item() == pytest.approx(1.0, abs=1e-12)
        assert out.color[3, 3].tolist() == pytest.approx([0.2, 0.4, 0.6], abs=1e-9)
        assert out.depth[3, 3].item() == pytest.approx(2.0, abs=1e-12)
        assert out.feature[3, 3].tolist() == pytest.approx([1.0], abs=1e-12)

    def test_front_to_back_blend_of_two_splats(self, camera_factory):
        view = camera_factory()
        splats = _splats(
            [[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            [0.5, 1.0],
        )

        out = rasterize(**splats, view=view, sh_degree=0, raster=OPAQUE)

        assert out.color[3, 3].tolist() == pytest.approx([0.5, 0.5, 0.0], abs=1e-9)
        assert out.alpha[3, 3].item() == pytest.approx(1.0, abs=1e-12)
        assert out.feature[3, 3].tolist() == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_splat_behind_near_plane_is_culled(self, camera_factory):
        view = camera_factory()
        splats = _splats([[0.0, 0.0, -1.0]], [[1.0, 1.0, 1.0]], [1.0])

        out = rasterize(**splats, view=view, sh_degree=0, raster=OPAQUE)

        assert float(out.alpha.abs().max()) == 0.0
        assert not bool(out.cache.visible[0])

    @pytest.mark.parametrize("tile_size", [8, 16])
    def test_matches_naive_full_sort(self, camera_factory, tile_size):
        view = camera_factory(height=32, width=32, f=32.0, cx=15.5, cy=15.5)
        field = _random_field(20, seed=3)
        raster = RasterSettings(tile_size=tile_size)

        with torch.no_grad():
            out = render_forward(field, view, channels=("feature", "depth"), raster=raster)
            cache = project(field, view, raster=raster)
            payload = torch.cat([
                torch.ones(field.count, 1, dtype=torch.float64),
                field.latents,
                cache.depth[:, None],
            ], dim=1)
        expected = _naive_composite(cache, field.opacities, payload, raster)

        np.testing.assert_allclose(out.alpha.numpy(), expected[..., 0], atol=1e-10)
        np.testing.assert_allclose(out.feature.numpy(), expected[..., 1:4], atol=1e-10)
        np.testing.assert_allclose(out.depth.numpy(), expected[..., 4], atol=1e-10)

    def test_invalid_tile_size(self, camera_factory):
        field = _random_field(3, seed=0)
        with pytest.raises(ValidationError):
            project(field, camera_factory(), tile_size=12)

    def test_unknown_channel(self, camera_factory):
        field = _random_field(3, seed=0)
        with pytest.raises(ValidationError):
            render_forward(field, camera_factory(), channels=("color", "semantic"))


class TestProjection:
    @pytest.mark.parametrize("depth,scale", [(1.0, 0.01), (2.5, 0.04), (0.5, 0.002)])
    def test_on_axis_isotropic_splat(self, camera_factory, depth, scale):
        view = camera_factory(height=32, width=32, f=40.0, cx=15.5, cy=15.5)
        quat = random_unit_quaternions(1, torch.Generator().manual_seed(2))
        splats = _splats([[0.0, 0.0, depth]], [[0.5, 0.5, 0.5]], [0.9], scale=scale)
        splats["quats"] = quat

        out = rasterize(**splats, view=view, sh_degree=0, channels=("depth",))
        a, b, c = out.cache.cov2d[0].tolist()
        expected = (40.0 * scale / depth) ** 2 + 0.3

        assert out.cache.mean2d[0].tolist() == pytest.approx([15.5, 15.5], abs=1e-12)
        assert a == pytest.approx(expected, rel=1e-10)
        assert c == pytest.approx(expected, rel=1e-10)
        assert b == pytest.approx(0.0, abs=1e-12)

    def test_means_follow_the_pinhole_model(self, camera_factory):
        view = camera_factory(height=32, width=32, f=30.0, cx=15.5, cy=12.0)
        field = _random_field(50, seed=11)

        cache = project(field, view)
        p = field.means.detach().numpy()

        np.testing.assert_allclose(cache.mean2d[:, 0].detach().numpy(), 30.0 * p[:, 0] / p[:, 2] + 15.5, atol=1e-10)
        np.testing.assert_allclose(cache.mean2d[:, 1].detach().numpy(), 30.0 * p[:, 1] / p[:, 2] + 12.0, atol=1e-10)
        np.testing.assert_allclose(cache.depth.detach().numpy(), p[:, 2], atol=1e-12)


class TestInvariance:
    def test_primitive_order_does_not_matter(self, camera_factory):
        view = camera_factory(height=32, width=32, f=32.0, cx=15.5, cy=15.5)
        field = _random_field(25, seed=7)
        perm = torch.randperm(25, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            permuted = GaussianField(
                means=field.means[perm],
                rotations=field.rotations[perm],
                scales=field.scales[perm],
                opacities=field.opacities[perm],
                sh=field.sh[perm],
                latents=field.latents[perm],
                active_sh_degree=0,
            )
            a = render_forward(field, view)
            b = render_forward(permuted, view)

        for name in ("alpha", "color", "feature", "depth", "normal"):
            np.testing.assert_allclose(getattr(a, name).numpy(), getattr(b, name).numpy(), atol=1e-10)

    def test_moving_field_and_camera_together(self, camera_factory):
        view = camera_factory(height=32, width=32, f=32.0, cx=15.5, cy=15.5)
        field = _random_field(25, seed=9)
        motion = np.eye(4)
        motion[:3, :3] = Rotation.from_rotvec([0.7, -0.4, 1.3]).as_matrix()
        motion[:3, 3] = [0.3, -0.2, 0.5]
        means = field.means.detach().numpy()
        everything = bbox_hull(means.min(axis=0), means.max(axis=0))

        moved = transform_subset(field, everything, motion)
        with torch.no_grad():
            before = render_forward(field, view)
            after = render_forward(moved, view.with_pose(motion @ view.pose))

        for name in ("alpha", "color", "feature", "depth"):
            np.testing.assert_allclose(getattr(after, name).numpy(), getattr(before, name).numpy(), atol=1e-5)
        rotated = before.normal.numpy() @ motion[:3, :3].T
        np.testing.assert_allclose(after.normal.numpy(), rotated, atol=1e-5)


class TestBackward:
    def test_gradcheck_all_inputs(self, camera_factory):
        view = camera_factory(height=8, width=8, f=8.0, cx=3.5, cy=3.5)
        field = _random_field(10, seed=11)
        base = torch.linspace(0.02, 0.05, 10, dtype=torch.float64)[:, None]
        # Distinct axis lengths keep the shortest axis well defined
        scales = base * torch.tensor([1.0, 1.5, 2.5], dtype=torch.float64)
        sh = field.sh.detach().clone()
        sh[:, 0] += torch.tensor([0.3, 0.2, 0.1], dtype=torch.float64)
        inputs = tuple(t.detach().clone().requires_grad_(True) for t in (
            field.means,
            field.rotations,
            scales,
            field.opacities * 0.8,
            sh,
            field.latents,
        ))

        def render(means, quats, scales, opacities, sh, latents):
            out = rasterize(means, quats, scales, opacities, sh, latents, view, sh_degree=3)
            return torch.cat([
                out.alpha.reshape(-1),
                out.color.reshape(-1),
                out.feature.reshape(-1),
                out.depth.reshape(-1),
                out.normal.reshape(-1),
            ])

        assert torch.autograd.gradcheck(render, inputs, eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_render_backward_matches_autograd(self, camera_factory):
        view = camera_factory(height=16, width=16, f=16.0, cx=7.5, cy=7.5)
        field = _random_field(12, seed=5)
        out = render_forward(field, view)
        grad = torch.randn(16, 16, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

        grads = render_backward(out.cache, view, {"color": grad})
        expected = torch.autograd.grad((out.color * grad).sum(), field.raw_parameter("means"), retain_graph=True)[0]

        assert set(grads) == set(GaussianField.PARAMETERS)
        torch.testing.assert_close(grads["means"], expected)
        assert float(grads["latent"].abs().max()) == 0.0

    def test_zero_output_grads_give_zero_gradients(self, camera_factory):
        view = camera_factory()
        field = _random_field(4, seed=1)
        out = render_forward(field, view)

        grads = render_backward(out.cache, view, {})

        for name in GaussianField.PARAMETERS:
            assert float(grads[name].abs().max()) == 0.0

    def test_wrong_gradient_shape(self, camera_factory):
        view = camera_factory()
        field = _random_field(4, seed=1)
        out = render_forward(field, view)

        with pytest.raises(ShapeMismatchError):
            render_backward(out.cache, view, {"color": torch.zeros(4, 4, 3)})

    def test_channel_not_rendered(self, camera_factory):
        view = camera_factory()
        field = _random_field(4, seed=1)
        out = render_forward(field, view, channels=("depth",))

        with pytest.raises(ValidationError):
            render_backward(out.cache, view, {"color": torch.zeros(8, 8, 3)})
