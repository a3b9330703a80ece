"""
Tests for the optimization loop.
"""
import math
import warnings
from unittest.mock import patch

import numpy as np
import pytest
import torch

from gsgrasp.core.exceptions import DivergenceDetectedError, ValidationError
from gsgrasp.models.schemas import CameraRing, TrainConfig
from gsgrasp.services.field import init_from_rgbd
from gsgrasp.services.synthetic import default_spec, render_synthetic
from gsgrasp.services.training import get_expon_lr_func, scene_extent, train

COLOR_ONLY = dict(
    lambda_depth=0.0,
    lambda_normal=0.0,
    lambda_contr=0.0,
    lambda_distill=0.0,
    position_lr_init=0.0,
    position_lr_final=0.0,
    opacity_lr=0.0,
    scaling_lr=0.0,
    rotation_lr=0.0,
    latent_lr=0.0,
    decoder_lr=0.0,
    feature_lr=0.05,
)


@pytest.fixture(scope="module")
def small_scene():
    spec = default_spec(
        2, seed=3, width=32, height=24, d_clip=8,
        cameras=CameraRing(count=2, radius=0.35, height=0.3),
    )
    return render_synthetic(spec).scene


def _fit(scene, config, count=200, views=None):
    views = scene.views if views is None else views
    annotations = [scene.annotations[scene.views.index(v)] for v in views]
    field = init_from_rgbd(views, target_count=count, seed=0, d_latent=4)
    torch.manual_seed(0)
    return train(field, views, annotations, config)


class TestSchedule:
    def test_log_linear_decay(self):
        lr = get_expon_lr_func(1e-2, 1e-4, max_steps=100)
        assert lr(0) == pytest.approx(1e-2)
        assert lr(50) == pytest.approx(1e-3)
        assert lr(100) == pytest.approx(1e-4)
        assert lr(500) == pytest.approx(1e-4)

    def test_zero_rates(self):
        assert get_expon_lr_func(0.0, 0.0)(10) == 0.0

    def test_fine_tune_runs_a_tenth(self):
        assert TrainConfig(iterations=25, fine_tune=True).effective_iterations == math.ceil(25 / 10)
        assert TrainConfig(iterations=25).effective_iterations == 25

    def test_scene_extent(self, small_scene):
        assert scene_extent(small_scene.views) > 0
        assert scene_extent(small_scene.views[:1]) == 1.0


class TestTrain:
    def test_zero_iterations_is_a_noop(self, small_scene):
        field, decoder, reports = _fit(small_scene, TrainConfig(iterations=0))
        assert reports == []
        assert decoder.d_latent == 4
        assert decoder.d_clip == 8

    def test_reports_and_invariants(self, small_scene):
        field, _, reports = _fit(small_scene, TrainConfig(iterations=5, pair_budget=64))

        assert [r.iteration for r in reports] == [1, 2, 3, 4, 5]
        assert all(math.isfinite(r.total) for r in reports)
        assert any(r.contrastive > 0 for r in reports)
        quats = field.raw_parameter("rotation").detach()
        latents = field.latents.detach()
        np.testing.assert_allclose(quats.norm(dim=-1).numpy(), 1.0, atol=1e-5)
        np.testing.assert_allclose(latents.norm(dim=-1).numpy(), 1.0, atol=1e-5)

    def test_loss_scalars_do_not_warn(self, small_scene):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _, _, reports = _fit(small_scene, TrainConfig(iterations=2, pair_budget=32))

        assert all(isinstance(r.total, float) for r in reports)
        assert not [w for w in caught if "requires_grad" in str(w.message)]

    def test_same_seed_same_result(self, small_scene):
        config = TrainConfig(iterations=3, pair_budget=32, seed=7)
        a, _, ra = _fit(small_scene, config)
        b, _, rb = _fit(small_scene, config)

        assert [r.total for r in ra] == [r.total for r in rb]
        for key, value in a.to_arrays().items():
            np.testing.assert_array_equal(value, b.to_arrays()[key])

    def test_color_fit_improves(self, small_scene):
        views = small_scene.views[:1]
        field = init_from_rgbd(views, target_count=200, seed=0, d_latent=4)
        field.raw_parameter("features_dc").data.zero_()

        _, _, reports = train(field, views, [None], TrainConfig(iterations=20, **COLOR_ONLY))

        assert reports[-1].rgb < reports[0].rgb

    def test_no_views(self, small_scene):
        field = init_from_rgbd(small_scene.views[:1], target_count=20)
        with pytest.raises(ValidationError):
            train(field, [], [], TrainConfig(iterations=1))

    def test_annotation_count_must_match(self, small_scene):
        field = init_from_rgbd(small_scene.views[:1], target_count=20)
        with pytest.raises(ValidationError):
            train(field, small_scene.views[:1], [], TrainConfig(iterations=1))

    def test_divergence_keeps_last_good_state(self, small_scene):
        views = small_scene.views[:1]
        field = init_from_rgbd(views, target_count=50, d_latent=4)
        before = field.to_arrays()["means"]

        with patch(
            "gsgrasp.services.training.photometric_loss",
            return_value=torch.tensor(float("nan")),
        ):
            with pytest.raises(DivergenceDetectedError) as exc_info:
                train(field, views, [None], TrainConfig(iterations=2))

        assert exc_info.value.details["iteration"] == 1
        np.testing.assert_array_equal(exc_info.value.last_good_field.to_arrays()["means"], before)
