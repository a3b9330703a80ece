"""
Field optimization: photometric, depth, normal, contrastive and distillation
losses under a per-attribute Adam optimizer.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from gsgrasp.core.exceptions import (
    DivergenceDetectedError,
    NoValidNeighborhoodError,
    ValidationError,
)
from gsgrasp.models.domain import CameraView, ViewAnnotations
from gsgrasp.models.gaussian import MAX_SH_DEGREE, GaussianField
from gsgrasp.models.schemas import LossReport, TrainConfig
from gsgrasp.services.efd import FeatureDecoder, contrastive_loss, distill_loss, sample_pairs
from gsgrasp.services.field import prune_low_opacity
from gsgrasp.services.geometry import normals_from_depth
from gsgrasp.services.losses import depth_loss, normal_loss, photometric_loss
from gsgrasp.services.rasterizer import RasterSettings, render_forward

logger = logging.getLogger(__name__)


def get_expon_lr_func(
    lr_init: float,
    lr_final: float,
    max_steps: int = 1_000_000,
) -> Callable[[int], float]:
    """
    Log-linear interpolation from lr_init at step 0 to lr_final at max_steps
    (exponential decay), constant afterwards.
    """

    def helper(step: int) -> float:
        if step < 0 or (lr_init == 0.0 and lr_final == 0.0):
            return 0.0
        t = np.clip(step / max(max_steps, 1), 0, 1)
        return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))

    return helper


def scene_extent(views: Sequence[CameraView]) -> float:
    """Radius of the camera centers around their mean, padded by 10%."""
    centers = np.stack([v.camera_center for v in views])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
    return radius if radius > 0 else 1.0


@dataclass
class TrainingView:
    """A view with everything precomputed for loss evaluation."""

    view: CameraView
    annotations: Optional[ViewAnnotations]
    rgb: torch.Tensor
    depth: torch.Tensor
    normal_target: Optional[torch.Tensor]
    normal_valid: Optional[torch.Tensor]
    has_depth: bool

    @classmethod
    def prepare(
        cls,
        view: CameraView,
        annotations: Optional[ViewAnnotations],
        dtype: torch.dtype,
    ) -> "TrainingView":
        normal_target = normal_valid = None
        try:
            normals, valid = normals_from_depth(view.depth, view)
            normal_target = torch.as_tensor(normals, dtype=dtype)
            normal_valid = torch.as_tensor(valid)
        except NoValidNeighborhoodError:
            logger.warning("No normal supervision for view", extra={"view_id": view.view_id})
        return cls(
            view=view,
            annotations=annotations,
            rgb=torch.as_tensor(view.rgb, dtype=dtype),
            depth=torch.as_tensor(view.depth, dtype=dtype),
            normal_target=normal_target,
            normal_valid=normal_valid,
            has_depth=bool((view.depth > 0).any()),
        )


class GaussianTrainer:
    """
    Owns the optimizer state for one field and one decoder.

    Usage:
        trainer = GaussianTrainer(field, decoder, config, extent=scene_extent(views))
        reports = trainer.train(data)
    """

    def __init__(
        self,
        field: GaussianField,
        decoder: FeatureDecoder,
        config: TrainConfig,
        extent: float = 1.0,
        raster: Optional[RasterSettings] = None,
    ) -> None:
        self.field = field
        self.decoder = decoder
        self.config = config
        self.extent = extent
        self.raster = raster or RasterSettings.from_settings()
        self.optimizer = self._build_optimizer()
        self.means_scheduler = self._build_means_scheduler()

    def _build_optimizer(self) -> torch.optim.Adam:
        cfg = self.config
        p = self.field.raw_parameter
        groups = [
            {"params": [p("means")], "lr": cfg.position_lr_init * self.extent, "name": "means"},
            {"params": [p("features_dc")], "lr": cfg.feature_lr, "name": "features_dc"},
            {"params": [p("features_rest")], "lr": cfg.feature_lr / 20.0, "name": "features_rest"},
            {"params": [p("opacity")], "lr": cfg.opacity_lr, "name": "opacity"},
            {"params": [p("scaling")], "lr": cfg.scaling_lr, "name": "scaling"},
            {"params": [p("rotation")], "lr": cfg.rotation_lr, "name": "rotation"},
            {"params": [p("latent")], "lr": cfg.latent_lr, "name": "latent"},
            {"params": list(self.decoder.parameters()), "lr": cfg.decoder_lr, "name": "decoder"},
        ]
        return torch.optim.Adam(groups, lr=0.0, eps=1e-15)

    def _build_means_scheduler(self) -> Callable[[int], float]:
        cfg = self.config
        if cfg.fine_tune:
            # Fine-tuning continues from the already decayed rate
            final = cfg.position_lr_final * self.extent
            return lambda step: final
        return get_expon_lr_func(
            cfg.position_lr_init * self.extent,
            cfg.position_lr_final * self.extent,
            max_steps=cfg.effective_iterations,
        )

    def update_learning_rate(self, iteration: int) -> float:
        lr = self.means_scheduler(iteration)
        for group in self.optimizer.param_groups:
            if group["name"] == "means":
                group["lr"] = lr
        return lr

    def step(self, iteration: int, item: TrainingView) -> LossReport:
        """Render one view, evaluate all losses, apply one optimizer step."""
        cfg = self.config
        out = render_forward(self.field, item.view, raster=self.raster)

        terms = {name: torch.zeros((), dtype=self.field.dtype) for name in LossReport.TERMS}
        terms["rgb"] = photometric_loss(out.color, item.rgb)
        if item.has_depth:
            terms["depth"] = depth_loss(out.depth, item.depth)
        if item.normal_target is not None:
            terms["normal"] = normal_loss(out.normal, item.normal_target, item.normal_valid)
        if item.annotations is not None and item.annotations.instance_features:
            sample = sample_pairs(
                item.annotations, cfg.pair_budget, cfg.pixels_per_mask, seed=cfg.seed + iteration
            )
            terms["contrastive"] = contrastive_loss(out.feature, sample)
            terms["distill"] = distill_loss(
                out.feature,
                sample,
                self.decoder,
                item.annotations,
                normalize=cfg.normalize_decoder_output,
            )

        weights = {
            "rgb": cfg.lambda_rgb,
            "depth": cfg.lambda_depth,
            "normal": cfg.lambda_normal,
            "contrastive": cfg.lambda_contr,
            "distill": cfg.lambda_distill,
        }
        total = sum(weights[name] * terms[name] for name in LossReport.TERMS)

        if not torch.isfinite(total):
            raise DivergenceDetectedError(
                iteration,
                last_good_field=self.field.clone(),
                last_good_decoder=copy.deepcopy(self.decoder),
            )

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.field.normalize_()

        return LossReport(
            iteration=iteration,
            view_id=item.view.view_id,
            total=total.item(),
            valid_pixels=int((item.depth > 0).sum()),
            **{name: terms[name].item() for name in LossReport.TERMS},
        )

    def train(self, data: Sequence[TrainingView]) -> List[LossReport]:
        cfg = self.config
        if not data:
            raise ValidationError("Training needs at least one view")

        iterations = cfg.effective_iterations
        rng = np.random.default_rng(cfg.seed)
        reports: List[LossReport] = []

        for iteration in range(1, iterations + 1):
            self.update_learning_rate(iteration)
            if (
                iteration % cfg.sh_degree_interval == 0
                and self.field.active_sh_degree < min(cfg.max_sh_degree, MAX_SH_DEGREE)
            ):
                self.field.active_sh_degree += 1

            item = data[int(rng.integers(len(data)))]
            report = self.step(iteration, item)
            reports.append(report)

            if iteration % cfg.log_interval == 0 or iteration == iterations:
                logger.info(
                    f"loss {report.total:.5f} (rgb {report.rgb:.4f}, depth {report.depth:.4f})",
                    extra={"iteration": iteration, "view_id": report.view_id},
                )
        return reports


def train(
    field: GaussianField,
    views: Sequence[CameraView],
    annotations: Sequence[Optional[ViewAnnotations]],
    config: TrainConfig,
    decoder: Optional[FeatureDecoder] = None,
    raster: Optional[RasterSettings] = None,
) -> Tuple[GaussianField, FeatureDecoder, List[LossReport]]:
    """
    Fit `field` (in place) and a decoder to annotated views.

    Raises:
        ValidationError: no views, or views and annotations differ in length
        DivergenceDetectedError: a total loss became non-finite
    """
    if not views:
        raise ValidationError("Training needs at least one view")
    if len(annotations) != len(views):
        raise ValidationError("One annotation entry (or None) per view is required")

    if decoder is None:
        d_clip = next(
            (a.d_clip for a in annotations if a is not None and a.instance_features), None
        )
        decoder = FeatureDecoder(d_latent=field.d_latent, d_clip=d_clip)
    decoder = decoder.to(field.dtype)

    if config.effective_iterations == 0:
        return field, decoder, []

    data = [TrainingView.prepare(v, a, field.dtype) for v, a in zip(views, annotations)]
    trainer = GaussianTrainer(field, decoder, config, extent=scene_extent(views), raster=raster)
    reports = trainer.train(data)

    if config.prune_opacity:
        field = prune_low_opacity(field, config.prune_threshold)
    return field, decoder, reports
