"""
Tile-based differentiable rasterizer.

Projection, SH color and normal extraction are plain torch expressions and
are differentiated by autograd. Front-to-back compositing runs per 16x16
tile (configurable) inside a custom autograd Function whose backward
recomputes each tile's weights instead of storing them.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import (
    NumericalDegeneracyError,
    ShapeMismatchError,
    ValidationError,
)
from gsgrasp.core.transforms import quat_to_rotmat
from gsgrasp.models.domain import CameraView, RenderOutput, SplatCache
from gsgrasp.models.gaussian import GaussianField
from gsgrasp.services.sh import eval_sh

logger = logging.getLogger(__name__)

CHANNELS = ("color", "feature", "depth", "normal")
VALID_TILE_SIZES = (8, 16, 32)


@dataclass(frozen=True)
class RasterSettings:
    """Numerical constants of projection and compositing."""

    tile_size: int = 16
    near_plane: float = 0.01
    alpha_max: float = 0.99
    transmittance_eps: float = 1e-4
    cov2d_dilation: float = 0.3
    min_cov2d_det: float = 1e-12

    @classmethod
    def from_settings(cls, **overrides) -> "RasterSettings":
        settings = get_settings()
        base = cls(
            tile_size=settings.TILE_SIZE,
            near_plane=settings.NEAR_PLANE,
            alpha_max=settings.ALPHA_MAX,
            transmittance_eps=settings.TRANSMITTANCE_EPS,
            cov2d_dilation=settings.COV2D_DILATION,
            min_cov2d_det=settings.MIN_COV2D_DET,
        )
        return replace(base, **overrides)


def _camera_tensors(
    view: CameraView, dtype: torch.dtype
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """World-to-camera rotation and translation, and the camera center."""
    w2c = view.world_to_camera
    R = torch.as_tensor(w2c[:3, :3], dtype=dtype)
    t = torch.as_tensor(w2c[:3, 3], dtype=dtype)
    center = torch.as_tensor(view.camera_center, dtype=dtype)
    return R, t, center


# =============================================================================
# Projection
# =============================================================================


def project_gaussians(
    means: torch.Tensor,
    cov3d: torch.Tensor,
    view: CameraView,
    raster: RasterSettings,
) -> SplatCache:
    """Project world Gaussians to screen space and bin them into depth-sorted tiles."""
    if raster.tile_size not in VALID_TILE_SIZES:
        raise ValidationError(
            f"tile_size must be one of {VALID_TILE_SIZES}",
            details={"tile_size": raster.tile_size},
        )

    dtype = means.dtype
    W_rot, t, _ = _camera_tensors(view, dtype)
    H, W = view.height, view.width

    p_cam = means @ W_rot.T + t
    x, y, z = p_cam.unbind(-1)
    in_front = z > raster.near_plane
    z_safe = torch.where(in_front, z, torch.ones_like(z))

    u = view.fx * x / z_safe + view.cx
    v = view.fy * y / z_safe + view.cy
    mean2d = torch.stack([u, v], dim=-1)

    # Local affine approximation of the perspective projection
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([view.fx / z_safe, zero, -view.fx * x / z_safe ** 2], dim=-1),
        torch.stack([zero, view.fy / z_safe, -view.fy * y / z_safe ** 2], dim=-1),
    ], dim=1)
    T = J @ W_rot
    cov = T @ cov3d @ T.transpose(1, 2)

    a = cov[:, 0, 0] + raster.cov2d_dilation
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + raster.cov2d_dilation
    det = a * c - b * b

    degenerate = in_front & (det < raster.min_cov2d_det)
    usable = in_front & ~degenerate
    det_safe = torch.where(usable, det, torch.ones_like(det))
    conic = torch.stack([c / det_safe, -b / det_safe, a / det_safe], dim=-1)

    degenerate_count = int(degenerate.sum())
    if degenerate_count:
        err = NumericalDegeneracyError(degenerate_count)
        logger.warning(
            err.message,
            extra={"view_id": view.view_id, "error_code": err.error_code, "count": degenerate_count},
        )

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lambda_max = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.1))
        radius = torch.ceil(3.0 * torch.sqrt(lambda_max.clamp(min=0)))
        radius = torch.where(usable, radius, torch.zeros_like(radius))

        # Pixel j is covered when |j - u| <= radius
        x0 = torch.clamp(torch.ceil(u - radius), min=0)
        x1 = torch.clamp(torch.floor(u + radius), max=W - 1)
        y0 = torch.clamp(torch.ceil(v - radius), min=0)
        y1 = torch.clamp(torch.floor(v + radius), max=H - 1)
        visible = usable & (x0 <= x1) & (y0 <= y1)
        radius = torch.where(visible, radius, torch.zeros_like(radius))

        ts = raster.tile_size
        tiles_x = math.ceil(W / ts)
        tiles_y = math.ceil(H / ts)
        tile_rect = torch.stack([x0, y0, x1, y1], dim=-1).clamp(min=0).long() // ts
        tile_rect[~visible] = 0

        sorted_ids, tile_offsets = _bin_tiles(z.detach(), visible, tile_rect, tiles_x, tiles_y)

    return SplatCache(
        mean2d=mean2d,
        cov2d=torch.stack([a, b, c], dim=-1),
        conic=conic,
        depth=z,
        radius=radius.long(),
        tile_rect=tile_rect,
        visible=visible,
        sorted_ids=sorted_ids,
        tile_offsets=tile_offsets,
        tiles_x=tiles_x,
        tiles_y=tiles_y,
        tile_size=ts,
        height=H,
        width=W,
        degenerate_count=degenerate_count,
    )


def _bin_tiles(
    depth: torch.Tensor,
    visible: torch.Tensor,
    tile_rect: torch.Tensor,
    tiles_x: int,
    tiles_y: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Duplicate each splat per covered tile; order by tile, then depth."""
    num_tiles = tiles_x * tiles_y
    ids = torch.nonzero(visible).squeeze(1)
    ids = ids[torch.argsort(depth[ids], stable=True)]

    rect = tile_rect[ids]
    nx = rect[:, 2] - rect[:, 0] + 1
    ny = rect[:, 3] - rect[:, 1] + 1
    counts = nx * ny

    owner = torch.repeat_interleave(torch.arange(len(ids)), counts)
    starts = torch.cumsum(counts, 0) - counts
    local = torch.arange(int(counts.sum())) - starts[owner]
    tx = rect[owner, 0] + local % nx[owner]
    ty = rect[owner, 1] + local // nx[owner]
    tile = ty * tiles_x + tx

    # Stable sort keeps the depth order inside each tile
    order = torch.argsort(tile, stable=True)
    sorted_ids = ids[owner][order]

    tile_offsets = torch.zeros(num_tiles + 1, dtype=torch.long)
    tile_offsets[1:] = torch.cumsum(torch.bincount(tile, minlength=num_tiles), 0)
    return sorted_ids, tile_offsets


def project(
    field: GaussianField,
    view: CameraView,
    tile_size: Optional[int] = None,
    raster: Optional[RasterSettings] = None,
) -> SplatCache:
    raster = raster or RasterSettings.from_settings()
    if tile_size is not None:
        raster = replace(raster, tile_size=tile_size)
    return project_gaussians(field.means, field.covariances(), view, raster)


# =============================================================================
# Compositing
# =============================================================================


def _tile_pixels(cache: SplatCache, tile: int, dtype: torch.dtype):
    """Flat pixel indices and (u, v) centers of one tile."""
    ty, tx = divmod(tile, cache.tiles_x)
    ts = cache.tile_size
    rows = torch.arange(ty * ts, min((ty + 1) * ts, cache.height))
    cols = torch.arange(tx * ts, min((tx + 1) * ts, cache.width))
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.reshape(-1), cc.reshape(-1)
    return rr * cache.width + cc, cc.to(dtype), rr.to(dtype)


def _tile_weights(px, py, mean2d, conic, opacity, radius, alpha_max, eps):
    """Per (pixel, splat) compositing weights for one tile, splats depth-ordered."""
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    inside = (dx.abs() <= radius) & (dy.abs() <= radius)
    gauss = torch.exp(power)
    raw = opacity * gauss
    alpha = torch.where(inside, raw.clamp(max=alpha_max), torch.zeros_like(raw))

    transmittance = torch.cumprod(1.0 - alpha, dim=1)
    t_before = torch.cat([torch.ones_like(alpha[:, :1]), transmittance[:, :-1]], dim=1)
    active = t_before >= eps
    weight = torch.where(active, alpha * t_before, torch.zeros_like(alpha))
    return dx, dy, gauss, raw, alpha, inside, t_before, active, weight


class _CompositeSplats(torch.autograd.Function):
    """Front-to-back alpha compositing of per-splat payload rows."""

    @staticmethod
    def forward(ctx, mean2d, conic, opacity, payload, cache, alpha_max, eps):
        dtype = payload.dtype
        n_pixels = cache.height * cache.width
        out = payload.new_zeros(n_pixels, payload.shape[1])
        radius = cache.radius.to(dtype)

        for tile in range(cache.tiles_x * cache.tiles_y):
            ids = cache.tile_ids(tile)
            if len(ids) == 0:
                continue
            pix, px, py = _tile_pixels(cache, tile, dtype)
            weight = _tile_weights(
                px, py, mean2d[ids], conic[ids], opacity[ids], radius[ids], alpha_max, eps
            )[-1]
            out[pix] = weight @ payload[ids]

        ctx.save_for_backward(mean2d, conic, opacity, payload)
        ctx.cache = cache
        ctx.alpha_max = alpha_max
        ctx.eps = eps
        return out

    @staticmethod
    def backward(ctx, grad_out):
        mean2d, conic, opacity, payload = ctx.saved_tensors
        cache = ctx.cache
        dtype = payload.dtype
        radius = cache.radius.to(dtype)
        tiny = torch.finfo(dtype).tiny

        g_mean2d = torch.zeros_like(mean2d)
        g_conic = torch.zeros_like(conic)
        g_opacity = torch.zeros_like(opacity)
        g_payload = torch.zeros_like(payload)

        for tile in range(cache.tiles_x * cache.tiles_y):
            ids = cache.tile_ids(tile)
            if len(ids) == 0:
                continue
            pix, px, py = _tile_pixels(cache, tile, dtype)
            m, cn = mean2d[ids], conic[ids]
            dx, dy, gauss, raw, alpha, inside, t_before, active, weight = _tile_weights(
                px, py, m, cn, opacity[ids], radius[ids], ctx.alpha_max, ctx.eps
            )
            G = grad_out[pix]
            feat = payload[ids]
            g_payload.index_add_(0, ids, weight.T @ G)

            gc = G @ feat.T
            wg = weight * gc
            # Exclusive suffix sum of later contributions, built by shifting (no subtraction)
            suffix = torch.flip(torch.cumsum(torch.flip(wg, [1]), dim=1), [1])
            later = torch.cat([suffix[:, 1:], torch.zeros_like(suffix[:, :1])], dim=1)
            g_alpha = t_before * gc - later / (1.0 - alpha).clamp(min=tiny)
            g_alpha = torch.where(active, g_alpha, torch.zeros_like(g_alpha))
            g_raw = torch.where(inside & (raw < ctx.alpha_max), g_alpha, torch.zeros_like(g_alpha))

            g_opacity.index_add_(0, ids, (g_raw * gauss).sum(0))
            g_power = g_raw * raw
            a, b, c = cn[:, 0], cn[:, 1], cn[:, 2]
            g_conic.index_add_(0, ids, torch.stack([
                (g_power * -0.5 * dx * dx).sum(0),
                (g_power * -dx * dy).sum(0),
                (g_power * -0.5 * dy * dy).sum(0),
            ], dim=-1))
            g_mean2d.index_add_(0, ids, torch.stack([
                (g_power * (a * dx + b * dy)).sum(0),
                (g_power * (b * dx + c * dy)).sum(0),
            ], dim=-1))

        return g_mean2d, g_conic, g_opacity, g_payload, None, None, None


def composite(
    cache: SplatCache,
    opacity: torch.Tensor,
    payload: torch.Tensor,
    raster: RasterSettings,
) -> torch.Tensor:
    """(H, W, C) image of `payload` composited with the cache's splats."""
    out = _CompositeSplats.apply(
        cache.mean2d,
        cache.conic,
        opacity,
        payload,
        cache,
        raster.alpha_max,
        raster.transmittance_eps,
    )
    return out.reshape(cache.height, cache.width, payload.shape[1])


# =============================================================================
# Forward / backward entry points
# =============================================================================


def rasterize(
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    opacities: torch.Tensor,
    sh: torch.Tensor,
    latents: torch.Tensor,
    view: CameraView,
    channels: Iterable[str] = CHANNELS,
    sh_degree: int = 3,
    raster: Optional[RasterSettings] = None,
) -> RenderOutput:
    """Render activated primitive tensors; differentiable in all of them."""
    raster = raster or RasterSettings.from_settings()
    channels = tuple(channels)
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise ValidationError(f"Unknown channels: {sorted(unknown)}", details={"channels": list(channels)})

    R = quat_to_rotmat(quats)
    M = R * scales[:, None, :]
    cov3d = M @ M.transpose(1, 2)
    cache = project_gaussians(means, cov3d, view, raster)

    _, _, center = _camera_tensors(view, means.dtype)
    to_camera = center - means

    columns: Dict[str, torch.Tensor] = {"alpha": torch.ones_like(opacities)[:, None]}
    if "color" in channels:
        dirs = -to_camera / to_camera.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        columns["color"] = torch.clamp_min(eval_sh(sh_degree, sh, dirs) + 0.5, 0.0)
    if "feature" in channels:
        columns["feature"] = latents
    if "depth" in channels:
        columns["depth"] = cache.depth[:, None]
    if "normal" in channels:
        axis = torch.argmin(scales.detach(), dim=1)
        normals = torch.gather(R, 2, axis[:, None, None].expand(-1, 3, 1)).squeeze(-1)
        facing = (normals * to_camera).sum(-1, keepdim=True).detach()
        columns["normal"] = torch.where(facing < 0, -normals, normals)

    payload = torch.cat(list(columns.values()), dim=1)
    image = composite(cache, opacities, payload, raster)

    maps: Dict[str, torch.Tensor] = {}
    start = 0
    for name, col in columns.items():
        width = col.shape[1]
        maps[name] = image[..., start:start + width]
        start += width

    outputs = {
        "alpha": maps["alpha"][..., 0],
        "color": maps.get("color"),
        "feature": maps.get("feature"),
        "depth": maps["depth"][..., 0] if "depth" in maps else None,
        "normal": maps.get("normal"),
    }
    cache.outputs = {k: v for k, v in outputs.items() if v is not None}
    return RenderOutput(cache=cache, **outputs)


def render_forward(
    field: GaussianField,
    view: CameraView,
    channels: Iterable[str] = CHANNELS,
    raster: Optional[RasterSettings] = None,
) -> RenderOutput:
    """Render the requested channels of `field` from `view`."""
    result = rasterize(
        field.means,
        field.raw_parameter("rotation"),
        field.scales,
        field.opacities,
        field.sh,
        field.latents,
        view,
        channels=channels,
        sh_degree=field.active_sh_degree,
        raster=raster,
    )
    result.cache.inputs = {name: field.raw_parameter(name) for name in GaussianField.PARAMETERS}
    return result


def render_backward(
    cache: SplatCache,
    view: CameraView,
    output_grads: Dict[str, torch.Tensor],
) -> Dict[str, torch.Tensor]:
    """
    Gradients of sum(output * grad) over the rendered channels with respect to
    every raw field parameter. Culled primitives receive zeros.
    """
    expected = (view.height, view.width)
    outputs, grads = [], []
    for name, grad in output_grads.items():
        out = cache.outputs.get(name)
        if out is None:
            raise ValidationError(f"Channel {name!r} was not rendered", details={"channel": name})
        grad = torch.as_tensor(grad, dtype=out.dtype)
        if tuple(grad.shape[:2]) != expected or grad.shape != out.shape:
            raise ShapeMismatchError(name, tuple(out.shape), tuple(grad.shape))
        outputs.append(out)
        grads.append(grad)

    if not cache.inputs:
        raise ValidationError("Cache has no recorded inputs; render with render_forward")

    names = list(cache.inputs)
    params = [cache.inputs[n] for n in names]
    if not outputs:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}

    result = torch.autograd.grad(
        outputs, params, grad_outputs=grads, retain_graph=True, allow_unused=True
    )
    return {
        n: g if g is not None else torch.zeros_like(p)
        for n, g, p in zip(names, result, params)
    }


def to_numpy(output: RenderOutput) -> Dict[str, np.ndarray]:
    """Detached float32 arrays of the rendered maps."""
    maps = {}
    for name in ("alpha",) + CHANNELS:
        tensor = getattr(output, name)
        if tensor is not None:
            maps[name] = tensor.detach().float().numpy()
    return maps

