"""Reconstruction losses: photometric, depth L1 and normal consistency."""
import torch
from torchmetrics.functional import structural_similarity_index_measure

from gsgrasp.core.exceptions import NoValidPixelsError, ShapeMismatchError

L1_WEIGHT = 0.8
SSIM_WEIGHT = 0.2
SSIM_KERNEL = 11


def _same_shape(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(name, tuple(b.shape), tuple(a.shape))


def depth_loss(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Mean |D_hat - D| over pixels with valid (non-zero) observed depth."""
    _same_shape("depth", rendered, observed)
    valid = observed > 0
    if not valid.any():
        raise NoValidPixelsError("depth")
    return (rendered[valid] - observed[valid]).abs().mean()


def normal_loss(rendered: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels of |N_hat - N|^2 + 1 - N_hat . N."""
    _same_shape("normal", rendered, target)
    valid = valid.bool()
    if not valid.any():
        raise NoValidPixelsError("normal")
    n_hat = rendered[valid]
    n = target[valid]
    per_pixel = ((n_hat - n) ** 2).sum(-1) + 1.0 - (n_hat * n).sum(-1)
    return per_pixel.mean()


def ssim(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """SSIM of two (H, W, 3) images in [0, 1] with a Gaussian window."""
    h, w = rendered.shape[:2]
    # Reflect padding needs pad < side
    kernel = min(SSIM_KERNEL, 2 * min(h, w) - 1)
    return structural_similarity_index_measure(
        rendered.permute(2, 0, 1)[None],
        observed.permute(2, 0, 1)[None],
        data_range=1.0,
        kernel_size=kernel,
    )


def photometric_loss(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """0.8 * L1 + 0.2 * (1 - SSIM) over the full image."""
    _same_shape("color", rendered, observed)
    l1 = (rendered - observed).abs().mean()
    return L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - ssim(rendered, observed))


def psnr(rendered: torch.Tensor, observed: torch.Tensor) -> float:
    mse = float(((rendered - observed) ** 2).mean())
    if mse == 0:
        return float("inf")
    return float(-10.0 * torch.log10(torch.tensor(mse)))
