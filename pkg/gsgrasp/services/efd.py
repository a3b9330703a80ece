"""
Feature distillation: within-mask pair sampling, the contrastive consistency
loss on rendered latent features, the latent-to-embedding decoder, and the
distillation loss against per-mask embedding vectors.
"""
import logging
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gsgrasp.config import get_settings
from gsgrasp.core.exceptions import (
    MissingTargetFeatureError,
    NoMasksError,
    ValidationError,
)
from gsgrasp.models.domain import PairSample, ViewAnnotations

logger = logging.getLogger(__name__)


class FeatureDecoder(nn.Module):
    """Two affine layers with a ReLU: d_latent -> hidden -> d_clip."""

    def __init__(
        self,
        d_latent: Optional[int] = None,
        hidden: Optional[int] = None,
        d_clip: Optional[int] = None,
    ) -> None:
        super().__init__()
        settings = get_settings()
        self.d_latent = d_latent or settings.D_LATENT
        self.hidden = hidden or settings.DECODER_HIDDEN
        self.d_clip = d_clip or settings.D_CLIP
        self.net = nn.Sequential(
            nn.Linear(self.d_latent, self.hidden),
            nn.ReLU(),
            nn.Linear(self.hidden, self.d_clip),
        )

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.net(latent)


def decode(decoder: FeatureDecoder, latent: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """
    Decode one latent vector to a unit embedding.

    Returns:
        (vector, degenerate): degenerate is True when the decoder output is
        exactly zero, in which case the zero vector is returned
    """
    out = decoder(latent)
    norm = out.norm()
    if norm == 0:
        return torch.zeros_like(out), True
    return out / norm, False


def decode_normalized(decoder: FeatureDecoder, latents: torch.Tensor) -> torch.Tensor:
    """Row-wise decoded unit embeddings; zero outputs stay zero."""
    return F.normalize(decoder(latents), dim=-1, eps=1e-12)


# =============================================================================
# Sampling
# =============================================================================


def apportion(areas: np.ndarray, ids: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of `total` proportional to `areas`; ties by id."""
    quotas = total * areas.astype(np.float64) / areas.sum()
    counts = np.floor(quotas).astype(np.int64)
    remaining = total - int(counts.sum())
    if remaining > 0:
        order = np.lexsort((ids, -(quotas - counts)))
        counts[order[:remaining]] += 1
    return counts


def sample_pairs(
    annotations: ViewAnnotations,
    n: int,
    p: int,
    seed: int,
) -> PairSample:
    """
    Sample n within-mask pixel pairs and p distillation pixels per mask.

    Raises:
        NoMasksError: no mask has at least 2 pixels
        ValidationError: n smaller than the number of eligible masks
    """
    rng = np.random.default_rng(seed)
    imap = annotations.instance_map
    ids, areas = np.unique(imap[imap != 0], return_counts=True)

    eligible = areas >= 2
    if not eligible.any():
        raise NoMasksError(annotations.view_id)
    if n < int(eligible.sum()):
        raise ValidationError(
            "Pair budget smaller than the number of masks",
            details={"n": n, "masks": int(eligible.sum())},
        )

    pair_counts = apportion(areas[eligible], ids[eligible], n)

    pair_u, pair_v, pair_ids = [], [], []
    distill_px, distill_ids = [], []
    for mask_id, area in zip(ids, areas):
        pixels = np.argwhere(imap == mask_id)
        if area >= 2:
            count = int(pair_counts[np.searchsorted(ids[eligible], mask_id)])
            if count:
                first = rng.integers(0, area, count)
                second = rng.integers(0, area - 1, count)
                second += second >= first
                pair_u.append(pixels[first])
                pair_v.append(pixels[second])
                pair_ids.append(np.full(count, mask_id))
        chosen = rng.choice(area, size=p, replace=bool(area < p))
        distill_px.append(pixels[chosen])
        distill_ids.append(np.full(p, mask_id))

    return PairSample(
        pair_u=np.concatenate(pair_u),
        pair_v=np.concatenate(pair_v),
        pair_ids=np.concatenate(pair_ids),
        distill_pixels=np.concatenate(distill_px),
        distill_ids=np.concatenate(distill_ids),
    )


# =============================================================================
# Losses
# =============================================================================


def _gather(feature_map: torch.Tensor, pixels: np.ndarray) -> torch.Tensor:
    rows = torch.as_tensor(pixels[:, 0], dtype=torch.long)
    cols = torch.as_tensor(pixels[:, 1], dtype=torch.long)
    return feature_map[rows, cols]


def contrastive_loss(feature_map: torch.Tensor, sample: PairSample) -> torch.Tensor:
    """1 - mean dot product of raw rendered features over all pairs."""
    h, w = feature_map.shape[:2]
    for pix in (sample.pair_u, sample.pair_v):
        if len(pix) and (pix.min() < 0 or pix[:, 0].max() >= h or pix[:, 1].max() >= w):
            raise ValidationError("Pair pixel out of bounds", details={"shape": [h, w]})
    fu = _gather(feature_map, sample.pair_u)
    fv = _gather(feature_map, sample.pair_v)
    return 1.0 - (fu * fv).sum(-1).mean()


def target_features(
    annotations: ViewAnnotations,
    ids: np.ndarray,
    dtype: torch.dtype,
) -> torch.Tensor:
    rows = []
    for mask_id in ids:
        vec = annotations.instance_features.get(int(mask_id))
        if vec is None:
            raise MissingTargetFeatureError(int(mask_id))
        rows.append(vec)
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def distill_loss(
    feature_map: torch.Tensor,
    sample: PairSample,
    decoder: FeatureDecoder,
    annotations: ViewAnnotations,
    normalize: bool = True,
) -> torch.Tensor:
    """1 - mean cosine between decoded sampled features and their mask embeddings."""
    targets = target_features(annotations, sample.distill_ids, feature_map.dtype)
    latents = _gather(feature_map, sample.distill_pixels)
    decoded = decode_normalized(decoder, latents) if normalize else decoder(latents)
    return 1.0 - (decoded * targets).sum(-1).mean()
