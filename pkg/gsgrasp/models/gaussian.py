"""
The Gaussian feature field: a set of anisotropic 3D Gaussians with view-dependent
color and a low-dimensional latent feature each.

Parameters are stored in unconstrained form (log-scales, logit opacity, raw
quaternions) so a first-order optimizer can update them freely; the public
properties return activated values.
"""
import copy
from typing import Dict, Optional

import numpy as np
import torch
from torch import nn

from gsgrasp.core.transforms import quat_to_rotmat

C0 = 0.28209479177387814
MAX_SH_DEGREE = 3
NUM_SH_COEFFS = (MAX_SH_DEGREE + 1) ** 2
OPACITY_EPS = 1e-6


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


def rgb_to_sh(rgb: torch.Tensor) -> torch.Tensor:
    """Degree-0 coefficient whose rendered color (SH + 0.5) equals `rgb`."""
    return (rgb - 0.5) / C0


def sh_to_rgb(sh_dc: torch.Tensor) -> torch.Tensor:
    return sh_dc * C0 + 0.5


class GaussianField(nn.Module):
    """Ordered primitives sharing one world frame."""

    # Attribute name -> raw parameter, the keys of gradients and optimizer groups
    PARAMETERS = (
        "means",
        "rotation",
        "scaling",
        "opacity",
        "features_dc",
        "features_rest",
        "latent",
    )

    def __init__(
        self,
        means: torch.Tensor,
        rotations: torch.Tensor,
        scales: torch.Tensor,
        opacities: torch.Tensor,
        sh: torch.Tensor,
        latents: torch.Tensor,
        frame_id: str = "robot_base",
        active_sh_degree: int = MAX_SH_DEGREE,
    ) -> None:
        super().__init__()
        n = means.shape[0]
        if sh.shape[1] < NUM_SH_COEFFS:
            pad = sh.new_zeros(n, NUM_SH_COEFFS - sh.shape[1], 3)
            sh = torch.cat([sh, pad], dim=1)

        self._means = nn.Parameter(means.clone())
        self._rotation = nn.Parameter(rotations.clone())
        self._scaling = nn.Parameter(torch.log(scales))
        self._opacity = nn.Parameter(
            inverse_sigmoid(opacities.clamp(OPACITY_EPS, 1 - OPACITY_EPS))
        )
        self._features_dc = nn.Parameter(sh[:, :1, :].clone())
        self._features_rest = nn.Parameter(sh[:, 1:, :].clone())
        self._latent = nn.Parameter(latents.clone())
        self.frame_id = frame_id
        self.active_sh_degree = active_sh_degree

    # -------------------------------------------------------------------------
    # Activated views
    # -------------------------------------------------------------------------

    @property
    def count(self) -> int:
        return self._means.shape[0]

    @property
    def d_latent(self) -> int:
        return self._latent.shape[1]

    @property
    def dtype(self) -> torch.dtype:
        return self._means.dtype

    @property
    def means(self) -> torch.Tensor:
        return self._means

    @property
    def rotations(self) -> torch.Tensor:
        return self._rotation / self._rotation.norm(dim=-1, keepdim=True)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self._scaling)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self._opacity)

    @property
    def sh(self) -> torch.Tensor:
        return torch.cat([self._features_dc, self._features_rest], dim=1)

    @property
    def latents(self) -> torch.Tensor:
        return self._latent

    def raw_parameter(self, name: str) -> nn.Parameter:
        return getattr(self, f"_{name}")

    def covariances(self) -> torch.Tensor:
        """(N, 3, 3) world covariances R S Sᵀ Rᵀ."""
        R = quat_to_rotmat(self._rotation)
        M = R * self.scales[:, None, :]
        return M @ M.transpose(1, 2)

    def shortest_axes(self) -> torch.Tensor:
        """Rotation column of the smallest scale, unoriented."""
        R = quat_to_rotmat(self._rotation)
        axis = torch.argmin(self._scaling.detach(), dim=1)
        index = axis[:, None, None].expand(-1, 3, 1)
        return torch.gather(R, 2, index).squeeze(-1)

    # -------------------------------------------------------------------------
    # Mutation helpers
    # -------------------------------------------------------------------------

    @torch.no_grad()
    def normalize_(self) -> None:
        """Project quaternions and latent features back to unit norm."""
        self._rotation.data /= self._rotation.data.norm(dim=-1, keepdim=True)
        norms = self._latent.data.norm(dim=-1, keepdim=True)
        self._latent.data /= torch.where(norms > 0, norms, torch.ones_like(norms))

    def clone(self) -> "GaussianField":
        return copy.deepcopy(self)

    def subset(self, keep: torch.Tensor) -> "GaussianField":
        """New field with only the primitives where `keep` is true."""
        with torch.no_grad():
            field = GaussianField(
                means=self._means[keep],
                rotations=self._rotation[keep],
                scales=self.scales[keep],
                opacities=self.opacities[keep],
                sh=self.sh[keep],
                latents=self._latent[keep],
                frame_id=self.frame_id,
                active_sh_degree=self.active_sh_degree,
            )
            # Keep raw values exact instead of round-tripping log/logit
            field._scaling.data = self._scaling.data[keep].clone()
            field._opacity.data = self._opacity.data[keep].clone()
        return field

    # -------------------------------------------------------------------------
    # Array conversion
    # -------------------------------------------------------------------------

    @torch.no_grad()
    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Activated values as float64 numpy arrays."""
        return {
            "means": self._means.double().numpy(),
            "rotations": self.rotations.double().numpy(),
            "scales": self.scales.double().numpy(),
            "opacities": self.opacities.double().numpy(),
            "sh": self.sh.double().numpy(),
            "latents": self._latent.double().numpy(),
        }

    @classmethod
    def from_arrays(
        cls,
        arrays: Dict[str, np.ndarray],
        frame_id: str = "robot_base",
        dtype: torch.dtype = torch.float32,
        active_sh_degree: Optional[int] = None,
    ) -> "GaussianField":
        def t(name: str) -> torch.Tensor:
            return torch.as_tensor(np.asarray(arrays[name]), dtype=dtype)

        return cls(
            means=t("means"),
            rotations=t("rotations"),
            scales=t("scales"),
            opacities=t("opacities"),
            sh=t("sh"),
            latents=t("latents"),
            frame_id=frame_id,
            active_sh_degree=MAX_SH_DEGREE if active_sh_degree is None else active_sh_degree,
        )

    def extra_repr(self) -> str:
        return f"count={self.count}, d_latent={self.d_latent}, frame_id={self.frame_id!r}"
