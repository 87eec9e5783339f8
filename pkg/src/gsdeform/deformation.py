"""Time-conditioned deformation of canonical Gaussians."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ParameterError, RangeError, RotationDegeneracyError
from .gaussians import IDENTITY_6D, GaussianCloud, rot6d_to_matrix
from .geometry import GeometryEncoder
from .nn import DEFAULT_DTYPE, MLP, forward_mlp

POSITION_FREQS = 10
TIME_FREQS = 6
MIN_SCALE = 1e-6


def positional_encode(p: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``(sin(2^k pi p), cos(2^k pi p))`` for k < n_freqs, interleaved per frequency.

    Works elementwise on the last axis, so ``(N, 3)`` input gives ``(N, 6L)``.
    """
    if n_freqs < 1:
        raise ParameterError(f"need at least one frequency, got {n_freqs}")
    if not isinstance(p, torch.Tensor) or not p.is_floating_point():
        p = torch.as_tensor(p, dtype=DEFAULT_DTYPE)
    freqs = (2.0 ** torch.arange(n_freqs, dtype=p.dtype)) * math.pi
    angles = p.unsqueeze(-1) * freqs  # (..., D, L)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., D, L, 2)
    return enc.reshape(*p.shape[:-1], -1) if p.ndim else enc.reshape(-1)


@dataclass
class DeformationOutput:
    dx: torch.Tensor
    dr6: torch.Tensor
    ds: torch.Tensor

    @classmethod
    def zeros(cls, n: int, dtype=DEFAULT_DTYPE) -> "DeformationOutput":
        return cls(torch.zeros(n, 3, dtype=dtype), torch.zeros(n, 6, dtype=dtype), torch.zeros(n, 3, dtype=dtype))

    def select(self, index) -> "DeformationOutput":
        return DeformationOutput(self.dx[index], self.dr6[index], self.ds[index])


@dataclass
class DeformedGaussians:
    positions: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    opacities: torch.Tensor
    sh: torch.Tensor

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def canonical(cls, cloud: GaussianCloud) -> "DeformedGaussians":
        return cls(cloud.positions, cloud.scales, cloud.rotations(), cloud.opacities, cloud.sh)


class DeformationDecoder(nn.Module):
    """Five hidden ReLU layers of width 256, input re-injected at layer 3, zero-init head."""

    def __init__(self, feature_dim: int, width: int = 256, depth: int = 5, generator=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        in_dim = feature_dim + 3 * 2 * POSITION_FREQS + 2 * TIME_FREQS
        widths = [in_dim] + [width] * depth + [12]
        self.mlp = MLP(widths, skip=3, zero_last=True, generator=generator, dtype=dtype)
        self.feature_dim = feature_dim

    def forward(self, features: torch.Tensor, positions: torch.Tensor, t: float) -> DeformationOutput:
        return decode_deformation(self, features, positions, t)


def decode_deformation(decoder: DeformationDecoder, features, positions, t: float) -> DeformationOutput:
    if not 0.0 <= float(t) <= 1.0:
        raise RangeError(f"timestamp {t} outside [0, 1]")
    n = positions.shape[0]
    t_col = torch.full((n, 1), float(t), dtype=positions.dtype)
    h = torch.cat(
        [features, positional_encode(positions, POSITION_FREQS), positional_encode(t_col, TIME_FREQS)],
        dim=1,
    )
    out = forward_mlp(decoder.mlp, h)
    return DeformationOutput(out[:, :3], out[:, 3:9], out[:, 9:12])


def residual_rotation(dr6: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for residuals added to the identity 6D vector."""
    identity = torch.tensor(IDENTITY_6D, dtype=dr6.dtype)
    return rot6d_to_matrix(identity + dr6)


def apply_deformation(cloud: GaussianCloud, d: DeformationOutput, min_scale: float = MIN_SCALE) -> DeformedGaussians:
    n = len(cloud)
    if d.dx.shape != (n, 3) or d.dr6.shape != (n, 6) or d.ds.shape != (n, 3):
        raise ParameterError("deformation rows do not match the cloud")
    try:
        R_res = residual_rotation(d.dr6)
    except RotationDegeneracyError as exc:
        raise RotationDegeneracyError(
            f"residual rotation degenerate for Gaussian {exc.index}", index=exc.index
        ) from exc
    return DeformedGaussians(
        positions=cloud.positions + d.dx,
        scales=torch.clamp(cloud.scales + d.ds, min=min_scale),
        rotations=R_res @ cloud.rotations(),
        opacities=cloud.opacities,
        sh=cloud.sh,
    )


class DeformationModel(nn.Module):
    """Geometry encoder plus decoder: ``(cloud, t) -> DeformedGaussians``."""

    def __init__(self, grid_size: float, use_geometry: bool = True, generator=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.encoder = GeometryEncoder(grid_size, use_geometry=use_geometry, generator=generator, dtype=dtype)
        self.decoder = DeformationDecoder(self.encoder.out_features, generator=generator, dtype=dtype)

    def deformation(self, cloud: GaussianCloud, t: float) -> DeformationOutput:
        feats = self.encoder(cloud.positions)
        return decode_deformation(self.decoder, feats.f_fuse, cloud.positions, t)

    def forward(self, cloud: GaussianCloud, t: float) -> tuple[DeformedGaussians, DeformationOutput]:
        d = self.deformation(cloud, t)
        return apply_deformation(cloud, d), d
