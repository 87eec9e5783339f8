"""Geometry-aware per-Gaussian features.

Canonical positions are voxelized on a fixed grid, a small sparse 3D U-Net
runs over the occupied voxels (geometric branch), a point MLP embeds each
position on its own (identity branch), and a fusion MLP mixes the two.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConsistencyError, DimensionError, ParameterError
from .nn import DEFAULT_DTYPE, MLP, forward_mlp, kaiming_uniform_

KERNEL_OFFSETS = torch.tensor(list(itertools.product((-1, 0, 1), repeat=3)), dtype=torch.long)


@dataclass
class SparseVoxelGrid:
    grid_size: float
    voxel_coords: torch.Tensor  # (M, 3) int64, unique
    point_to_voxel: torch.Tensor  # (N,) int64
    voxel_features: torch.Tensor | None = None

    @property
    def num_voxels(self) -> int:
        return self.voxel_coords.shape[0]

    @property
    def num_points(self) -> int:
        return self.point_to_voxel.shape[0]


def voxelize(points: torch.Tensor, grid_size: float) -> SparseVoxelGrid:
    """Assign every point to ``floor(p / s)`` and merge duplicate voxels."""
    if not grid_size > 0:
        raise ParameterError(f"grid size must be positive, got {grid_size}")
    points = torch.as_tensor(points)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ParameterError(f"expected a non-empty (N, 3) point array, got {tuple(points.shape)}")
    with torch.no_grad():
        coords = torch.floor(points.detach().to(torch.float64) / grid_size).to(torch.long)
        uniq, inverse = torch.unique(coords, dim=0, return_inverse=True)
    return SparseVoxelGrid(float(grid_size), uniq, inverse)


class SparseLevel:
    """Occupied voxels at one resolution plus their 3x3x3 neighbour pairs."""

    def __init__(self, coords: torch.Tensor):
        self.coords = coords
        self.neighbors = _neighbor_table(coords)
        # occupied (output row, input row, offset) triples, flattened
        out_rows, offset = torch.nonzero(self.neighbors >= 0, as_tuple=True)
        self.pair_out = out_rows
        self.pair_src = self.neighbors[out_rows, offset] * 27 + offset

    def __len__(self) -> int:
        return self.coords.shape[0]

    def pool(self) -> tuple["SparseLevel", torch.Tensor]:
        """Stride-2 coarsening; returns the coarse level and child->parent map."""
        parent, inverse = torch.unique(torch.div(self.coords, 2, rounding_mode="floor"), dim=0, return_inverse=True)
        return SparseLevel(parent), inverse


def _neighbor_table(coords: torch.Tensor) -> torch.Tensor:
    # -1 marks an unoccupied neighbour; coords are non-negative here
    m = coords.shape[0]
    base = int(coords.max()) + 3 if m else 3
    shifted = coords + 1

    def key(c):
        return (c[..., 0] * base + c[..., 1]) * base + c[..., 2]

    keys = key(shifted)
    order = torch.argsort(keys)
    sorted_keys = keys[order]
    query = key(shifted.unsqueeze(1) + KERNEL_OFFSETS.unsqueeze(0))  # (M, 27)
    pos = torch.searchsorted(sorted_keys, query.reshape(-1)).clamp_max(max(m - 1, 0))
    found = sorted_keys[pos] == query.reshape(-1)
    idx = torch.where(found, order[pos], torch.full_like(pos, -1))
    return idx.reshape(m, 27)


class SubmanifoldConv3d(nn.Module):
    """3x3x3 convolution evaluated only at occupied voxels.

    ``weight[k]`` is the ``(C_in, C_out)`` slice for kernel offset
    ``KERNEL_OFFSETS[k]``; missing neighbours contribute zero.
    """

    def __init__(self, c_in: int, c_out: int, generator=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        w = torch.empty(c_out, 27 * c_in, dtype=dtype)
        kaiming_uniform_(w, generator)
        self.weight = nn.Parameter(w.T.reshape(27, c_in, c_out).contiguous())
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype))

    def forward(self, feats: torch.Tensor, level: SparseLevel) -> torch.Tensor:
        if feats.shape[1] != self.c_in:
            raise DimensionError(f"sparse conv expects {self.c_in} channels, got {feats.shape[1]}")
        # every voxel's contribution through every offset, then scatter
        per_offset = feats @ self.weight.permute(1, 0, 2).reshape(self.c_in, 27 * self.c_out)
        per_offset = per_offset.reshape(-1, self.c_out)
        out = self.bias.expand(len(level), self.c_out)
        return out.index_add(0, level.pair_out, per_offset[level.pair_src])

    def dense_weight(self) -> torch.Tensor:
        """Equivalent ``conv3d`` weight of shape ``(C_out, C_in, 3, 3, 3)``."""
        return self.weight.permute(2, 1, 0).reshape(self.c_out, self.c_in, 3, 3, 3)


def mean_pool(feats: torch.Tensor, inverse: torch.Tensor, n_parent: int) -> torch.Tensor:
    total = feats.new_zeros(n_parent, feats.shape[1]).index_add(0, inverse, feats)
    count = feats.new_zeros(n_parent).index_add(0, inverse, feats.new_ones(inverse.shape[0]))
    return total / count.unsqueeze(1)


@dataclass
class UNetLevels:
    levels: list[SparseLevel]
    parents: list[torch.Tensor] = field(default_factory=list)
    extent: float = 1.0

    @classmethod
    def build(cls, voxel_coords: torch.Tensor, depth: int = 2, origin=None, extent: float | None = None) -> "UNetLevels":
        """Levels over ``voxel_coords - origin`` (default: the per-axis minimum).

        ``extent`` normalizes the embedded coordinates (default: the largest
        relative coordinate plus one).
        """
        # relative coordinates keep the network translation invariant
        if origin is None:
            origin = voxel_coords.min(dim=0).values
        rel = voxel_coords - torch.as_tensor(origin, dtype=voxel_coords.dtype)
        levels = [SparseLevel(rel)]
        parents = []
        for _ in range(depth):
            coarse, inverse = levels[-1].pool()
            levels.append(coarse)
            parents.append(inverse)
        if extent is None:
            extent = float(rel.max()) + 1.0
        return cls(levels, parents, float(extent))


class ResidualBlock(nn.Module):
    def __init__(self, channels, generator=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = SubmanifoldConv3d(channels, channels, generator, dtype)
        self.conv2 = SubmanifoldConv3d(channels, channels, generator, dtype)

    def forward(self, feats, level):
        h = torch.relu(self.conv1(feats, level))
        return torch.relu(feats + self.conv2(h, level))


class SparseUNet(nn.Module):
    """Embed -> two stride-2 down levels -> residual bottleneck -> two up levels.

    The finest encoder features are concatenated into the last up level.
    """

    def __init__(self, c_in=16, channels=(16, 32, 64), c_out=32, generator=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        c0, c1, c2 = channels
        self.embed = nn.Linear(3, c_in, dtype=dtype)
        kaiming_uniform_(self.embed.weight, generator)
        nn.init.zeros_(self.embed.bias)
        self.enc0 = SubmanifoldConv3d(c_in, c0, generator, dtype)
        self.down1 = SubmanifoldConv3d(c0, c1, generator, dtype)
        self.down2 = SubmanifoldConv3d(c1, c2, generator, dtype)
        self.bottleneck = ResidualBlock(c2, generator, dtype)
        self.up1 = SubmanifoldConv3d(c2, c1, generator, dtype)
        self.up0 = SubmanifoldConv3d(c1 + c0, c_out, generator, dtype)
        self.c_out = c_out

    def layers(self) -> list[nn.Module]:
        """Weighted layers in forward order."""
        b = self.bottleneck
        return [self.embed, self.enc0, self.down1, self.down2, b.conv1, b.conv2, self.up1, self.up0]

    @torch.no_grad()
    def calibrate_(self, voxel_coords: torch.Tensor, levels: UNetLevels | None = None) -> None:
        """Data-dependent init: rescale each layer to unit spread across the given voxels.

        Kaiming bounds assume all 27 neighbours are occupied; on a thin
        surface most are empty and activations shrink layer by layer.  Only
        weights are scaled, so the network is still a plain sparse conv net.
        """
        seen = {}
        hooks = [m.register_forward_hook(lambda mod, _inp, out: seen.__setitem__(mod, out)) for m in self.layers()]
        try:
            for layer in self.layers():
                self.forward(voxel_coords, levels)
                spread = float(seen[layer].std(dim=0).mean()) if seen[layer].shape[0] > 1 else 0.0
                if spread > 0 and math.isfinite(spread):
                    layer.weight.div_(spread)
                    layer.bias.div_(spread)
        finally:
            for h in hooks:
                h.remove()

    def forward(self, voxel_coords: torch.Tensor, levels: UNetLevels | None = None) -> torch.Tensor:
        if levels is None:
            levels = UNetLevels.build(voxel_coords)
        l0, l1, l2 = levels.levels
        p1, p2 = levels.parents
        dtype = self.embed.weight.dtype
        x = self.embed(l0.coords.to(dtype) / levels.extent)
        e0 = torch.relu(self.enc0(x, l0))
        e1 = torch.relu(self.down1(mean_pool(e0, p1, len(l1)), l1))
        e2 = torch.relu(self.down2(mean_pool(e1, p2, len(l2)), l2))
        b = self.bottleneck(e2, l2)
        u1 = torch.relu(self.up1(b[p2], l1))
        return self.up0(torch.cat([u1[p1], e0], dim=1), l0)


def sparse_unet_forward(grid: SparseVoxelGrid, unet: SparseUNet) -> torch.Tensor:
    if grid.num_voxels == 0:
        raise ParameterError("cannot run the U-Net on an empty grid")
    return unet(grid.voxel_coords)


@dataclass
class GeometryFeatures:
    f_identity: torch.Tensor
    f_geometric: torch.Tensor | None
    f_fuse: torch.Tensor


def fuse_features(
    points: torch.Tensor,
    grid: SparseVoxelGrid | None,
    voxel_features: torch.Tensor | None,
    identity_mlp: MLP,
    fusion_mlp: MLP,
) -> GeometryFeatures:
    """Gather voxel features to points and fuse them with the point embedding.

    With ``grid=None`` the geometric branch is ablated and only the identity
    features reach the fusion MLP.
    """
    f_id = forward_mlp(identity_mlp, points)
    if grid is None:
        return GeometryFeatures(f_id, None, forward_mlp(fusion_mlp, f_id))
    if grid.num_points != points.shape[0]:
        raise ConsistencyError(
            f"voxel map covers {grid.num_points} points but {points.shape[0]} were given"
        )
    f_geo = voxel_features[grid.point_to_voxel]
    fused = forward_mlp(fusion_mlp, torch.cat([f_geo, f_id], dim=1))
    return GeometryFeatures(f_id, f_geo, fused)


class GeometryEncoder(nn.Module):
    """Identity branch, optional sparse U-Net branch and fusion MLP.

    The voxel assignment is cached and rebuilt only when some point moved
    more than half a voxel since the last build, or the point count changed.
    The voxel origin and coordinate normalization are fixed at the first
    build and survive rebuilds, so pruning or moving boundary points does
    not shift every voxel's input.
    """

    def __init__(
        self,
        grid_size: float,
        use_geometry: bool = True,
        point_dim: int = 32,
        fuse_dim: int = 64,
        generator=None,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if not grid_size > 0:
            raise ParameterError(f"grid size must be positive, got {grid_size}")
        self.grid_size = float(grid_size)
        self.use_geometry = use_geometry
        self.identity = MLP([3, 64, point_dim], generator=generator, dtype=dtype)
        if use_geometry:
            self.unet = SparseUNet(c_out=point_dim, generator=generator, dtype=dtype)
            fuse_in = 2 * point_dim
        else:
            self.unet = None
            fuse_in = point_dim
        self.fusion = MLP([fuse_in, 64, 64, fuse_dim], generator=generator, dtype=dtype)
        self.out_features = fuse_dim
        self._grid: SparseVoxelGrid | None = None
        self._levels: UNetLevels | None = None
        self._anchor: torch.Tensor | None = None
        self._frame: torch.Tensor | None = None  # (origin x, y, z, extent)
        self.calibrate = True  # rescale the U-Net on the first voxelization
        self.rebuilds = 0

    def invalidate(self) -> None:
        self._grid = self._levels = self._anchor = None

    @property
    def frame(self) -> torch.Tensor | None:
        return self._frame

    def set_frame(self, frame) -> None:
        self.invalidate()
        self._frame = None if frame is None else torch.as_tensor(frame, dtype=torch.float64).reshape(4).clone()

    @property
    def anchor(self) -> torch.Tensor | None:
        return self._anchor

    def set_anchor(self, anchor: torch.Tensor | None) -> None:
        self.invalidate()
        if anchor is not None:
            self._rebuild(anchor)

    def _rebuild(self, positions: torch.Tensor) -> None:
        self._anchor = positions.detach().clone()
        self._grid = voxelize(self._anchor, self.grid_size)
        coords = self._grid.voxel_coords
        first = self._frame is None
        if first:
            lo = coords.min(dim=0).values
            extent = float((coords - lo).max()) + 1.0
            self._frame = torch.cat([lo.to(torch.float64), torch.tensor([extent], dtype=torch.float64)])
        origin = self._frame[:3].round().to(torch.long)
        self._levels = UNetLevels.build(coords, origin=origin, extent=float(self._frame[3]))
        if first and self.calibrate:
            self.unet.calibrate_(coords, self._levels)
        self.rebuilds += 1

    def grid_for(self, positions: torch.Tensor) -> SparseVoxelGrid:
        stale = (
            self._anchor is None
            or self._anchor.shape != positions.shape
            or bool((positions.detach() - self._anchor).abs().max() > 0.5 * self.grid_size)
        )
        if stale:
            self._rebuild(positions)
        return self._grid

    def forward(self, positions: torch.Tensor) -> GeometryFeatures:
        if not self.use_geometry:
            return fuse_features(positions, None, None, self.identity, self.fusion)
        grid = self.grid_for(positions)
        voxel_feats = self.unet(grid.voxel_coords, self._levels)
        return fuse_features(positions, grid, voxel_feats, self.identity, self.fusion)
