"""Differentiable software tile rasterizer for 3D Gaussians.

Gaussians are projected with the local affine (EWA) approximation of the
perspective map, globally depth sorted, binned into 16x16 pixel tiles by a
3-sigma ellipse/tile test and alpha-composited front to back.  The forward
pass is written with torch ops so autograd supplies exact gradients.

Pixel ``(row v, col u)`` has its centre at image coordinates ``(u + .5, v + .5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _composite
from .deformation import DeformedGaussians
from .errors import ContractError, ParameterError
from .gaussians import covariance_from_matrix, eval_sh_color

TILE_SIZE = 16
ALPHA_MAX = _composite.ALPHA_MAX
ALPHA_MIN = _composite.ALPHA_MIN
T_MIN = _composite.T_MIN
DILATION = 0.3
SIGMA_CUTOFF = 3.0
_Q_MAX = _composite.Q_MAX


@dataclass
class Camera:
    """Pinhole camera; ``world_to_camera`` follows the +z-forward, +y-down convention."""

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ParameterError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image dimensions must be positive")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ParameterError("camera rotation is not a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_x, width, height, near=0.01, far=100.0) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        f = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(f, f, width / 2.0, height / 2.0, w2c, width, height, near, far)


@dataclass
class Splats:
    """Screen-space splats for the Gaussians that survived culling."""

    mean2d: torch.Tensor  # (n, 2)
    cov2d: torch.Tensor  # (n, 2, 2), dilated
    depth: torch.Tensor  # (n,)
    color: torch.Tensor  # (n, 3)
    opacity: torch.Tensor  # (n,)
    index: torch.Tensor  # (n,) rows of the source Gaussian set
    num_source: int = 0

    def __len__(self) -> int:
        return self.mean2d.shape[0]


def project_covariance(cov3d: torch.Tensor, view_rotation: torch.Tensor, jacobian: torch.Tensor) -> torch.Tensor:
    """``J W Sigma W^T J^T`` (no dilation)."""
    M = jacobian @ view_rotation
    return M @ cov3d @ M.transpose(-1, -2)


def perspective_jacobian(p_cam: torch.Tensor, fx: float, fy: float) -> torch.Tensor:
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zero = torch.zeros_like(z)
    inv_z = 1.0 / z
    row0 = torch.stack([fx * inv_z, zero, -fx * x * inv_z * inv_z], dim=1)
    row1 = torch.stack([zero, fy * inv_z, -fy * y * inv_z * inv_z], dim=1)
    return torch.stack([row0, row1], dim=1)


def project(gaussians: DeformedGaussians, cam: Camera) -> Splats:
    """Project to the image plane; drops Gaussians outside (near, far) or off-screen."""
    dtype = gaussians.positions.dtype
    R = torch.as_tensor(cam.rotation, dtype=dtype)
    T = torch.as_tensor(cam.translation, dtype=dtype)
    n = len(gaussians)
    with torch.no_grad():
        z_all = gaussians.positions.detach() @ R[2] + T[2]
        keep = (z_all > cam.near) & (z_all < cam.far)
    idx = torch.nonzero(keep).reshape(-1)
    pos = gaussians.positions[idx]
    p_cam = pos @ R.T + T
    z = p_cam[:, 2]
    mean2d = torch.stack([cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy], dim=1)
    cov3d = covariance_from_matrix(gaussians.rotations[idx], gaussians.scales[idx])
    J = perspective_jacobian(p_cam, cam.fx, cam.fy)
    cov2d = project_covariance(cov3d, R, J)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=dtype)
    center = torch.as_tensor(cam.center, dtype=dtype)
    dirs = pos - center
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=1, keepdim=True)
    color = eval_sh_color(gaussians.sh[idx], dirs)
    splats = Splats(mean2d, cov2d, z, color, gaussians.opacities[idx], idx, n)
    with torch.no_grad():
        radius = SIGMA_CUTOFF * torch.sqrt(torch.linalg.eigvalsh(cov2d.detach())[:, 1].clamp_min(0))
        m = mean2d.detach()
        onscreen = (
            (m[:, 0] + radius > 0)
            & (m[:, 0] - radius < cam.width)
            & (m[:, 1] + radius > 0)
            & (m[:, 1] - radius < cam.height)
        )
    return select_splats(splats, torch.nonzero(onscreen).reshape(-1))


def select_splats(splats: Splats, rows: torch.Tensor) -> Splats:
    return Splats(
        splats.mean2d[rows],
        splats.cov2d[rows],
        splats.depth[rows],
        splats.color[rows],
        splats.opacity[rows],
        splats.index[rows],
        splats.num_source,
    )


@dataclass
class RenderResult:
    image: torch.Tensor  # (H, W, 3)
    transmittance: torch.Tensor  # (H, W)
    splats: Splats
    diagnostics: dict = field(default_factory=dict)


def _conics(cov2d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    ok = torch.isfinite(det) & (det > 0)
    safe = torch.where(ok, det, torch.ones_like(det))
    conic = torch.stack([c / safe, -b / safe, a / safe], dim=1)
    return conic, ok


def _ellipse_rect_min(mean, conic, x0, y0, x1, y1):
    """Minimum of ``d^T Q d`` over axis-aligned rectangles, for every (splat, rect)."""
    A = conic[:, 0:1]
    B = conic[:, 1:2]
    C = conic[:, 2:3]
    lx = x0.unsqueeze(0) - mean[:, 0:1]
    hx = x1.unsqueeze(0) - mean[:, 0:1]
    ly = y0.unsqueeze(0) - mean[:, 1:2]
    hy = y1.unsqueeze(0) - mean[:, 1:2]
    inside = (lx <= 0) & (hx >= 0) & (ly <= 0) & (hy >= 0)

    def q(dx, dy):
        return A * dx * dx + 2 * B * dx * dy + C * dy * dy

    best = torch.full_like(lx, math.inf)
    for dx in (lx, hx):
        dy = torch.minimum(torch.maximum(-B * dx / C, ly), hy)
        best = torch.minimum(best, q(dx, dy))
    for dy in (ly, hy):
        dx = torch.minimum(torch.maximum(-B * dy / A, lx), hx)
        best = torch.minimum(best, q(dx, dy))
    return torch.where(inside, torch.zeros_like(best), best)


class _Composite(torch.autograd.Function):
    """Autograd bridge around the numba compositing kernels."""

    @staticmethod
    def forward(ctx, mean, conic, color, opacity, bins, bg, cam_dims):
        tile_start, tile_end, tile_list, tile_w, tile_h, n_tiles_x = bins
        width, height = cam_dims
        np_dtype = np.float64 if mean.dtype == torch.float64 else np.float32
        arrays = [np.ascontiguousarray(t.detach().numpy()) for t in (mean, conic, color, opacity, bg)]
        image, t_final, n_contrib = _composite.allocate_outputs(height, width, np_dtype)
        _composite.composite_forward(
            *arrays[:4], tile_start, tile_end, tile_list,
            width, height, tile_w, tile_h, n_tiles_x, arrays[4], image, t_final, n_contrib,
        )
        ctx.arrays = arrays
        ctx.bins = bins
        ctx.cam_dims = cam_dims
        ctx.state = (t_final, n_contrib)
        t_out = torch.from_numpy(t_final)
        ctx.mark_non_differentiable(t_out)
        return torch.from_numpy(image), t_out

    @staticmethod
    def backward(ctx, grad_image, _grad_t):
        mean, conic, color, opacity, bg = ctx.arrays
        tile_start, _, tile_list, tile_w, tile_h, n_tiles_x = ctx.bins
        width, height = ctx.cam_dims
        t_final, n_contrib = ctx.state
        g_mean, g_conic, g_color, g_opac = (np.zeros_like(a) for a in (mean, conic, color, opacity))
        grad = np.ascontiguousarray(grad_image.detach().numpy().astype(mean.dtype, copy=False))
        _composite.composite_backward(
            mean, conic, color, opacity, tile_start, tile_list,
            width, height, tile_w, tile_h, n_tiles_x, bg,
            t_final, n_contrib, grad, g_mean, g_conic, g_color, g_opac,
        )
        out = [torch.from_numpy(g) for g in (g_mean, g_conic, g_color, g_opac)]
        return (*out, None, None, None)


def bin_splats(mean2d, conic, depth, width, height, tile_size):
    """Depth-sorted per-tile splat lists (CSR layout) from the 3-sigma ellipse/tile test."""
    if tile_size is None:
        tw, th = width, height
    else:
        tw = th = int(tile_size)
    nx, ny = -(-width // tw), -(-height // th)
    order = torch.argsort(depth, stable=True)
    tx = torch.arange(nx).repeat(ny)
    ty = torch.arange(ny).repeat_interleave(nx)
    dtype = mean2d.dtype
    # pixel-centre extent of every tile, clipped to the image
    x0 = (tx * tw).to(dtype) + 0.5
    y0 = (ty * th).to(dtype) + 0.5
    x1 = torch.clamp((tx + 1) * tw, max=width).to(dtype) - 0.5
    y1 = torch.clamp((ty + 1) * th, max=height).to(dtype) - 0.5
    qmin = _ellipse_rect_min(mean2d[order], conic[order], x0, y0, x1, y1)
    hits = (qmin <= _Q_MAX * (1 + 1e-9) + 1e-9).T  # (tiles, n) in depth order
    tile_idx, pos = torch.nonzero(hits, as_tuple=True)
    counts = torch.bincount(tile_idx, minlength=nx * ny)
    tile_end = torch.cumsum(counts, 0)
    tile_start = tile_end - counts
    tile_list = order[pos]
    return (
        tile_start.numpy().astype(np.int64),
        tile_end.numpy().astype(np.int64),
        tile_list.numpy().astype(np.int64),
        tw,
        th,
        nx,
    )


def rasterize(
    splats: Splats,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    tile_size: int | None = TILE_SIZE,
) -> RenderResult:
    """Front-to-back alpha compositing over tiles.

    ``tile_size=None`` treats the whole image as one tile; the result is
    bit-identical to the tiled one.  Splats whose dilated covariance is not
    invertible are skipped and counted in ``diagnostics["singular"]``.
    """
    H, W = cam.height, cam.width
    dtype = splats.mean2d.dtype
    bg = torch.as_tensor(background, dtype=dtype).reshape(3)
    conic, ok = _conics(splats.cov2d)
    n_singular = int((~ok).sum())
    if n_singular:
        rows = torch.nonzero(ok).reshape(-1)
        splats = select_splats(splats, rows)
        conic = conic[rows]
    if len(splats) == 0:
        image = bg.expand(H, W, 3).clone()
        diagnostics = {"singular": n_singular, "rendered": 0, "tile_pairs": 0}
        return RenderResult(image, torch.ones(H, W, dtype=dtype), splats, diagnostics)
    with torch.no_grad():
        bins = bin_splats(splats.mean2d.detach(), conic.detach(), splats.depth.detach(), W, H, tile_size)
    image, t_final = _Composite.apply(
        splats.mean2d, conic, splats.color, splats.opacity, bins, bg, (W, H)
    )
    diagnostics = {"singular": n_singular, "rendered": len(splats), "tile_pairs": int(bins[2].shape[0])}
    return RenderResult(image, t_final, splats, diagnostics)


def render(
    gaussians: DeformedGaussians,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    tile_size: int | None = TILE_SIZE,
) -> RenderResult:
    return rasterize(project(gaussians, cam), cam, background, tile_size)


def rasterize_backward(result: RenderResult, grad_image: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of ``<grad_image, image>`` w.r.t. every splat field.

    Also returns ``mean2d_norm``: per source Gaussian, the norm of the
    screen-space mean gradient in normalized device units (pixel gradient
    scaled by half the image size), as used by density control.
    """
    image = result.image
    grad_image = torch.as_tensor(grad_image, dtype=image.dtype)
    if grad_image.shape != image.shape:
        raise ContractError(f"gradient shape {tuple(grad_image.shape)} != image {tuple(image.shape)}")
    if not image.requires_grad:
        raise ContractError("render result carries no autograd state")
    sp = result.splats
    fields = {"mean2d": sp.mean2d, "cov2d": sp.cov2d, "color": sp.color, "opacity": sp.opacity}
    live = {k: v for k, v in fields.items() if v.requires_grad}
    try:
        grads = torch.autograd.grad(image, list(live.values()), grad_image, retain_graph=True, allow_unused=True)
    except RuntimeError as exc:
        raise ContractError(f"forward state no longer available: {exc}") from exc
    out = {k: torch.zeros_like(v) for k, v in fields.items()}
    for k, g in zip(live, grads):
        if g is not None:
            out[k] = g
    H, W = image.shape[:2]
    out["mean2d_norm"] = screen_grad_norm(out["mean2d"], sp, W, H)
    return out


def screen_grad_norm(grad_mean2d: torch.Tensor, splats: Splats, width: int, height: int) -> torch.Tensor:
    scale = torch.tensor([0.5 * width, 0.5 * height], dtype=grad_mean2d.dtype)
    norms = torch.linalg.vector_norm(grad_mean2d * scale, dim=1)
    acc = torch.zeros(splats.num_source, dtype=grad_mean2d.dtype)
    return acc.index_add(0, splats.index, norms)
