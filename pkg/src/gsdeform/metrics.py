"""Image quality metrics (PSNR, SSIM), differentiable where it matters."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_INF = math.inf


def _as_image(x, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    return t if dtype is None else t.to(dtype)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ContractError(f"expected H x W x 3 images, got {tuple(a.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over the valid (unpadded) region, shape ``(3, H-10, W-10)``."""
    a = a.permute(2, 0, 1).unsqueeze(1)  # (3, 1, H, W)
    b = b.permute(2, 0, 1).unsqueeze(1)
    g = gaussian_window(dtype=a.dtype)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")

    def blur(x):
        x = F.conv2d(x, g.reshape(1, 1, 1, -1))
        return F.conv2d(x, g.reshape(1, 1, -1, 1))

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).squeeze(1)


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_pair(a, b)
    return ssim_map(a, b).mean()


def ssim(a, b) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range."""
    a, b = _as_image(a, torch.float64), _as_image(b, torch.float64)
    _check_pair(a, b)
    if torch.equal(a, b):
        return 1.0
    return float(ssim_map(a, b).mean())


def mse(a, b) -> float:
    a, b = _as_image(a, torch.float64), _as_image(b, torch.float64)
    _check_pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; ``inf`` once the MSE drops below 1e-12."""
    err = mse(a, b)
    if err < 1e-12:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)
