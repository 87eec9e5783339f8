"""Per-pixel compositing kernels (numba).

Splats are given as screen-space means, conics ``(A, B, C)`` with
``q = A dx^2 + 2 B dx dy + C dy^2``, RGB colors and peak opacities.  Each
tile walks its depth-sorted splat list front to back; the backward kernel
walks it back to front, recovering transmittance by division.
"""
from math import exp

import numpy as np
from numba import njit

T_MIN = 1e-4
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
Q_MAX = 9.0


@njit(cache=True)
def composite_forward(mean, conic, color, opac, tile_start, tile_end, tile_list,
                      width, height, tile_w, tile_h, n_tiles_x, bg,
                      image, t_final, n_contrib):
    for tile in range(tile_start.shape[0]):
        x_lo = (tile % n_tiles_x) * tile_w
        y_lo = (tile // n_tiles_x) * tile_h
        for py in range(y_lo, min(y_lo + tile_h, height)):
            for px in range(x_lo, min(x_lo + tile_w, width)):
                cx = px + 0.5
                cy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = tile_start[tile]
                for k in range(tile_start[tile], tile_end[tile]):
                    if T < T_MIN:
                        break
                    i = tile_list[k]
                    dx = cx - mean[i, 0]
                    dy = cy - mean[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if q > Q_MAX:
                        continue
                    a = opac[i] * exp(-0.5 * q)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = T * a
                    r += w * color[i, 0]
                    g += w * color[i, 1]
                    b += w * color[i, 2]
                    T *= 1.0 - a
                    last = k + 1
                image[py, px, 0] = r + T * bg[0]
                image[py, px, 1] = g + T * bg[1]
                image[py, px, 2] = b + T * bg[2]
                t_final[py, px] = T
                n_contrib[py, px] = last


@njit(cache=True)
def composite_backward(mean, conic, color, opac, tile_start, tile_list,
                       width, height, tile_w, tile_h, n_tiles_x, bg,
                       t_final, n_contrib, grad_image,
                       g_mean, g_conic, g_color, g_opac):
    for tile in range(tile_start.shape[0]):
        x_lo = (tile % n_tiles_x) * tile_w
        y_lo = (tile // n_tiles_x) * tile_h
        first = tile_start[tile]
        for py in range(y_lo, min(y_lo + tile_h, height)):
            for px in range(x_lo, min(x_lo + tile_w, width)):
                cx = px + 0.5
                cy = py + 0.5
                T = t_final[py, px]
                g0 = grad_image[py, px, 0]
                g1 = grad_image[py, px, 1]
                g2 = grad_image[py, px, 2]
                # light arriving from behind splat i, per channel
                s0 = T * bg[0]
                s1 = T * bg[1]
                s2 = T * bg[2]
                for k in range(n_contrib[py, px] - 1, first - 1, -1):
                    i = tile_list[k]
                    dx = cx - mean[i, 0]
                    dy = cy - mean[i, 1]
                    A = conic[i, 0]
                    B = conic[i, 1]
                    C = conic[i, 2]
                    q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                    if q > Q_MAX:
                        continue
                    G = exp(-0.5 * q)
                    a = opac[i] * G
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    one_minus = 1.0 - a
                    T = T / one_minus
                    w = T * a
                    c0 = color[i, 0]
                    c1 = color[i, 1]
                    c2 = color[i, 2]
                    g_color[i, 0] += w * g0
                    g_color[i, 1] += w * g1
                    g_color[i, 2] += w * g2
                    d_alpha = (g0 * (T * c0 - s0 / one_minus)
                               + g1 * (T * c1 - s1 / one_minus)
                               + g2 * (T * c2 - s2 / one_minus))
                    s0 += w * c0
                    s1 += w * c1
                    s2 += w * c2
                    if clamped:
                        continue
                    g_opac[i] += d_alpha * G
                    d_q = -0.5 * a * d_alpha
                    g_conic[i, 0] += d_q * dx * dx
                    g_conic[i, 1] += d_q * 2.0 * dx * dy
                    g_conic[i, 2] += d_q * dy * dy
                    g_mean[i, 0] += d_q * -2.0 * (A * dx + B * dy)
                    g_mean[i, 1] += d_q * -2.0 * (B * dx + C * dy)


def allocate_outputs(height, width, dtype):
    return (
        np.zeros((height, width, 3), dtype=dtype),
        np.zeros((height, width), dtype=dtype),
        np.zeros((height, width), dtype=np.int64),
    )
