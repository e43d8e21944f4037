"""Numba compositing kernels for the tile rasterizer.

Tiles are processed strictly in order and pixels sequentially, so forward and
backward results are bit-reproducible regardless of thread settings. The
backward kernel re-runs the per-pixel forward walk to recover transmittances,
then accumulates adjoints back-to-front.
"""
import numpy as np
from numba import njit

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_TERMINATE = 1e-4


@njit(cache=True)
def composite_forward(
    height, width, tile_size,
    tile_offsets, tile_ids,          # CSR layout: gaussians per tile, depth-sorted
    means2d, conics, colors, alphas, # per-gaussian projected quantities
    background,
    out_rgb, out_alpha,
):
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        start = tile_offsets[tile]
        stop = tile_offsets[tile + 1]
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for s in range(start, stop):
                    gi = tile_ids[s]
                    dx = px - means2d[gi, 0]
                    dy = py - means2d[gi, 1]
                    power = -0.5 * (conics[gi, 0] * dx * dx + conics[gi, 2] * dy * dy) \
                            - conics[gi, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = alphas[gi] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_TERMINATE:
                        break
                    w = alpha * T
                    r += colors[gi, 0] * w
                    g += colors[gi, 1] * w
                    b += colors[gi, 2] * w
                    T = test_T
                out_rgb[py, px, 0] = r + T * background[0]
                out_rgb[py, px, 1] = g + T * background[1]
                out_rgb[py, px, 2] = b + T * background[2]
                out_alpha[py, px] = 1.0 - T


@njit(cache=True)
def composite_backward(
    height, width, tile_size,
    tile_offsets, tile_ids,
    means2d, conics, colors, alphas,
    background, grad_image,
    grad_mean2d, grad_conic, grad_alpha, grad_color,
):
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_offsets.shape[0] - 1
    max_per_tile = 0
    for tile in range(n_tiles):
        c = tile_offsets[tile + 1] - tile_offsets[tile]
        if c > max_per_tile:
            max_per_tile = c
    contrib_idx = np.empty(max_per_tile, dtype=np.int64)
    contrib_alpha = np.empty(max_per_tile, dtype=np.float64)
    contrib_clamped = np.empty(max_per_tile, dtype=np.uint8)

    for tile in range(n_tiles):
        start = tile_offsets[tile]
        stop = tile_offsets[tile + 1]
        if stop == start:
            continue
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                # forward walk, recording every composited splat
                T = 1.0
                m = 0
                for s in range(start, stop):
                    gi = tile_ids[s]
                    dx = px - means2d[gi, 0]
                    dy = py - means2d[gi, 1]
                    power = -0.5 * (conics[gi, 0] * dx * dx + conics[gi, 2] * dy * dy) \
                            - conics[gi, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = alphas[gi] * np.exp(power)
                    clamped = alpha > ALPHA_CLAMP
                    if clamped:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_TERMINATE:
                        break
                    contrib_idx[m] = gi
                    contrib_alpha[m] = alpha
                    contrib_clamped[m] = 1 if clamped else 0
                    m += 1
                    T = test_T
                if m == 0:
                    continue
                gr = grad_image[py, px, 0]
                gg = grad_image[py, px, 1]
                gb = grad_image[py, px, 2]
                # suffix contribution S and transmittance, walked back-to-front
                s_r = background[0] * T
                s_g = background[1] * T
                s_b = background[2] * T
                T_run = T
                for k in range(m - 1, -1, -1):
                    gi = contrib_idx[k]
                    a = contrib_alpha[k]
                    one_m = 1.0 - a
                    T_run = T_run / one_m  # transmittance in front of splat k
                    w = a * T_run
                    grad_color[gi, 0] += gr * w
                    grad_color[gi, 1] += gg * w
                    grad_color[gi, 2] += gb * w
                    # dC/dalpha_hat = c * T - S / (1 - alpha_hat)
                    d_ahat = gr * (colors[gi, 0] * T_run - s_r / one_m) \
                           + gg * (colors[gi, 1] * T_run - s_g / one_m) \
                           + gb * (colors[gi, 2] * T_run - s_b / one_m)
                    s_r += colors[gi, 0] * w
                    s_g += colors[gi, 1] * w
                    s_b += colors[gi, 2] * w
                    if contrib_clamped[k] == 1:
                        continue
                    dx = px - means2d[gi, 0]
                    dy = py - means2d[gi, 1]
                    # alpha_hat = alpha * exp(power); d power paths
                    grad_alpha[gi] += d_ahat * (a / alphas[gi])
                    d_power = d_ahat * a
                    grad_conic[gi, 0] += d_power * (-0.5 * dx * dx)
                    grad_conic[gi, 1] += d_power * (-dx * dy)
                    grad_conic[gi, 2] += d_power * (-0.5 * dy * dy)
                    grad_mean2d[gi, 0] += d_power * (conics[gi, 0] * dx + conics[gi, 1] * dy)
                    grad_mean2d[gi, 1] += d_power * (conics[gi, 1] * dx + conics[gi, 2] * dy)
