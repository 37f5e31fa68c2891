"""Tile-based front-to-back compositing kernels (numba).

Each tile owns its pixels and its slice of the depth-sorted entry list, so
both passes are race-free and bit-identical at any thread count. Per-entry
gradients are reduced to per-Gaussian totals in entry order.
"""
from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

TILE = 16
CUTOFF = -4.5  # exponent at the 3-sigma ellipse
SIGMA_CAP = 0.99
N_GEOM_GRADS = 6  # mean x, mean y, conic a, b, c, opacity


def set_threads(n: int) -> int:
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def bin_gaussians(means2d, cov2d, depths, valid, width, height, tile=TILE):
    """Depth-sorted (tile, gaussian) entries.

    Returns ``entries`` (E,) gaussian ids and ``tile_start`` (T+1,) offsets.
    Bounds use the axis-aligned extent of the 3-sigma ellipse plus one pixel.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ids = np.flatnonzero(valid)
    mx, my = means2d[ids, 0], means2d[ids, 1]
    rx = 3.0 * np.sqrt(cov2d[ids, 0, 0])
    ry = 3.0 * np.sqrt(cov2d[ids, 1, 1])
    px0 = np.ceil(mx - rx - 0.5) - 1
    px1 = np.floor(mx + rx - 0.5) + 1
    py0 = np.ceil(my - ry - 0.5) - 1
    py1 = np.floor(my + ry - 0.5) + 1
    on = (px1 >= 0) & (px0 <= width - 1) & (py1 >= 0) & (py0 <= height - 1)
    ids = ids[on]
    tx0 = (np.clip(px0[on], 0, width - 1) // tile).astype(np.int64)
    tx1 = (np.clip(px1[on], 0, width - 1) // tile).astype(np.int64)
    ty0 = (np.clip(py0[on], 0, height - 1) // tile).astype(np.int64)
    ty1 = (np.clip(py1[on], 0, height - 1) // tile).astype(np.int64)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    tile_ids, gauss = _expand(ids, tx0, tx1, ty0, ty1, counts, tiles_x)
    order = np.lexsort((gauss, depths[gauss], tile_ids))
    entries = gauss[order]
    tile_start = np.searchsorted(tile_ids[order], np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return entries, tile_start


@njit(cache=True)
def _expand(ids, tx0, tx1, ty0, ty1, counts, tiles_x):
    total = counts.sum()
    tile_ids = np.empty(total, dtype=np.int64)
    gauss = np.empty(total, dtype=np.int64)
    k = 0
    for i in range(len(ids)):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                tile_ids[k] = ty * tiles_x + tx
                gauss[k] = ids[i]
                k += 1
    return tile_ids, gauss


@njit(parallel=True, cache=True)
def raster_forward(means2d, conics, opac, feats, bg, entries, tile_start, width, height, tile):
    k_ch = feats.shape[1]
    out = np.empty((height, width, k_ch))
    trans = np.empty((height, width))
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        s0, s1 = tile_start[t], tile_start[t + 1]
        acc = np.empty(k_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                acc[:] = 0.0
                for e in range(s0, s1):
                    g = entries[e]
                    dx = fx - means2d[g, 0]
                    dy = fy - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power < CUTOFF:
                        continue
                    a = opac[g] * np.exp(power)
                    sig = min(a, SIGMA_CAP)
                    w = sig * T
                    for k in range(k_ch):
                        acc[k] += feats[g, k] * w
                    T *= 1.0 - sig
                for k in range(k_ch):
                    out[py, px, k] = acc[k] + T * bg[k]
                trans[py, px] = T
    return out, trans


@njit(parallel=True, cache=True)
def raster_backward(
    means2d, conics, opac, feats, bg, entries, tile_start, width, height, tile,
    out, trans, d_out, d_alpha,
):
    k_ch = feats.shape[1]
    n_ent = entries.shape[0]
    g_ent = np.zeros((n_ent, N_GEOM_GRADS + k_ch))
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        s0, s1 = tile_start[t], tile_start[t + 1]
        fg = np.empty(k_ch)
        acc = np.empty(k_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                t_final = trans[py, px]
                for k in range(k_ch):
                    fg[k] = out[py, px, k] - t_final * bg[k]
                acc[:] = 0.0
                da = d_alpha[py, px]
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                for e in range(s0, s1):
                    g = entries[e]
                    dx = fx - means2d[g, 0]
                    dy = fy - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power < CUTOFF:
                        continue
                    gval = np.exp(power)
                    a = opac[g] * gval
                    sig = min(a, SIGMA_CAP)
                    w = sig * T
                    inv = 1.0 / (1.0 - sig)
                    d_sig = da * t_final * inv
                    for k in range(k_ch):
                        acc[k] += feats[g, k] * w
                        dc = d_out[py, px, k]
                        d_sig += dc * (T * feats[g, k] - (fg[k] - acc[k] + bg[k] * t_final) * inv)
                        g_ent[e, N_GEOM_GRADS + k] += dc * w
                    if a < SIGMA_CAP:
                        g_ent[e, 5] += d_sig * gval
                        d_pow = d_sig * a
                        g_ent[e, 0] += d_pow * (conics[g, 0] * dx + conics[g, 1] * dy)
                        g_ent[e, 1] += d_pow * (conics[g, 1] * dx + conics[g, 2] * dy)
                        g_ent[e, 2] += -0.5 * dx * dx * d_pow
                        g_ent[e, 3] += -dx * dy * d_pow
                        g_ent[e, 4] += -0.5 * dy * dy * d_pow
                    T *= 1.0 - sig
    return g_ent


@njit(cache=True)
def reduce_entries(entries, g_ent, n_gauss):
    out = np.zeros((n_gauss, g_ent.shape[1]))
    for e in range(entries.shape[0]):
        out[entries[e]] += g_ent[e]
    return out
