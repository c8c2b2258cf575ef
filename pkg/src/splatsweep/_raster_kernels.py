"""Numba kernels for per-pixel splat compositing.

Splats are binned into square tiles after a global depth sort; each tile
holds the indices of the splats that may touch it, front to back. Kernels
process a contiguous range of tiles so callers can hand disjoint ranges to
worker threads (the kernels release the GIL).

The backward kernel writes one gradient row per (tile, splat) pair; rows are
reduced afterwards in a fixed order, which keeps results bit-identical for
any number of workers.
"""

import numpy as np
from numba import njit

# columns of the per-pair gradient buffer
G_MX, G_MY, G_CA, G_CB, G_CC, G_R, G_G, G_B, G_OP = range(9)
N_GRAD = 9


@njit(cache=True, nogil=True)
def bin_splats(order, tile_lo, tile_hi, n_tiles_x, n_tiles):
    """Tile lists for splats visited in ``order``; tile boxes are inclusive."""
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in order:
        for ty in range(tile_lo[i, 1], tile_hi[i, 1] + 1):
            for tx in range(tile_lo[i, 0], tile_hi[i, 0] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in order:
        for ty in range(tile_lo[i, 1], tile_hi[i, 1] + 1):
            for tx in range(tile_lo[i, 0], tile_hi[i, 0] + 1):
                t = ty * n_tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return offsets, ids


@njit(cache=True, nogil=True)
def forward_tiles(
    t0, t1, offsets, ids, means, conics, colors, opac, bg,
    width, height, tile, n_tiles_x, cutoff2, min_alpha, max_alpha, min_t,
    out_rgb, out_alpha, out_count,
):
    for t in range(t0, t1):
        lo, hi = offsets[t], offsets[t + 1]
        x0 = (t % n_tiles_x) * tile
        y0 = (t // n_tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile, width)):
                fx = px + 0.5
                tr = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n = 0
                for k in range(lo, hi):
                    i = ids[k]
                    dx = fx - means[i, 0]
                    dy = fy - means[i, 1]
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    if cutoff2 >= 0.0 and q > cutoff2:
                        continue
                    a = opac[i] * np.exp(-0.5 * q)
                    if a > max_alpha:
                        a = max_alpha
                    if a < min_alpha:
                        continue
                    w = a * tr
                    c0 += w * colors[i, 0]
                    c1 += w * colors[i, 1]
                    c2 += w * colors[i, 2]
                    tr *= 1.0 - a
                    n += 1
                    if tr < min_t:
                        break
                out_rgb[py, px, 0] = c0 + tr * bg[0]
                out_rgb[py, px, 1] = c1 + tr * bg[1]
                out_rgb[py, px, 2] = c2 + tr * bg[2]
                out_alpha[py, px] = 1.0 - tr
                out_count[py, px] = n


@njit(cache=True, nogil=True)
def backward_tiles(
    t0, t1, offsets, ids, means, conics, colors, opac, bg,
    width, height, tile, n_tiles_x, cutoff2, min_alpha, max_alpha, min_t,
    grad_rgb, grad_alpha, pair_grads,
):
    """Per-pair gradients of the composite w.r.t. 2D mean, conic, color, opacity."""
    max_len = 0
    for t in range(t0, t1):
        if offsets[t + 1] - offsets[t] > max_len:
            max_len = offsets[t + 1] - offsets[t]
    used = np.empty(max_len, dtype=np.int64)
    alphas = np.empty(max_len)
    trans = np.empty(max_len)
    gauss = np.empty(max_len)
    clamped = np.empty(max_len, dtype=np.bool_)
    for t in range(t0, t1):
        lo, hi = offsets[t], offsets[t + 1]
        x0 = (t % n_tiles_x) * tile
        y0 = (t // n_tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile, width)):
                fx = px + 0.5
                g0 = grad_rgb[py, px, 0]
                g1 = grad_rgb[py, px, 1]
                g2 = grad_rgb[py, px, 2]
                ga = grad_alpha[py, px]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0 and ga == 0.0:
                    continue
                # replay the forward pass, remembering contributors
                tr = 1.0
                n = 0
                for k in range(lo, hi):
                    i = ids[k]
                    dx = fx - means[i, 0]
                    dy = fy - means[i, 1]
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    if cutoff2 >= 0.0 and q > cutoff2:
                        continue
                    g = np.exp(-0.5 * q)
                    a = opac[i] * g
                    cl = False
                    if a > max_alpha:
                        a = max_alpha
                        cl = True
                    if a < min_alpha:
                        continue
                    used[n] = k
                    alphas[n] = a
                    trans[n] = tr
                    gauss[n] = g
                    clamped[n] = cl
                    tr *= 1.0 - a
                    n += 1
                    if tr < min_t:
                        break
                # back to front; r* is the colour composited behind the splat
                r0 = bg[0]
                r1 = bg[1]
                r2 = bg[2]
                ra = 0.0
                for m in range(n - 1, -1, -1):
                    k = used[m]
                    i = ids[k]
                    a = alphas[m]
                    tm = trans[m]
                    ci0 = colors[i, 0]
                    ci1 = colors[i, 1]
                    ci2 = colors[i, 2]
                    w = a * tm
                    pair_grads[k, G_R] += g0 * w
                    pair_grads[k, G_G] += g1 * w
                    pair_grads[k, G_B] += g2 * w
                    if not clamped[m]:
                        da = tm * (g0 * (ci0 - r0) + g1 * (ci1 - r1) + g2 * (ci2 - r2) + ga * (1.0 - ra))
                        dx = fx - means[i, 0]
                        dy = fy - means[i, 1]
                        pair_grads[k, G_OP] += da * gauss[m]
                        dq = -0.5 * a * da
                        pair_grads[k, G_CA] += dq * dx * dx
                        pair_grads[k, G_CB] += dq * 2.0 * dx * dy
                        pair_grads[k, G_CC] += dq * dy * dy
                        pair_grads[k, G_MX] += dq * -2.0 * (conics[i, 0] * dx + conics[i, 1] * dy)
                        pair_grads[k, G_MY] += dq * -2.0 * (conics[i, 1] * dx + conics[i, 2] * dy)
                    r0 = ci0 * a + (1.0 - a) * r0
                    r1 = ci1 * a + (1.0 - a) * r1
                    r2 = ci2 * a + (1.0 - a) * r2
                    ra = a + (1.0 - a) * ra


@njit(cache=True, nogil=True)
def reduce_pairs(ids, pair_grads, n_splats):
    out = np.zeros((n_splats, N_GRAD))
    for k in range(len(ids)):
        i = ids[k]
        for c in range(N_GRAD):
            out[i, c] += pair_grads[k, c]
    return out
