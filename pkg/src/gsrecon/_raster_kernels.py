"""Numba kernels for the tiled splatting rasterizer.

Pixels composite front to back over depth-sorted Gaussians. The kernels are
serial, so outputs and accumulated gradients are bit-deterministic; tile
binning only selects candidates, the per-pixel 3-sigma gate and global depth
order make results independent of tile size.
"""

import numba as nb
import numpy as np

MAHALANOBIS_CUT = 9.0       # 3-sigma footprint, applied per pixel
ALPHA_MAX = 1.0 - 1e-6      # keeps 1 - alpha bounded away from zero
TERM_EPS = 1e-4             # default transmittance early-exit
DEPTH_EPS = 1e-8            # expected-depth normalization floor


@nb.njit(cache=True)
def forward(means, conics, depths, colors, opacs, pair_gauss, tile_ranges,
            tiles_x, tile_size, height, width, bg, amax, tmin,
            rgb, alpha, depth):
    for t in range(tile_ranges.shape[0]):
        s0, s1 = tile_ranges[t, 0], tile_ranges[t, 1]
        if s1 <= s0:
            continue
        y0 = (t // tiles_x) * tile_size
        x0 = (t % tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile_size, width)):
                fx = px + 0.5
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_w = 0.0
                acc_z = 0.0
                for k in range(s0, s1):
                    if trans < tmin:
                        break
                    g = pair_gauss[k]
                    dx = fx - means[g, 0]
                    dy = fy - means[g, 1]
                    d2 = (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy
                          + conics[g, 2] * dy * dy)
                    if d2 > MAHALANOBIS_CUT:
                        continue
                    a = opacs[g] * np.exp(-0.5 * d2)
                    if a > amax:
                        a = amax
                    w = a * trans
                    acc_r += w * colors[g, 0]
                    acc_g += w * colors[g, 1]
                    acc_b += w * colors[g, 2]
                    acc_w += w
                    acc_z += w * depths[g]
                    trans *= 1.0 - a
                rgb[py, px, 0] = acc_r + (1.0 - acc_w) * bg[0]
                rgb[py, px, 1] = acc_g + (1.0 - acc_w) * bg[1]
                rgb[py, px, 2] = acc_b + (1.0 - acc_w) * bg[2]
                alpha[py, px] = acc_w
                dn = acc_w if acc_w > DEPTH_EPS else DEPTH_EPS
                depth[py, px] = acc_z / dn


@nb.njit(cache=True)
def backward(means, conics, depths, colors, opacs, pair_gauss, tile_ranges,
             tiles_x, tile_size, height, width, bg, amax, tmin,
             g_rgb, g_alpha, g_depth,
             d_means, d_conics, d_depths, d_colors, d_opacs):
    for t in range(tile_ranges.shape[0]):
        s0, s1 = tile_ranges[t, 0], tile_ranges[t, 1]
        if s1 <= s0:
            continue
        y0 = (t // tiles_x) * tile_size
        x0 = (t % tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile_size, width)):
                fx = px + 0.5
                gc0 = g_rgb[py, px, 0]
                gc1 = g_rgb[py, px, 1]
                gc2 = g_rgb[py, px, 2]
                ga = g_alpha[py, px]
                gd = g_depth[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 \
                        and ga == 0.0 and gd == 0.0:
                    continue
                # first pass: totals, replaying the forward walk exactly
                trans = 1.0
                tot0 = 0.0
                tot1 = 0.0
                tot2 = 0.0
                totw = 0.0
                totz = 0.0
                for k in range(s0, s1):
                    if trans < tmin:
                        break
                    g = pair_gauss[k]
                    dx = fx - means[g, 0]
                    dy = fy - means[g, 1]
                    d2 = (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy
                          + conics[g, 2] * dy * dy)
                    if d2 > MAHALANOBIS_CUT:
                        continue
                    a = opacs[g] * np.exp(-0.5 * d2)
                    if a > amax:
                        a = amax
                    w = a * trans
                    tot0 += w * colors[g, 0]
                    tot1 += w * colors[g, 1]
                    tot2 += w * colors[g, 2]
                    totw += w
                    totz += w * depths[g]
                    trans *= 1.0 - a
                denom = totw if totw > DEPTH_EPS else DEPTH_EPS
                gz_eff = gd / denom
                ga_eff = ga - (gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2])
                if totw > DEPTH_EPS:
                    ga_eff -= gd * totz / (denom * denom)
                # second pass: suffix sums give each contribution's gradient
                trans = 1.0
                pc0 = 0.0
                pc1 = 0.0
                pc2 = 0.0
                pw = 0.0
                pz = 0.0
                for k in range(s0, s1):
                    if trans < tmin:
                        break
                    g = pair_gauss[k]
                    dx = fx - means[g, 0]
                    dy = fy - means[g, 1]
                    cxa = conics[g, 0]
                    cxb = conics[g, 1]
                    cxc = conics[g, 2]
                    d2 = cxa * dx * dx + 2.0 * cxb * dx * dy + cxc * dy * dy
                    if d2 > MAHALANOBIS_CUT:
                        continue
                    araw = opacs[g] * np.exp(-0.5 * d2)
                    a = araw if araw < amax else amax
                    w = a * trans
                    pc0 += w * colors[g, 0]
                    pc1 += w * colors[g, 1]
                    pc2 += w * colors[g, 2]
                    pw += w
                    pz += w * depths[g]
                    om = 1.0 - a
                    da = (gc0 * (trans * colors[g, 0] - (tot0 - pc0) / om)
                          + gc1 * (trans * colors[g, 1] - (tot1 - pc1) / om)
                          + gc2 * (trans * colors[g, 2] - (tot2 - pc2) / om)
                          + ga_eff * (trans - (totw - pw) / om)
                          + gz_eff * (trans * depths[g] - (totz - pz) / om))
                    d_colors[g, 0] += w * gc0
                    d_colors[g, 1] += w * gc1
                    d_colors[g, 2] += w * gc2
                    d_depths[g] += w * gz_eff
                    if araw < amax:
                        d_opacs[g] += np.exp(-0.5 * d2) * da
                        dd2 = -0.5 * araw * da
                        ddx = dd2 * 2.0 * (cxa * dx + cxb * dy)
                        ddy = dd2 * 2.0 * (cxb * dx + cxc * dy)
                        d_means[g, 0] -= ddx
                        d_means[g, 1] -= ddy
                        d_conics[g, 0] += dd2 * dx * dx
                        d_conics[g, 1] += dd2 * 2.0 * dx * dy
                        d_conics[g, 2] += dd2 * dy * dy
                    trans *= om
