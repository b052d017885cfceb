"""Numba kernels for pair building and per-pixel compositing (forward and reverse).

Pairs are stored CSR-style: the splats touching pixel ``p`` are
``gid[start[p]:start[p + 1]]``, front to back. All kernels release the GIL so
disjoint pixel sets can be processed from worker threads.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def build_pairs(means, cov, conic, valid, depth_order, height, width, q_cut):
    P = height * width
    counts = np.zeros(P + 1, dtype=np.int64)
    for rep in range(2):
        if rep == 1:
            start = np.zeros(P + 1, dtype=np.int64)
            for p in range(P):
                start[p + 1] = start[p] + counts[p]
            gid = np.empty(start[P], dtype=np.int64)
            fill = start[:-1].copy()
        for g in depth_order:
            if not valid[g]:
                continue
            hx = math.sqrt(q_cut * cov[g, 0, 0])
            hy = math.sqrt(q_cut * cov[g, 1, 1])
            x0 = max(0, int(math.ceil(means[g, 0] - hx)))
            x1 = min(width - 1, int(math.floor(means[g, 0] + hx)))
            y0 = max(0, int(math.ceil(means[g, 1] - hy)))
            y1 = min(height - 1, int(math.floor(means[g, 1] + hy)))
            a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
            for y in range(y0, y1 + 1):
                dy = y - means[g, 1]
                for x in range(x0, x1 + 1):
                    dx = x - means[g, 0]
                    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    if q < q_cut:
                        p = y * width + x
                        if rep == 0:
                            counts[p] += 1
                        else:
                            gid[fill[p]] = g
                            fill[p] += 1
    return start, gid


@njit(cache=True, nogil=True)
def _attenuation(depth, s, uniform):
    """exp(-s z) per Gaussian when the medium does not vary across pixels."""
    n = len(depth)
    out = np.empty((n if uniform else 0, 3))
    if uniform:
        for g in range(n):
            for ch in range(3):
                out[g, ch] = math.exp(-s[0, ch] * depth[g])
    return out


@njit(cache=True, nogil=True)
def composite_forward(pixels, start, gid, width, means, conic, opacity, colors, depth,
                      cm, sa, sb, uniform, alpha_max, rgb, obj, med, dep, acc, tfin):
    """``uniform`` marks a medium whose fields are identical for every pixel."""
    ea_g = _attenuation(depth, sa, uniform)
    eb_g = _attenuation(depth, sb, uniform)
    for p in pixels:
        px = p % width
        py = p // width
        T = 1.0
        a_sum = 0.0
        wz = 0.0
        o0 = o1 = o2 = 0.0
        t0 = t1 = t2 = 0.0
        b0 = b1 = b2 = 0.0
        for k in range(start[p], start[p + 1]):
            g = gid[k]
            dx = px - means[g, 0]
            dy = py - means[g, 1]
            q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
            alpha = min(opacity[g] * math.exp(-0.5 * q), alpha_max)
            w = T * alpha
            z = depth[g]
            c0, c1, c2 = colors[g, 0], colors[g, 1], colors[g, 2]
            o0 += w * c0
            o1 += w * c1
            o2 += w * c2
            if uniform:
                a0, a1, a2 = ea_g[g, 0], ea_g[g, 1], ea_g[g, 2]
                e0, e1, e2 = eb_g[g, 0], eb_g[g, 1], eb_g[g, 2]
            else:
                a0, a1, a2 = math.exp(-sa[p, 0] * z), math.exp(-sa[p, 1] * z), math.exp(-sa[p, 2] * z)
                e0, e1, e2 = math.exp(-sb[p, 0] * z), math.exp(-sb[p, 1] * z), math.exp(-sb[p, 2] * z)
            t0 += (w * a0) * c0
            t1 += (w * a1) * c1
            t2 += (w * a2) * c2
            b0 += w * e0
            b1 += w * e1
            b2 += w * e2
            a_sum += w
            wz += w * z
            T *= 1.0 - alpha
        m0 = cm[p, 0] * (1.0 - b0)
        m1 = cm[p, 1] * (1.0 - b1)
        m2 = cm[p, 2] * (1.0 - b2)
        rgb[p, 0] = t0 + m0
        rgb[p, 1] = t1 + m1
        rgb[p, 2] = t2 + m2
        obj[p, 0] = o0
        obj[p, 1] = o1
        obj[p, 2] = o2
        med[p, 0] = m0
        med[p, 1] = m1
        med[p, 2] = m2
        acc[p] = a_sum
        tfin[p] = T
        dep[p] = wz / max(a_sum, 1e-10) if a_sum > 0 else -1.0


@njit(cache=True, nogil=True)
def composite_plain(start, gid, width, means, conic, opacity, colors, alpha_max, out):
    """Medium-free splatting, C = sum_i c_i a_i prod_{j<i} (1 - a_j)."""
    for p in range(len(start) - 1):
        px = p % width
        py = p // width
        T = 1.0
        o0 = o1 = o2 = 0.0
        for k in range(start[p], start[p + 1]):
            g = gid[k]
            dx = px - means[g, 0]
            dy = py - means[g, 1]
            q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
            alpha = min(opacity[g] * math.exp(-0.5 * q), alpha_max)
            w = T * alpha
            o0 += w * colors[g, 0]
            o1 += w * colors[g, 1]
            o2 += w * colors[g, 2]
            T *= 1.0 - alpha
        out[p, 0] = o0
        out[p, 1] = o1
        out[p, 2] = o2


@njit(cache=True, nogil=True)
def composite_backward(start, gid, width, means, conic, opacity, colors, depth, cm, sa, sb,
                       uniform, alpha_max, g_rgb, g_obj, g_med, g_acc,
                       d_means, d_conic, d_opacity, d_colors, d_depth, d_cm, d_sa, d_sb):
    """Reverse pass for rgb, object_rgb, medium_rgb and accumulation.

    With w_i = T_i a_i and per-splat value v_i = dL/dw_i, the alpha gradient is
    T_i v_i - (sum_{k>i} w_k v_k) / (1 - a_i), accumulated back to front.
    """
    P = len(start) - 1
    ea_g = _attenuation(depth, sa, uniform)
    eb_g = _attenuation(depth, sb, uniform)
    maxlen = 0
    for p in range(P):
        maxlen = max(maxlen, start[p + 1] - start[p])
    alphas = np.empty(maxlen)
    trans = np.empty(maxlen)
    gauss = np.empty(maxlen)
    ga = np.empty(3)
    gm = np.empty(3)
    ea = np.empty(3)
    eb = np.empty(3)
    for p in range(P):
        n = start[p + 1] - start[p]
        if n == 0:
            for ch in range(3):
                d_cm[p, ch] += (g_rgb[p, ch] + g_med[p, ch])
            continue
        px = p % width
        py = p // width
        T = 1.0
        bs = np.zeros(3)
        for i in range(n):
            g = gid[start[p] + i]
            dx = px - means[g, 0]
            dy = py - means[g, 1]
            q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
            gv = math.exp(-0.5 * q)
            alpha = min(opacity[g] * gv, alpha_max)
            alphas[i] = alpha
            trans[i] = T
            gauss[i] = gv
            for ch in range(3):
                e = eb_g[g, ch] if uniform else math.exp(-sb[p, ch] * depth[g])
                bs[ch] += T * alpha * e
            T *= 1.0 - alpha
        for ch in range(3):
            ga[ch] = g_rgb[p, ch]
            gm[ch] = g_rgb[p, ch] + g_med[p, ch]
            d_cm[p, ch] += gm[ch] * (1.0 - bs[ch])
        suffix = 0.0
        for i in range(n - 1, -1, -1):
            g = gid[start[p] + i]
            alpha = alphas[i]
            w = trans[i] * alpha
            z = depth[g]
            v = g_acc[p]
            dz = 0.0
            for ch in range(3):
                if uniform:
                    ea[ch] = ea_g[g, ch]
                    eb[ch] = eb_g[g, ch]
                else:
                    ea[ch] = math.exp(-sa[p, ch] * z)
                    eb[ch] = math.exp(-sb[p, ch] * z)
                c = colors[g, ch]
                v += ga[ch] * ea[ch] * c + g_obj[p, ch] * c - gm[ch] * cm[p, ch] * eb[ch]
                d_colors[g, ch] += w * (ga[ch] * ea[ch] + g_obj[p, ch])
                dz += -ga[ch] * sa[p, ch] * ea[ch] * c + gm[ch] * cm[p, ch] * sb[p, ch] * eb[ch]
                d_sa[p, ch] -= w * ga[ch] * z * ea[ch] * c
                d_sb[p, ch] += w * gm[ch] * cm[p, ch] * z * eb[ch]
            d_depth[g] += w * dz
            d_alpha = trans[i] * v - suffix / (1.0 - alpha)
            suffix += w * v
            if opacity[g] * gauss[i] >= alpha_max:
                continue
            d_opacity[g] += d_alpha * gauss[i]
            dq = -0.5 * alpha * d_alpha
            dx = px - means[g, 0]
            dy = py - means[g, 1]
            d_conic[g, 0] += dq * dx * dx
            d_conic[g, 1] += dq * 2.0 * dx * dy
            d_conic[g, 2] += dq * dy * dy
            d_means[g, 0] -= dq * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
            d_means[g, 1] -= dq * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
