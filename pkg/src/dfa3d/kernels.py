"""Compiled sampling kernels.

All maps are packed per view over scales: features ``V x S x C``, depth
``V x S x D``, expanded features ``V x S x D x C`` with ``S = sum(H_l * W_l)``
and scale ``l`` starting at ``starts[l]``.  Reference points are in pixels of
scale 0; scale ``l`` sees ``(u + du + 0.5) * sx_l - 0.5`` (align-corners-false).
Depth is ``(d + dd - d_origin) / d_delta`` in bin units and never rescaled.

Forward kernels parallelise over queries; each query writes only its own
output row.  ``out`` is ``Q x V x C`` per view, or ``Q x 1 x C`` when the
views are summed in place.
"""

import math

import numpy as np
from numba import njit, prange

# nominal multiplies per sampling point, for ``ch`` channels per head
VANILLA_FEATURE = 8
EFFICIENT_FEATURE = 4
EFFICIENT_DEPTH = 8
VANILLA_WEIGHT = 24
EFFICIENT_WEIGHT = 12
BILINEAR_FEATURE = 4
BILINEAR_WEIGHT = 8


@njit(cache=True, parallel=True)
def efficient_forward(feat, dist, shapes, starts, scales, refs, visible, offsets, weights,
                      d_origin, d_delta, out, summed):
    nq, nv = visible.shape
    nm, nl, nk = weights.shape[1], weights.shape[2], weights.shape[3]
    ch = feat.shape[2] // nm
    nd = dist.shape[2]
    for q in prange(nq):
        for v in range(nv):
            if not visible[q, v]:
                continue
            vo = 0 if summed else v
            for m in range(nm):
                c0 = m * ch
                for l in range(nl):
                    h = shapes[l, 0]
                    w = shapes[l, 1]
                    base = starts[l]
                    for k in range(nk):
                        u = (refs[q, v, 0] + offsets[q, m, l, k, 0] + 0.5) * scales[l, 0] - 0.5
                        y = (refs[q, v, 1] + offsets[q, m, l, k, 1] + 0.5) * scales[l, 1] - 0.5
                        z = (refs[q, v, 2] + offsets[q, m, l, k, 2] - d_origin) / d_delta
                        if not (u > -1.0 and u < w and y > -1.0 and y < h and z > -1.0 and z < nd):
                            continue
                        a = weights[q, m, l, k]
                        fx = math.floor(u)
                        fy = math.floor(y)
                        fz = math.floor(z)
                        tu = u - fx
                        tv = y - fy
                        td = z - fz
                        x0 = int(fx)
                        y0 = int(fy)
                        k0 = int(fz)
                        for dy in range(2):
                            yy = y0 + dy
                            if yy < 0 or yy >= h:
                                continue
                            wy = tv if dy == 1 else 1.0 - tv
                            for dx in range(2):
                                xx = x0 + dx
                                if xx < 0 or xx >= w:
                                    continue
                                wx = tu if dx == 1 else 1.0 - tu
                                s = base + yy * w + xx
                                lo = dist[v, s, k0] if k0 >= 0 else 0.0
                                hi = dist[v, s, k0 + 1] if k0 + 1 < nd else 0.0
                                score = lo * (1.0 - td) + hi * td
                                coef = a * (wx * wy) * score
                                for c in range(ch):
                                    out[q, vo, c0 + c] += coef * feat[v, s, c0 + c]


@njit(cache=True, parallel=True)
def vanilla_forward(expanded, shapes, starts, scales, refs, visible, offsets, weights,
                    d_origin, d_delta, out, summed):
    nq, nv = visible.shape
    nm, nl, nk = weights.shape[1], weights.shape[2], weights.shape[3]
    nd = expanded.shape[2]
    ch = expanded.shape[3] // nm
    for q in prange(nq):
        for v in range(nv):
            if not visible[q, v]:
                continue
            vo = 0 if summed else v
            for m in range(nm):
                c0 = m * ch
                for l in range(nl):
                    h = shapes[l, 0]
                    w = shapes[l, 1]
                    base = starts[l]
                    for k in range(nk):
                        u = (refs[q, v, 0] + offsets[q, m, l, k, 0] + 0.5) * scales[l, 0] - 0.5
                        y = (refs[q, v, 1] + offsets[q, m, l, k, 1] + 0.5) * scales[l, 1] - 0.5
                        z = (refs[q, v, 2] + offsets[q, m, l, k, 2] - d_origin) / d_delta
                        if not (u > -1.0 and u < w and y > -1.0 and y < h and z > -1.0 and z < nd):
                            continue
                        a = weights[q, m, l, k]
                        fx = math.floor(u)
                        fy = math.floor(y)
                        fz = math.floor(z)
                        tu = u - fx
                        tv = y - fy
                        td = z - fz
                        x0 = int(fx)
                        y0 = int(fy)
                        k0 = int(fz)
                        for dy in range(2):
                            yy = y0 + dy
                            if yy < 0 or yy >= h:
                                continue
                            wy = tv if dy == 1 else 1.0 - tv
                            for dx in range(2):
                                xx = x0 + dx
                                if xx < 0 or xx >= w:
                                    continue
                                wx = tu if dx == 1 else 1.0 - tu
                                s = base + yy * w + xx
                                for dz in range(2):
                                    kk = k0 + dz
                                    if kk < 0 or kk >= nd:
                                        continue
                                    wz = td if dz == 1 else 1.0 - td
                                    coef = a * (wx * wy) * wz
                                    for c in range(ch):
                                        out[q, vo, c0 + c] += coef * expanded[v, s, kk, c0 + c]


@njit(cache=True, parallel=True)
def bilinear_forward(feat, shapes, starts, scales, refs, visible, offsets, weights, out, summed):
    nq, nv = visible.shape
    nm, nl, nk = weights.shape[1], weights.shape[2], weights.shape[3]
    ch = feat.shape[2] // nm
    for q in prange(nq):
        for v in range(nv):
            if not visible[q, v]:
                continue
            vo = 0 if summed else v
            for m in range(nm):
                c0 = m * ch
                for l in range(nl):
                    h = shapes[l, 0]
                    w = shapes[l, 1]
                    base = starts[l]
                    for k in range(nk):
                        u = (refs[q, v, 0] + offsets[q, m, l, k, 0] + 0.5) * scales[l, 0] - 0.5
                        y = (refs[q, v, 1] + offsets[q, m, l, k, 1] + 0.5) * scales[l, 1] - 0.5
                        if not (u > -1.0 and u < w and y > -1.0 and y < h):
                            continue
                        a = weights[q, m, l, k]
                        fx = math.floor(u)
                        fy = math.floor(y)
                        tu = u - fx
                        tv = y - fy
                        x0 = int(fx)
                        y0 = int(fy)
                        for dy in range(2):
                            yy = y0 + dy
                            if yy < 0 or yy >= h:
                                continue
                            wy = tv if dy == 1 else 1.0 - tv
                            for dx in range(2):
                                xx = x0 + dx
                                if xx < 0 or xx >= w:
                                    continue
                                wx = tu if dx == 1 else 1.0 - tu
                                s = base + yy * w + xx
                                coef = a * (wx * wy)
                                for c in range(ch):
                                    out[q, vo, c0 + c] += coef * feat[v, s, c0 + c]


@njit(cache=True, parallel=True)
def efficient_backward(feat, dist, shapes, starts, scales, refs, visible, offsets, weights,
                       d_origin, d_delta, grad_out, summed,
                       g_feat, g_dist, g_off, g_w):
    """Gradients of :func:`efficient_forward`.

    ``g_feat`` and ``g_dist`` carry a leading worker axis: worker ``p`` owns
    the query block ``[p*Q/P, (p+1)*Q/P)`` and writes only its own slice, so
    the caller's ordered reduction over that axis is deterministic.
    Cell coordinates use ``ceil(x) - 1`` so integer positions take the
    derivative of the cell to their left.
    """
    nq, nv = visible.shape
    nm, nl, nk = weights.shape[1], weights.shape[2], weights.shape[3]
    ch = feat.shape[2] // nm
    nd = dist.shape[2]
    nparts = g_feat.shape[0]
    for p in prange(nparts):
        q_lo = p * nq // nparts
        q_hi = (p + 1) * nq // nparts
        for q in range(q_lo, q_hi):
            for v in range(nv):
                if not visible[q, v]:
                    continue
                vo = 0 if summed else v
                for m in range(nm):
                    c0 = m * ch
                    for l in range(nl):
                        h = shapes[l, 0]
                        w = shapes[l, 1]
                        base = starts[l]
                        for k in range(nk):
                            u = (refs[q, v, 0] + offsets[q, m, l, k, 0] + 0.5) * scales[l, 0] - 0.5
                            y = (refs[q, v, 1] + offsets[q, m, l, k, 1] + 0.5) * scales[l, 1] - 0.5
                            z = (refs[q, v, 2] + offsets[q, m, l, k, 2] - d_origin) / d_delta
                            if not (u > -1.0 and u < w and y > -1.0 and y < h and z > -1.0 and z < nd):
                                continue
                            a = weights[q, m, l, k]
                            fx = math.ceil(u) - 1.0
                            fy = math.ceil(y) - 1.0
                            fz = math.ceil(z) - 1.0
                            tu = u - fx
                            tv = y - fy
                            td = z - fz
                            x0 = int(fx)
                            y0 = int(fy)
                            k0 = int(fz)
                            ga = 0.0
                            gu = 0.0
                            gv = 0.0
                            gz = 0.0
                            for dy in range(2):
                                yy = y0 + dy
                                if yy < 0 or yy >= h:
                                    continue
                                wy = tv if dy == 1 else 1.0 - tv
                                sy = 1.0 if dy == 1 else -1.0
                                for dx in range(2):
                                    xx = x0 + dx
                                    if xx < 0 or xx >= w:
                                        continue
                                    wx = tu if dx == 1 else 1.0 - tu
                                    sx = 1.0 if dx == 1 else -1.0
                                    s = base + yy * w + xx
                                    lo = dist[v, s, k0] if k0 >= 0 else 0.0
                                    hi = dist[v, s, k0 + 1] if k0 + 1 < nd else 0.0
                                    score = lo * (1.0 - td) + hi * td
                                    bil = wx * wy
                                    dot = 0.0
                                    coef = a * bil * score
                                    for c in range(ch):
                                        g = grad_out[q, vo, c0 + c]
                                        dot += g * feat[v, s, c0 + c]
                                        g_feat[p, v, s, c0 + c] += coef * g
                                    ga += bil * score * dot
                                    gu += sx * wy * score * dot
                                    gv += wx * sy * score * dot
                                    gz += bil * (hi - lo) * dot
                                    if k0 >= 0:
                                        g_dist[p, v, s, k0] += a * bil * (1.0 - td) * dot
                                    if k0 + 1 < nd:
                                        g_dist[p, v, s, k0 + 1] += a * bil * td * dot
                            g_w[q, m, l, k] += ga
                            g_off[q, m, l, k, 0] += a * gu * scales[l, 0]
                            g_off[q, m, l, k, 1] += a * gv * scales[l, 1]
                            g_off[q, m, l, k, 2] += a * gz / d_delta


@njit(cache=True)
def reduce_partials(parts, out):
    """``out = sum(parts, axis=0)`` in fixed worker order."""
    n = parts.shape[0]
    flat_out = out.reshape(-1)
    for p in range(n):
        flat = parts[p].reshape(-1)
        for i in range(flat.shape[0]):
            flat_out[i] += flat[i]


def warmup():
    """Compile the kernels for float32/float64 on tiny inputs."""
    for dt in (np.float64, np.float32):
        feat = np.zeros((1, 1, 1), dt)
        dist = np.zeros((1, 1, 1), dt)
        exp = np.zeros((1, 1, 1, 1), dt)
        shapes = np.ones((1, 2), np.int64)
        starts = np.zeros(1, np.int64)
        scales = np.ones((1, 2))
        refs = np.zeros((1, 1, 3))
        vis = np.ones((1, 1), np.bool_)
        off = np.zeros((1, 1, 1, 1, 3))
        w = np.ones((1, 1, 1, 1))
        out = np.zeros((1, 1, 1), dt)
        efficient_forward(feat, dist, shapes, starts, scales, refs, vis, off, w, 0.0, 1.0, out, False)
        vanilla_forward(exp, shapes, starts, scales, refs, vis, off, w, 0.0, 1.0, out, False)
        bilinear_forward(feat, shapes, starts, scales, refs, vis, off, w, out, False)
