"""Numba kernels for the hot loops.

Everything here is written so results do not depend on the number of
threads: parallel loops either write disjoint output slots (per-point
rows, per-level table slices) or are serial.  That keeps training
bit-reproducible for any --threads setting.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# hash primes for the 3 axes; level tables are indexed slot = xor(...) & (T-1)
HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))


@njit(cache=True)
def excl_cumprod_fwd(x, starts):
    """Per-segment exclusive cumulative product; segment leads get 1."""
    n = x.shape[0]
    y = np.empty_like(x)
    n_seg = starts.shape[0]
    for s in range(n_seg):
        lo = starts[s]
        hi = starts[s + 1] if s + 1 < n_seg else n
        acc = 1.0
        for i in range(lo, hi):
            y[i] = acc
            acc *= x[i]
    return y


@njit(cache=True)
def excl_cumprod_bwd(x, y, g, starts):
    """dL/dx_k = (sum_{i>k in seg} g_i y_i) / x_k via reverse suffix scan."""
    n = x.shape[0]
    dx = np.zeros_like(x)
    n_seg = starts.shape[0]
    for s in range(n_seg):
        lo = starts[s]
        hi = starts[s + 1] if s + 1 < n_seg else n
        acc = 0.0
        for i in range(hi - 1, lo - 1, -1):
            dx[i] = acc / x[i]
            acc += g[i] * y[i]
    return dx


@njit(cache=True, parallel=True)
def _softplus_flat(flat, beta):
    y = np.empty_like(flat)
    sig = np.empty_like(flat)
    for i in prange(flat.shape[0]):
        t = beta * flat[i]
        if t > 30.0:
            y[i] = flat[i]
            sig[i] = 1.0
        elif t < -30.0:
            y[i] = np.exp(t) / beta
            sig[i] = np.exp(t)
        else:
            e = np.exp(t)
            y[i] = np.log1p(e) / beta
            sig[i] = e / (1.0 + e)
    return y, sig


def softplus_fwd(z, beta):
    """Overflow-safe softplus(beta*z)/beta and its derivative sigmoid(beta*z)."""
    z = np.asarray(z)
    y, sig = _softplus_flat(np.ascontiguousarray(z).reshape(-1), beta)
    return y.reshape(z.shape), sig.reshape(z.shape)


@njit(cache=True, parallel=True)
def _sigmoid_flat(flat):
    y = np.empty_like(flat)
    for i in prange(flat.shape[0]):
        t = flat[i]
        if t >= 0.0:
            y[i] = 1.0 / (1.0 + np.exp(-t))
        else:
            e = np.exp(t)
            y[i] = e / (1.0 + e)
    return y


def sigmoid_fwd(z):
    z = np.asarray(z)
    return _sigmoid_flat(np.ascontiguousarray(z).reshape(-1)).reshape(z.shape)


@njit(cache=True, parallel=True)
def hash_encode_fwd(coords, tables, resolutions, dense_level, mask, out):
    """Trilinear multi-level hash encoding.

    coords      (N, 3) in [0, 1]
    tables      (L, T, d)
    resolutions (L,) int64 per-level grid resolution
    dense_level (L,) bool: use the collision-free dense index
    mask        T - 1 (table size is a power of two)
    out         (N, L*d) preallocated
    """
    n_pts = coords.shape[0]
    n_levels = tables.shape[0]
    d = tables.shape[2]
    p1, p2, p3 = HASH_PRIMES
    for i in prange(n_pts):
        x = coords[i, 0]
        y = coords[i, 1]
        z = coords[i, 2]
        for lev in range(n_levels):
            res = resolutions[lev]
            fx = x * res
            fy = y * res
            fz = z * res
            ix = np.int64(fx)
            iy = np.int64(fy)
            iz = np.int64(fz)
            if ix > res - 1:
                ix = res - 1
            if iy > res - 1:
                iy = res - 1
            if iz > res - 1:
                iz = res - 1
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            base = lev * d
            for f in range(d):
                out[i, base + f] = 0.0
            for corner in range(8):
                cx = ix + (corner & 1)
                cy = iy + ((corner >> 1) & 1)
                cz = iz + ((corner >> 2) & 1)
                w = (wx if (corner & 1) else 1.0 - wx)
                w *= (wy if ((corner >> 1) & 1) else 1.0 - wy)
                w *= (wz if ((corner >> 2) & 1) else 1.0 - wz)
                if dense_level[lev]:
                    slot = cx + (res + 1) * (cy + (res + 1) * cz)
                else:
                    slot = np.int64((np.uint64(cx) * p1
                                     ^ np.uint64(cy) * p2
                                     ^ np.uint64(cz) * p3) & np.uint64(mask))
                for f in range(d):
                    out[i, base + f] += w * tables[lev, slot, f]


@njit(cache=True, parallel=True)
def hash_encode_bwd(coords, upstream, resolutions, dense_level, mask, grad_tables):
    """Scatter upstream gradients back into table entries.

    Parallel over levels: each level owns a disjoint grad_tables slice,
    so accumulation order per slot is the serial point order regardless
    of thread count.
    """
    n_pts = coords.shape[0]
    n_levels = grad_tables.shape[0]
    d = grad_tables.shape[2]
    p1, p2, p3 = HASH_PRIMES
    for lev in prange(n_levels):
        res = resolutions[lev]
        base = lev * d
        for i in range(n_pts):
            fx = coords[i, 0] * res
            fy = coords[i, 1] * res
            fz = coords[i, 2] * res
            ix = np.int64(fx)
            iy = np.int64(fy)
            iz = np.int64(fz)
            if ix > res - 1:
                ix = res - 1
            if iy > res - 1:
                iy = res - 1
            if iz > res - 1:
                iz = res - 1
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            for corner in range(8):
                cx = ix + (corner & 1)
                cy = iy + ((corner >> 1) & 1)
                cz = iz + ((corner >> 2) & 1)
                w = (wx if (corner & 1) else 1.0 - wx)
                w *= (wy if ((corner >> 1) & 1) else 1.0 - wy)
                w *= (wz if ((corner >> 2) & 1) else 1.0 - wz)
                if dense_level[lev]:
                    slot = cx + (res + 1) * (cy + (res + 1) * cz)
                else:
                    slot = np.int64((np.uint64(cx) * p1
                                     ^ np.uint64(cy) * p2
                                     ^ np.uint64(cz) * p3) & np.uint64(mask))
                for f in range(d):
                    grad_tables[lev, slot, f] += w * upstream[i, base + f]
