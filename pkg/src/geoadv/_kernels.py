"""Compiled brute-force neighbour kernels.

Distances are accumulated as ``dx*dx + dy*dy + dz*dz`` (no fused
multiply-add) so results match the plain numpy evaluation bit for bit.
Ties always go to the lower index.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def nearest_both(a, b):
    na, nb = a.shape[0], b.shape[0]
    fwd = np.zeros(na, dtype=np.intp)
    fwd_sq = np.full(na, np.inf)
    bwd = np.zeros(nb, dtype=np.intp)
    bwd_sq = np.full(nb, np.inf)
    for i in range(na):
        ax, ay, az = a[i, 0], a[i, 1], a[i, 2]
        best = np.inf
        bi = 0
        for j in range(nb):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d = dx * dx + dy * dy
            d = d + dz * dz
            if d < best:
                best = d
                bi = j
            if d < bwd_sq[j]:
                bwd_sq[j] = d
                bwd[j] = i
        fwd[i] = bi
        fwd_sq[i] = best
    return fwd, fwd_sq, bwd, bwd_sq


@numba.njit(cache=True, fastmath=False)
def knn_exhaustive(p, k):
    n = p.shape[0]
    nbr = np.empty((n, k), dtype=np.intp)
    dist = np.empty((n, k))
    for i in range(n):
        bd = np.full(k, np.inf)
        bi = np.full(k, -1, dtype=np.intp)
        px, py, pz = p[i, 0], p[i, 1], p[i, 2]
        for j in range(n):
            if j == i:
                continue
            dx = px - p[j, 0]
            dy = py - p[j, 1]
            dz = pz - p[j, 2]
            d = dx * dx + dy * dy
            d = np.sqrt(d + dz * dz)
            if d < bd[k - 1]:
                pos = k - 1
                while pos > 0 and bd[pos - 1] > d:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                    pos -= 1
                bd[pos] = d
                bi[pos] = j
        nbr[i] = bi
        dist[i] = bd
    return nbr, dist
