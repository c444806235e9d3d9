"""Compiled loops for the hash-grid encoding (forward, table adjoint, position adjoint).

Serial loops only, so accumulation order and results are deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_P1 = np.int64(2654435761)
_P2 = np.int64(805459861)


@njit(cache=True)
def _corner(u_i, res, mask):
    # returns base corner hash terms and fractional offsets for one level
    bx = min(max(int(np.floor(u_i[0] * res)), 0), res - 1)
    by = min(max(int(np.floor(u_i[1] * res)), 0), res - 1)
    bz = min(max(int(np.floor(u_i[2] * res)), 0), res - 1)
    fx = u_i[0] * res - bx
    fy = u_i[1] * res - by
    fz = u_i[2] * res - bz
    return bx, by, bz, fx, fy, fz


@njit(cache=True)
def encode_forward(u, tables, resolutions, out):
    n = u.shape[0]
    levels, table_size, feats = tables.shape
    mask = np.int64(table_size - 1)
    for lvl in range(levels):
        res = resolutions[lvl]
        for i in range(n):
            bx, by, bz, fx, fy, fz = _corner(u[i], res, mask)
            for f in range(feats):
                out[i, lvl * feats + f] = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                h = (np.int64(bx + ox)) ^ (np.int64(by + oy) * _P1) ^ (np.int64(bz + oz) * _P2)
                idx = h & mask
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                w = wx * wy * wz
                for f in range(feats):
                    out[i, lvl * feats + f] += w * tables[lvl, idx, f]


@njit(cache=True)
def encode_backward(u, tables, resolutions, g, want_tables, want_u, g_tables, g_u):
    n = u.shape[0]
    levels, table_size, feats = tables.shape
    mask = np.int64(table_size - 1)
    # level-major order keeps one level's table hot in cache
    for lvl in range(levels):
        res = resolutions[lvl]
        for i in range(n):
            bx, by, bz, fx, fy, fz = _corner(u[i], res, mask)
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                h = (np.int64(bx + ox)) ^ (np.int64(by + oy) * _P1) ^ (np.int64(bz + oz) * _P2)
                idx = h & mask
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                if want_tables:
                    w = wx * wy * wz
                    for f in range(feats):
                        g_tables[lvl, idx, f] += w * g[i, lvl * feats + f]
                if want_u:
                    gw = 0.0
                    for f in range(feats):
                        gw += tables[lvl, idx, f] * g[i, lvl * feats + f]
                    sx = 1.0 if ox else -1.0
                    sy = 1.0 if oy else -1.0
                    sz = 1.0 if oz else -1.0
                    gx += sx * gw * wy * wz
                    gy += sy * gw * wx * wz
                    gz += sz * gw * wx * wy
            if want_u:
                g_u[i, 0] += res * gx
                g_u[i, 1] += res * gy
                g_u[i, 2] += res * gz
