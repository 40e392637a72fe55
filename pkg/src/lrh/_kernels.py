"""Interpolation kernels: gather from / scatter into centered Fourier grids.

Each kernel exists twice: a numba ``@njit`` version and a pure numpy
version.  The numba path is used when numba imports and the environment
variable ``LRH_NUMBA`` is not ``0``.  Both paths are exercised by the tests
and compared in ``benchmarks/bench_kernels.py``.

Coordinates are given in grid-index units (already shifted by the grid
center).  Trilinear corners and nearest samples that fall outside
``[0, M - 1]`` contribute nothing; gather and scatter drop exactly the same
terms, so scatter is the exact adjoint of gather.
"""

from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("LRH_NUMBA", "1") != "0"

try:
    if not _WANT_NUMBA:
        raise ImportError
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

if HAVE_NUMBA and "LRH_THREADS" in os.environ:
    numba.set_num_threads(max(1, min(int(os.environ["LRH_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------- numpy path


def _corners(coords, M):
    """Yield (ix, iy, iz, weight, valid) for the 8 trilinear corners."""
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = base[:, 0] + dx
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = base[:, 1] + dy
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = base[:, 2] + dz
                valid = (ix >= 0) & (ix < M) & (iy >= 0) & (iy < M) & (iz >= 0) & (iz < M)
                yield ix, iy, iz, wx * wy * wz, valid


def _nearest_index(coords, M):
    idx = np.floor(coords + 0.5).astype(np.int64)
    valid = np.all((idx >= 0) & (idx < M), axis=1)
    return idx, valid


def gather_trilinear_np(vols, coords):
    K, M = vols.shape[0], vols.shape[1]
    out = np.zeros((K, coords.shape[0]), dtype=np.complex128)
    for ix, iy, iz, w, valid in _corners(coords, M):
        sel = np.flatnonzero(valid)
        out[:, sel] += vols[:, ix[sel], iy[sel], iz[sel]] * w[sel]
    return out


def scatter_trilinear_np(vals, coords, out):
    K, M = out.shape[0], out.shape[1]
    flat = out.reshape(K, -1)
    for ix, iy, iz, w, valid in _corners(coords, M):
        sel = np.flatnonzero(valid)
        lin = (ix[sel] * M + iy[sel]) * M + iz[sel]
        for k in range(K):
            contrib = vals[k, sel] * w[sel]
            flat[k] += np.bincount(lin, contrib.real, M**3) + 1j * np.bincount(lin, contrib.imag, M**3)
    return out


def gather_trilinear_grad_np(vols, coords):
    K, M = vols.shape[0], vols.shape[1]
    P = coords.shape[0]
    val = np.zeros((K, P), dtype=np.complex128)
    grad = np.zeros((K, P, 3), dtype=np.complex128)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz
                valid = (ix >= 0) & (ix < M) & (iy >= 0) & (iy < M) & (iz >= 0) & (iz < M)
                sel = np.flatnonzero(valid)
                fx, fy, fz = frac[sel, 0], frac[sel, 1], frac[sel, 2]
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                wz = fz if dz else 1.0 - fz
                sx, sy, sz = (1.0 if dx else -1.0), (1.0 if dy else -1.0), (1.0 if dz else -1.0)
                v = vols[:, ix[sel], iy[sel], iz[sel]]
                val[:, sel] += v * (wx * wy * wz)
                grad[:, sel, 0] += v * (sx * wy * wz)
                grad[:, sel, 1] += v * (wx * sy * wz)
                grad[:, sel, 2] += v * (wx * wy * sz)
    return val, grad


def gather_nearest_np(vols, coords):
    K, M = vols.shape[0], vols.shape[1]
    idx, valid = _nearest_index(coords, M)
    out = np.zeros((K, coords.shape[0]), dtype=np.complex128)
    sel = np.flatnonzero(valid)
    out[:, sel] = vols[:, idx[sel, 0], idx[sel, 1], idx[sel, 2]]
    return out


def scatter_nearest_np(vals, coords, out):
    K, M = out.shape[0], out.shape[1]
    idx, valid = _nearest_index(coords, M)
    sel = np.flatnonzero(valid)
    lin = (idx[sel, 0] * M + idx[sel, 1]) * M + idx[sel, 2]
    flat = out.reshape(K, -1)
    for k in range(K):
        v = vals[k, sel]
        flat[k] += np.bincount(lin, v.real, M**3) + 1j * np.bincount(lin, v.imag, M**3)
    return out


def scatter_weights_nearest_np(weights, coords, M):
    """Accumulate real per-sample weights onto the nearest voxel (one volume)."""
    idx, valid = _nearest_index(coords, M)
    sel = np.flatnonzero(valid)
    lin = (idx[sel, 0] * M + idx[sel, 1]) * M + idx[sel, 2]
    return np.bincount(lin, weights[sel], M**3).reshape(M, M, M)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def gather_trilinear_nb(vols, coords):
        K, M = vols.shape[0], vols.shape[1]
        P = coords.shape[0]
        out = np.zeros((K, P), dtype=np.complex128)
        for p in prange(P):
            ux, uy, uz = coords[p, 0], coords[p, 1], coords[p, 2]
            bx, by, bz = int(np.floor(ux)), int(np.floor(uy)), int(np.floor(uz))
            fx, fy, fz = ux - bx, uy - by, uz - bz
            for dx in range(2):
                ix = bx + dx
                if ix < 0 or ix >= M:
                    continue
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    iy = by + dy
                    if iy < 0 or iy >= M:
                        continue
                    wy = fy if dy else 1.0 - fy
                    for dz in range(2):
                        iz = bz + dz
                        if iz < 0 or iz >= M:
                            continue
                        w = wx * wy * (fz if dz else 1.0 - fz)
                        for k in range(K):
                            out[k, p] += w * vols[k, ix, iy, iz]
        return out

    @njit(cache=True, parallel=True)
    def scatter_trilinear_nb(vals, coords, out):
        # parallel over volumes only: each k owns its output, so no write races
        K, M = out.shape[0], out.shape[1]
        P = coords.shape[0]
        for k in prange(K):
            for p in range(P):
                v = vals[k, p]
                ux, uy, uz = coords[p, 0], coords[p, 1], coords[p, 2]
                bx, by, bz = int(np.floor(ux)), int(np.floor(uy)), int(np.floor(uz))
                fx, fy, fz = ux - bx, uy - by, uz - bz
                for dx in range(2):
                    ix = bx + dx
                    if ix < 0 or ix >= M:
                        continue
                    wx = fx if dx else 1.0 - fx
                    for dy in range(2):
                        iy = by + dy
                        if iy < 0 or iy >= M:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dz in range(2):
                            iz = bz + dz
                            if iz < 0 or iz >= M:
                                continue
                            out[k, ix, iy, iz] += v * (wx * wy * (fz if dz else 1.0 - fz))
        return out

    @njit(cache=True, parallel=True)
    def gather_trilinear_grad_nb(vols, coords):
        K, M = vols.shape[0], vols.shape[1]
        P = coords.shape[0]
        val = np.zeros((K, P), dtype=np.complex128)
        grad = np.zeros((K, P, 3), dtype=np.complex128)
        for p in prange(P):
            ux, uy, uz = coords[p, 0], coords[p, 1], coords[p, 2]
            bx, by, bz = int(np.floor(ux)), int(np.floor(uy)), int(np.floor(uz))
            fx, fy, fz = ux - bx, uy - by, uz - bz
            for dx in range(2):
                ix = bx + dx
                if ix < 0 or ix >= M:
                    continue
                wx = fx if dx else 1.0 - fx
                sx = 1.0 if dx else -1.0
                for dy in range(2):
                    iy = by + dy
                    if iy < 0 or iy >= M:
                        continue
                    wy = fy if dy else 1.0 - fy
                    sy = 1.0 if dy else -1.0
                    for dz in range(2):
                        iz = bz + dz
                        if iz < 0 or iz >= M:
                            continue
                        wz = fz if dz else 1.0 - fz
                        sz = 1.0 if dz else -1.0
                        for k in range(K):
                            v = vols[k, ix, iy, iz]
                            val[k, p] += v * (wx * wy * wz)
                            grad[k, p, 0] += v * (sx * wy * wz)
                            grad[k, p, 1] += v * (wx * sy * wz)
                            grad[k, p, 2] += v * (wx * wy * sz)
        return val, grad

    @njit(cache=True, parallel=True)
    def gather_nearest_nb(vols, coords):
        K, M = vols.shape[0], vols.shape[1]
        P = coords.shape[0]
        out = np.zeros((K, P), dtype=np.complex128)
        for p in prange(P):
            ix = int(np.floor(coords[p, 0] + 0.5))
            iy = int(np.floor(coords[p, 1] + 0.5))
            iz = int(np.floor(coords[p, 2] + 0.5))
            if ix < 0 or ix >= M or iy < 0 or iy >= M or iz < 0 or iz >= M:
                continue
            for k in range(K):
                out[k, p] = vols[k, ix, iy, iz]
        return out

    @njit(cache=True, parallel=True)
    def scatter_nearest_nb(vals, coords, out):
        K, M = out.shape[0], out.shape[1]
        P = coords.shape[0]
        for k in prange(K):
            for p in range(P):
                ix = int(np.floor(coords[p, 0] + 0.5))
                iy = int(np.floor(coords[p, 1] + 0.5))
                iz = int(np.floor(coords[p, 2] + 0.5))
                if ix < 0 or ix >= M or iy < 0 or iy >= M or iz < 0 or iz >= M:
                    continue
                out[k, ix, iy, iz] += vals[k, p]
        return out

    @njit(cache=True)
    def scatter_weights_nearest_nb(weights, coords, M):
        out = np.zeros((M, M, M))
        for p in range(coords.shape[0]):
            ix = int(np.floor(coords[p, 0] + 0.5))
            iy = int(np.floor(coords[p, 1] + 0.5))
            iz = int(np.floor(coords[p, 2] + 0.5))
            if ix < 0 or ix >= M or iy < 0 or iy >= M or iz < 0 or iz >= M:
                continue
            out[ix, iy, iz] += weights[p]
        return out


# ---------------------------------------------------------------- dispatch


def _prep(vols, coords):
    return np.ascontiguousarray(vols, dtype=np.complex128), np.ascontiguousarray(coords, dtype=np.float64)


def gather(vols, coords, kind, use_numba=None):
    """Sample ``vols`` (K, M, M, M) at ``coords`` (P, 3); returns (K, P)."""
    vols, coords = _prep(vols, coords)
    nb = HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    if kind == "trilinear":
        return gather_trilinear_nb(vols, coords) if nb else gather_trilinear_np(vols, coords)
    if kind == "nearest":
        return gather_nearest_nb(vols, coords) if nb else gather_nearest_np(vols, coords)
    raise ValueError(f"unknown interpolation kind {kind!r}")


def scatter(vals, coords, M, kind, out=None, use_numba=None):
    """Adjoint of :func:`gather`: accumulate (K, P) samples into (K, M, M, M)."""
    vals = np.ascontiguousarray(vals, dtype=np.complex128)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if out is None:
        out = np.zeros((vals.shape[0], M, M, M), dtype=np.complex128)
    nb = HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    if kind == "trilinear":
        return scatter_trilinear_nb(vals, coords, out) if nb else scatter_trilinear_np(vals, coords, out)
    if kind == "nearest":
        return scatter_nearest_nb(vals, coords, out) if nb else scatter_nearest_np(vals, coords, out)
    raise ValueError(f"unknown interpolation kind {kind!r}")


def gather_grad(vols, coords, use_numba=None):
    """Trilinear samples and their gradient w.r.t. the coordinates."""
    vols, coords = _prep(vols, coords)
    nb = HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    return gather_trilinear_grad_nb(vols, coords) if nb else gather_trilinear_grad_np(vols, coords)


def scatter_weights_nearest(weights, coords, M, use_numba=None):
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    nb = HAVE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    return scatter_weights_nearest_nb(weights, coords, M) if nb else scatter_weights_nearest_np(weights, coords, M)
