"""Numba-compiled twins of the kernels in ``_kernels_numpy``.

Same signatures, same accumulation order: integer results are bit-identical
to the numpy fallback, float sums run left to right within each cell and in
ascending tap order per output row.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def exclusive_scan(flags, chunks=1):
    n = flags.shape[0]
    out = np.empty(n, np.int64)
    if n == 0:
        return out, 0
    c = chunks
    if c < 1:
        c = 1
    if c > n:
        c = n
    base_size = n // c
    rem = n - base_size * c
    chunk_totals = np.empty(c, np.int64)
    start = 0
    for b in range(c):
        size = base_size + (1 if b < rem else 0)
        acc = 0
        for i in range(start, start + size):
            out[i] = acc
            acc += flags[i]
        chunk_totals[b] = acc
        start += size
    base = 0
    start = 0
    for b in range(c):
        size = base_size + (1 if b < rem else 0)
        if base != 0:
            for i in range(start, start + size):
                out[i] += base
        base += chunk_totals[b]
        start += size
    return out, base


@njit(cache=True)
def accumulate_cells(sorted_keys, sorted_xyz, sorted_intensity):
    n = sorted_keys.shape[0]
    if n == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty(0, np.float64), np.empty((0, 3), np.float64))
    u = 1
    for i in range(1, n):
        if sorted_keys[i] != sorted_keys[i - 1]:
            u += 1
    unique_keys = np.empty(u, np.int64)
    counts = np.zeros(u, np.int64)
    intensity_sums = np.zeros(u, np.float64)
    xyz_sums = np.zeros((u, 3), np.float64)
    cell = -1
    for i in range(n):
        if cell < 0 or sorted_keys[i] != unique_keys[cell]:
            cell += 1
            unique_keys[cell] = sorted_keys[i]
        counts[cell] += 1
        intensity_sums[cell] += sorted_intensity[i]
        xyz_sums[cell, 0] += sorted_xyz[i, 0]
        xyz_sums[cell, 1] += sorted_xyz[i, 1]
        xyz_sums[cell, 2] += sorted_xyz[i, 2]
    return unique_keys, counts, intensity_sums, xyz_sums


@njit(cache=True)
def rulebook_pairs(coords, keys, extents, tap_offsets, chunks=1):
    n = coords.shape[0]
    k3 = tap_offsets.shape[0]
    counts = np.zeros(k3, np.int64)
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), counts
    order = np.argsort(keys)
    sorted_keys = keys[order]
    sx = extents[1] * extents[2]
    sy = extents[2]
    pin = np.empty(n * k3, np.int64)
    pout = np.empty(n * k3, np.int64)
    flags = np.empty(n, np.int64)
    hit_row = np.empty(n, np.int64)
    written = 0
    for k in range(k3):
        dx = tap_offsets[k, 0]
        dy = tap_offsets[k, 1]
        dz = tap_offsets[k, 2]
        for i in range(n):
            x = coords[i, 0] + dx
            y = coords[i, 1] + dy
            z = coords[i, 2] + dz
            f = 0
            j = -1
            if x >= 0 and x < extents[0] and y >= 0 and y < extents[1] \
                    and z >= 0 and z < extents[2]:
                nk = x * sx + y * sy + z
                p = np.searchsorted(sorted_keys, nk)
                if p < n and sorted_keys[p] == nk:
                    f = 1
                    j = order[p]
            flags[i] = f
            hit_row[i] = j
        offsets, total = exclusive_scan(flags, chunks)
        for i in range(n):
            if flags[i] == 1:
                slot = written + offsets[i]
                pin[slot] = hit_row[i]
                pout[slot] = i
        counts[k] = total
        written += total
    return pin[:written].copy(), pout[:written].copy(), counts


@njit(cache=True)
def scatter_fma(feats, weights, pair_in, pair_out, counts, n_out):
    cin = feats.shape[1]
    cout = weights.shape[2]
    out = np.zeros((n_out, cout), np.float64)
    s = 0
    for k in range(counts.shape[0]):
        e = s + counts[k]
        for p in range(s, e):
            j = pair_in[p]
            i = pair_out[p]
            # axpy form: no reduction dependency, contiguous inner stride
            for ci in range(cin):
                f = feats[j, ci]
                for co in range(cout):
                    out[i, co] += f * weights[k, ci, co]
        s = e
    return out
