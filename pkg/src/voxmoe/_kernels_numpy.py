"""Pure-numpy implementations of the hot kernels.

Each function here has a numba twin in ``_kernels_numba`` with the same
signature.  The pair is kept accumulation-order compatible: integer outputs
are bit-identical across backends and worker counts, float reductions run
left to right within every cell / ascending tap order within every output
row.
"""

from __future__ import annotations

import numpy as np


def chunk_bounds(n: int, chunks: int) -> np.ndarray:
    """Offsets of ``chunks`` contiguous blocks covering ``range(n)``.

    Returns ``chunks + 1`` offsets with block sizes differing by at most one.
    """
    if n <= 0:
        return np.zeros(2, dtype=np.int64)
    chunks = max(1, min(int(chunks), n))
    base, rem = divmod(n, chunks)
    sizes = np.full(chunks, base, dtype=np.int64)
    sizes[:rem] += 1
    bounds = np.zeros(chunks + 1, dtype=np.int64)
    np.cumsum(sizes, out=bounds[1:])
    return bounds


def exclusive_scan(flags: np.ndarray, chunks: int = 1):
    """Exclusive prefix sum over int64 ``flags``; returns (offsets, total).

    The input is split into ``chunks`` contiguous blocks that are scanned
    independently and then rebased by the scanned block totals, so the
    result is identical to a single sequential scan for any chunk count.
    """
    flags = np.ascontiguousarray(flags, dtype=np.int64)
    n = flags.shape[0]
    out = np.empty(n, dtype=np.int64)
    bounds = chunk_bounds(n, chunks)
    base = 0
    for c in range(len(bounds) - 1):
        s, e = int(bounds[c]), int(bounds[c + 1])
        if e == s:
            continue
        cs = np.cumsum(flags[s:e])
        out[s] = base
        out[s + 1:e] = base + cs[:-1]
        base += int(cs[-1])
    return out, base


def accumulate_cells(sorted_keys, sorted_xyz, sorted_intensity):
    """Per-run sums over canonically sorted points sharing a cell key.

    Returns ``(unique_keys, counts, intensity_sums, xyz_sums)``.  The inputs
    must already be sorted so that equal keys are contiguous; sums run left
    to right within each run.
    """
    n = sorted_keys.shape[0]
    if n == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty(0, np.float64), np.empty((0, 3), np.float64))
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=starts[1:])
    inverse = np.cumsum(starts) - 1
    u = int(inverse[-1]) + 1
    unique_keys = sorted_keys[starts]
    counts = np.zeros(u, np.int64)
    np.add.at(counts, inverse, 1)
    intensity_sums = np.zeros(u, np.float64)
    np.add.at(intensity_sums, inverse, sorted_intensity)
    xyz_sums = np.zeros((u, 3), np.float64)
    np.add.at(xyz_sums, inverse, sorted_xyz)
    return unique_keys, counts, intensity_sums, xyz_sums


def rulebook_pairs(coords, keys, extents, tap_offsets, chunks: int = 1):
    """(input_row, output_row) pairs per kernel tap for submanifold conv.

    For every output row ``i`` and tap displacement ``d``, a pair exists iff
    ``coords[i] + d`` lies inside ``extents`` and is an active coordinate.
    Pairs come out grouped by tap in ascending tap order, each group ordered
    by output row; compaction of the per-tap hit flags goes through
    :func:`exclusive_scan`.

    Returns ``(pair_in, pair_out, counts)`` where ``counts[k]`` is the number
    of pairs contributed by tap ``k``.
    """
    n = coords.shape[0]
    k3 = tap_offsets.shape[0]
    counts = np.zeros(k3, np.int64)
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), counts
    order = np.argsort(keys)
    sorted_keys = keys[order]
    sx = int(extents[1]) * int(extents[2])
    sy = int(extents[2])
    pin_parts = []
    pout_parts = []
    for k in range(k3):
        nb = coords + tap_offsets[k]
        valid = ((nb[:, 0] >= 0) & (nb[:, 0] < extents[0])
                 & (nb[:, 1] >= 0) & (nb[:, 1] < extents[1])
                 & (nb[:, 2] >= 0) & (nb[:, 2] < extents[2]))
        nb_keys = nb[:, 0] * sx + nb[:, 1] * sy + nb[:, 2]
        pos = np.searchsorted(sorted_keys, nb_keys)
        pos_c = np.minimum(pos, n - 1)
        hit = valid & (sorted_keys[pos_c] == nb_keys)
        offsets, total = exclusive_scan(hit.astype(np.int64), chunks)
        pin = np.empty(total, np.int64)
        pout = np.empty(total, np.int64)
        rows = np.flatnonzero(hit)
        slots = offsets[rows]
        pin[slots] = order[pos_c[rows]]
        pout[slots] = rows
        counts[k] = total
        pin_parts.append(pin)
        pout_parts.append(pout)
    return np.concatenate(pin_parts), np.concatenate(pout_parts), counts


def scatter_fma(feats, weights, pair_in, pair_out, counts, n_out: int):
    """``out[pair_out] += feats[pair_in] @ weights[tap]``, tap by tap.

    Within one tap every output row appears at most once, so per output row
    the accumulation order is ascending tap index regardless of how the
    work is partitioned (the numba twin shares that order; only the
    sub-tap summation over input channels associates differently).
    """
    cout = weights.shape[2]
    out = np.zeros((n_out, cout), np.float64)
    s = 0
    for k in range(counts.shape[0]):
        e = s + int(counts[k])
        if e > s:
            out[pair_out[s:e]] += feats[pair_in[s:e]] @ weights[k]
        s = e
    return out
