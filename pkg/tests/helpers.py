"""Shared test utilities: random instance generators and brute-force oracles.

The oracles here are deliberately naive (dict lookups, quadratic loops,
scalar arithmetic) and never touch the library's fast paths.
"""

import numpy as np

from voxmoe import SparseVoxelTensor, VoxelGridSpec
from voxmoe.graphopt import ComputeGraph, GraphNode
from voxmoe.spconv import KernelSpec, tap_displacements
from voxmoe.voxels import delinearize_many


def random_tensor(grid: VoxelGridSpec, occupancy: float, channels: int,
                  rng: np.random.Generator) -> SparseVoxelTensor:
    n = int(occupancy * grid.num_cells)
    if n == 0:
        return SparseVoxelTensor.empty(grid, channels)
    keys = rng.choice(grid.num_cells, size=n, replace=False)
    coords = delinearize_many(np.sort(keys), grid)
    return SparseVoxelTensor(grid, coords, rng.standard_normal((n, channels)))


def scan_oracle(flags):
    out, total = [], 0
    for f in flags:
        out.append(total)
        total += int(f)
    return out, total


def rulebook_pairs_oracle(coords, extents, size):
    """Exhaustive (tap, input_row, output_row) triples by dict lookup."""
    taps = tap_displacements(size).tolist()
    active = {tuple(c): i for i, c in enumerate(coords.tolist())}
    triples = set()
    for i, c in enumerate(coords.tolist()):
        for k, d in enumerate(taps):
            nb = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if all(0 <= nb[a] < extents[a] for a in range(3)) and nb in active:
                triples.add((k, active[nb], i))
    return triples


def sparse_conv_scalar(tensor: SparseVoxelTensor, kernel: KernelSpec) -> np.ndarray:
    """Straight-line scalar reimplementation of submanifold convolution."""
    coords = tensor.coords.tolist()
    active = {tuple(c): i for i, c in enumerate(coords)}
    extents = tensor.grid.extents
    taps = tap_displacements(kernel.size).tolist()
    out = np.zeros((len(coords), kernel.out_channels))
    for i, c in enumerate(coords):
        for k, d in enumerate(taps):
            nb = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if not all(0 <= nb[a] < extents[a] for a in range(3)):
                continue
            j = active.get(nb)
            if j is None:
                continue
            for co in range(kernel.out_channels):
                for ci in range(kernel.in_channels):
                    out[i, co] += tensor.feats[j, ci] * kernel.weights[k, ci, co]
    if kernel.bias is not None:
        out += kernel.bias
    return out


def conv2d_scalar(x, weights):
    """Scalar zero-padded stride-1 2D cross-correlation."""
    h, w, cin = x.shape
    kh, kw, _, cout = weights.shape
    rh, rw = kh // 2, kw // 2
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for a in range(kh):
                for b in range(kw):
                    ii, jj = i + a - rh, j + b - rw
                    if 0 <= ii < h and 0 <= jj < w:
                        for ci in range(cin):
                            for co in range(cout):
                                out[i, j, co] += x[ii, jj, ci] * weights[a, b, ci, co]
    return out


def ks_statistic_oracle(a, b):
    """Exhaustive CDF evaluation at every pooled point."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    best = 0.0
    for t in np.concatenate([a, b]):
        best = max(best, abs(float(np.mean(a <= t)) - float(np.mean(b <= t))))
    return best


def connected_components_oracle(cells):
    """Quadratic union-find over 26-connectivity (Chebyshev distance 1)."""
    cells = [tuple(c) for c in cells]
    parent = list(range(len(cells)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            d = max(abs(a - b) for a, b in zip(cells[i], cells[j]))
            if d == 1:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups = {}
    for i in range(len(cells)):
        groups.setdefault(find(i), []).append(cells[i])
    return [sorted(g) for g in groups.values()]


def make_random_graph(rng: np.random.Generator):
    """Random small operator DAG (<= 12 nodes) plus a matching input dict."""
    counter = {"n": 0}

    def fresh(prefix):
        counter["n"] += 1
        return f"{prefix}{counter['n']}"

    nodes = []
    if rng.random() < 0.5:
        h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        c0 = int(rng.integers(1, 4))
        sample = rng.standard_normal((h, w, c0))
        cur, cur_c = "x", c0
        for _ in range(int(rng.integers(1, 4))):
            cout = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            conv = fresh("conv")
            nodes.append(GraphNode(conv, "Conv2D", (cur,), {},
                                   {"w": rng.standard_normal((k, k, cur_c, cout))}))
            cur, cur_c = conv, cout
            if rng.random() < 0.8:
                bias = fresh("bias")
                nodes.append(GraphNode(bias, "BiasAdd", (cur,), {},
                                       {"b": rng.standard_normal(cout)}))
                cur = bias
            if rng.random() < 0.8:
                relu = fresh("relu")
                nodes.append(GraphNode(relu, "Relu", (cur,)))
                cur = relu
        if rng.random() < 0.4:
            side = fresh("conv")
            nodes.append(GraphNode(side, "Conv2D", ("x",), {},
                                   {"w": rng.standard_normal((1, 1, c0, cur_c))}))
            add = fresh("add")
            nodes.append(GraphNode(add, "Add", (cur, side)))
            cur = add
    else:
        n0 = int(rng.integers(2, 6))
        sample = rng.standard_normal(n0)
        cur, cur_n = "x", n0
        for _ in range(int(rng.integers(1, 4))):
            m = int(rng.integers(2, 6))
            mm = fresh("mm")
            nodes.append(GraphNode(mm, "MatMul", (cur,), {},
                                   {"w": rng.standard_normal((cur_n, m))}))
            cur, cur_n = mm, m
            if rng.random() < 0.8:
                bias = fresh("bias")
                nodes.append(GraphNode(bias, "BiasAdd", (cur,), {},
                                       {"b": rng.standard_normal(m)}))
                cur = bias
            if rng.random() < 0.5:
                relu = fresh("relu")
                nodes.append(GraphNode(relu, "Relu", (cur,)))
                cur = relu
    graph = ComputeGraph(tuple(nodes), ("x",), (cur,))
    return graph, {"x": sample}


def graphs_equal(g1: ComputeGraph, g2: ComputeGraph) -> bool:
    if g1.inputs != g2.inputs or g1.outputs != g2.outputs:
        return False
    n1 = {n.id: n for n in g1.nodes}
    n2 = {n.id: n for n in g2.nodes}
    if set(n1) != set(n2):
        return False
    for nid, a in n1.items():
        b = n2[nid]
        if a.kind != b.kind or a.inputs != b.inputs or a.attrs != b.attrs:
            return False
        if set(a.weights) != set(b.weights):
            return False
        if any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights):
            return False
    return True
