"""Operator-graph IR with prune / quantize / fuse passes and a reference
interpreter.

Every node produces exactly one value named by the node id; edges are the
value references in ``node.inputs``.  The interpreter evaluates in
topological order with 64-bit arithmetic and serves as the equivalence
oracle for all passes.

Graphs serialize as JSON: node list (id, kind, inputs, attrs, base64 weight
blobs), explicit edge pairs, declared inputs/outputs.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import GraphError
from .layers import conv2d
from .spconv import KernelSpec, sparse_conv
from .voxels import SparseVoxelTensor

logger = logging.getLogger(__name__)

NODE_KINDS = (
    "Const", "Conv2D", "SparseConv3D", "BiasAdd", "Relu", "Add", "MatMul",
    "Quantize", "Dequantize", "FusedConvBiasRelu", "FusedMatMulBias",
)

# Kinds whose "w" tensor participates in weight quantization.
WEIGHTED_KINDS = ("Conv2D", "MatMul", "SparseConv3D",
                  "FusedConvBiasRelu", "FusedMatMulBias")


@dataclasses.dataclass(frozen=True)
class GraphNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: Mapping = dataclasses.field(default_factory=dict)
    weights: Mapping[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", dict(self.attrs))
        object.__setattr__(self, "weights",
                           {k: np.asarray(v) for k, v in dict(self.weights).items()})


@dataclasses.dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[GraphNode, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        nodes = tuple(self.nodes)
        inputs = tuple(self.inputs)
        outputs = tuple(self.outputs)
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node ids (single producer per value)")
        known = set(inputs)
        if known & set(ids):
            raise GraphError("node id collides with a declared graph input")
        known |= set(ids)
        for node in nodes:
            for src in node.inputs:
                if src not in known:
                    raise GraphError(f"node {node.id} references unknown value {src!r}")
        for out in outputs:
            if out not in known:
                raise GraphError(f"declared output {out!r} has no producer")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        self._topological()  # raises on cycles

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def edges(self) -> list[tuple[str, str]]:
        """Value-flow pairs (producer value, consumer node)."""
        return [(src, node.id) for node in self.nodes for src in node.inputs]

    def _topological(self) -> list[GraphNode]:
        by_id = {n.id: n for n in self.nodes}
        pending = {n.id: sum(1 for s in n.inputs if s in by_id) for n in self.nodes}
        ready = [nid for nid, deg in pending.items() if deg == 0]
        consumers: dict[str, list[str]] = {}
        for node in self.nodes:
            for src in node.inputs:
                if src in by_id:
                    consumers.setdefault(src, []).append(node.id)
        order = []
        while ready:
            nid = ready.pop()
            order.append(by_id[nid])
            for follower in consumers.get(nid, ()):
                pending[follower] -= 1
                if pending[follower] == 0:
                    ready.append(follower)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order


def _weight_or_input(node: GraphNode, values: dict, name: str = "w",
                     input_pos: int = 1):
    if name in node.weights:
        return np.asarray(node.weights[name], dtype=np.float64)
    if len(node.inputs) > input_pos:
        return np.asarray(values[node.inputs[input_pos]], dtype=np.float64)
    raise GraphError(f"node {node.id} has neither inline {name!r} nor a weight input")


def _kernel_from_node(node: GraphNode, values: dict) -> KernelSpec:
    attrs = node.attrs
    w = _weight_or_input(node, values)
    bias = node.weights.get("b")
    return KernelSpec(tuple(attrs["size"]), int(attrs["in_channels"]),
                      int(attrs["out_channels"]), w, bias)


def execute_graph(graph: ComputeGraph, inputs: Mapping) -> list:
    """Evaluate the graph; returns the declared outputs in order."""
    values: dict = {}
    for name in graph.inputs:
        if name not in inputs:
            raise GraphError(f"missing graph input {name!r}")
        values[name] = inputs[name]

    for node in graph._topological():
        k = node.kind
        if k == "Const":
            result = node.weights["value"]
        elif k == "Conv2D":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            result = conv2d(x, _weight_or_input(node, values))
        elif k == "MatMul":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            result = x @ _weight_or_input(node, values)
        elif k == "BiasAdd":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            result = x + _weight_or_input(node, values, name="b")
        elif k == "Relu":
            result = np.maximum(np.asarray(values[node.inputs[0]], dtype=np.float64), 0.0)
        elif k == "Add":
            a = np.asarray(values[node.inputs[0]], dtype=np.float64)
            b = np.asarray(values[node.inputs[1]], dtype=np.float64)
            result = a + b
        elif k == "Quantize":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            scale = float(node.attrs["scale"])
            result = np.clip(np.rint(x / scale), -127, 127).astype(np.int8)
        elif k == "Dequantize":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            result = x * float(node.attrs["scale"])
        elif k == "FusedConvBiasRelu":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            pre = conv2d(x, _weight_or_input(node, values)) + node.weights["b"]
            result = np.maximum(pre, 0.0)
        elif k == "FusedMatMulBias":
            x = np.asarray(values[node.inputs[0]], dtype=np.float64)
            result = x @ _weight_or_input(node, values) + node.weights["b"]
        elif k == "SparseConv3D":
            tensor = values[node.inputs[0]]
            if not isinstance(tensor, SparseVoxelTensor):
                raise GraphError(f"node {node.id} expects a sparse voxel tensor input")
            result = sparse_conv(tensor, _kernel_from_node(node, values))
        else:  # pragma: no cover - NODE_KINDS is checked at construction
            raise GraphError(f"unsupported kind {k!r}")
        values[node.id] = result

    return [values[name] for name in graph.outputs]


# ---------------------------------------------------------------------------
# passes


def prune_graph(graph: ComputeGraph, magnitude_threshold: float) -> ComputeGraph:
    """Zero weights below the threshold, bypass adds fed by provably-zero
    producers, and drop nodes that no longer reach an output.

    The interpreter drift this introduces is bounded by the removed weight
    magnitude; the totals are reported via logging, never asserted here.
    """
    thr = float(magnitude_threshold)
    if thr < 0:
        raise ValueError(f"threshold must be non-negative, got {thr}")

    zeroed_count = 0
    zeroed_mag = 0.0
    nodes = []
    for node in graph.nodes:
        new_w = {}
        for name, arr in node.weights.items():
            if thr > 0 and np.issubdtype(arr.dtype, np.floating):
                mask = np.abs(arr) < thr
                if mask.any():
                    zeroed_count += int(mask.sum())
                    zeroed_mag += float(np.abs(arr[mask]).sum())
                    arr = np.where(mask, 0.0, arr)
            new_w[name] = arr
        nodes.append(dataclasses.replace(node, weights=new_w))
    logger.info("prune: zeroed %d weights (L1 magnitude %.6g)", zeroed_count, zeroed_mag)

    by_id = {n.id: n for n in nodes}
    pruned = ComputeGraph(tuple(nodes), graph.inputs, graph.outputs)

    # Identically-zero values regardless of input.
    zero: set[str] = set()
    for node in pruned._topological():
        k, w = node.kind, node.weights
        if k in ("Conv2D", "MatMul") and "w" in w and not np.any(w["w"]):
            zero.add(node.id)
        elif k == "Const" and not np.any(w["value"]):
            zero.add(node.id)
        elif k in ("Relu", "Quantize", "Dequantize") and node.inputs[0] in zero:
            zero.add(node.id)
        elif k == "BiasAdd" and node.inputs[0] in zero \
                and "b" in w and not np.any(w["b"]):
            zero.add(node.id)
        elif k == "Add" and all(src in zero for src in node.inputs):
            zero.add(node.id)

    # Bypass two-input adds with exactly one zero operand (linear absorption).
    bypass: dict[str, str] = {}
    for node in nodes:
        if node.kind == "Add" and len(node.inputs) == 2:
            a, b = node.inputs
            if (a in zero) != (b in zero):
                bypass[node.id] = b if a in zero else a

    def resolve(value: str) -> str:
        while value in bypass:
            value = bypass[value]
        return value

    rewired = []
    for node in nodes:
        if node.id in bypass:
            continue
        rewired.append(dataclasses.replace(
            node, inputs=tuple(resolve(s) for s in node.inputs)))
    outputs = tuple(resolve(o) for o in graph.outputs)

    # Dead-code elimination: keep only producers reaching an output.
    live_ids = {n.id for n in rewired}
    reachable: set[str] = set()
    stack = [o for o in outputs if o in live_ids]
    by_id = {n.id: n for n in rewired}
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        stack.extend(s for s in by_id[nid].inputs if s in live_ids)
    kept = tuple(n for n in rewired if n.id in reachable)
    return ComputeGraph(kept, graph.inputs, outputs)


def quantize_graph(graph: ComputeGraph) -> tuple[ComputeGraph, dict[str, float]]:
    """Symmetric per-tensor int8 weight quantization in QDQ form.

    Each weighted node's "w" tensor moves into an int8 Const feeding a
    Dequantize node wired in as the node's weight input; scale =
    max|w| / 127 (1.0 for all-zero tensors), stored value = round(w/scale).
    Bias vectors stay in float.  Returns the rewritten graph and the
    per-tensor scales keyed by ``node_id/w``.
    """
    scales: dict[str, float] = {}
    nodes: list[GraphNode] = []
    for node in graph.nodes:
        if node.kind not in WEIGHTED_KINDS or "w" not in node.weights:
            nodes.append(node)
            continue
        w = np.asarray(node.weights["w"], dtype=np.float64)
        max_abs = float(np.abs(w).max()) if w.size else 0.0
        scale = max_abs / 127.0 if max_abs > 0 else 1.0
        stored = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
        scales[f"{node.id}/w"] = scale

        const_id = f"{node.id}__wq"
        dq_id = f"{node.id}__wdq"
        nodes.append(GraphNode(const_id, "Const", (), {}, {"value": stored}))
        nodes.append(GraphNode(dq_id, "Dequantize", (const_id,), {"scale": scale}))
        rest = {k: v for k, v in node.weights.items() if k != "w"}
        nodes.append(dataclasses.replace(
            node, inputs=node.inputs + (dq_id,), weights=rest))
    return ComputeGraph(tuple(nodes), graph.inputs, graph.outputs), scales


def annotate_placement(graph: ComputeGraph, device: str = "generic") -> ComputeGraph:
    """Tag every node with a target device; semantics are untouched.

    Placeholder for segment-to-hardware assignment: with a single execution
    backend the pass only records the placement attribute.
    """
    nodes = tuple(dataclasses.replace(n, attrs={**n.attrs, "device": device})
                  for n in graph.nodes)
    return ComputeGraph(nodes, graph.inputs, graph.outputs)


class FusePattern(NamedTuple):
    kinds: tuple[str, ...]
    fused_kind: str


DEFAULT_FUSE_PATTERNS = (
    FusePattern(("Conv2D", "BiasAdd", "Relu"), "FusedConvBiasRelu"),
    FusePattern(("MatMul", "BiasAdd"), "FusedMatMulBias"),
)


def fuse_graph(graph: ComputeGraph,
               patterns: Sequence[FusePattern] = DEFAULT_FUSE_PATTERNS) -> ComputeGraph:
    """Collapse single-consumer operator chains into fused nodes.

    A chain matches when every intermediate value has exactly one consumer
    and is not a declared graph output.  The fused node keeps the tail's id
    (downstream edges stay put) and the head's inputs.  Node count never
    increases; the pass is idempotent for the default patterns.
    """
    by_id = {n.id: n for n in graph.nodes}
    consumers: dict[str, list[str]] = {}
    for node in graph.nodes:
        for src in node.inputs:
            consumers.setdefault(src, []).append(node.id)
    output_set = set(graph.outputs)

    used: set[str] = set()
    fused_nodes: list[GraphNode] = []
    for pattern in patterns:
        for node in graph.nodes:
            if node.id in used or node.kind != pattern.kinds[0]:
                continue
            chain = [node]
            ok = True
            for kind in pattern.kinds[1:]:
                cur = chain[-1]
                cons = consumers.get(cur.id, [])
                if len(cons) != 1 or cur.id in output_set:
                    ok = False
                    break
                nxt = by_id[cons[0]]
                if nxt.kind != kind or nxt.id in used or not nxt.inputs \
                        or nxt.inputs[0] != cur.id or len(nxt.inputs) != 1:
                    ok = False
                    break
                chain.append(nxt)
            if not ok:
                continue
            merged = dict(chain[0].weights)
            for mid in chain[1:]:
                if set(mid.weights) & set(merged):
                    ok = False
                    break
                merged.update(mid.weights)
            if not ok:
                continue
            used.update(n.id for n in chain)
            fused_nodes.append(GraphNode(chain[-1].id, pattern.fused_kind,
                                         chain[0].inputs, dict(chain[0].attrs), merged))

    if not used:
        return graph
    kept = [n for n in graph.nodes if n.id not in used]
    return ComputeGraph(tuple(kept) + tuple(fused_nodes), graph.inputs, graph.outputs)


# ---------------------------------------------------------------------------
# serialization


def _encode_array(arr: np.ndarray) -> dict:
    return {"dtype": str(arr.dtype), "shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")}


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(doc["shape"]).copy()


def graph_to_json(graph: ComputeGraph) -> dict:
    return {
        "inputs": list(graph.inputs),
        "outputs": list(graph.outputs),
        "nodes": [{
            "id": n.id,
            "kind": n.kind,
            "inputs": list(n.inputs),
            "attrs": dict(n.attrs),
            "weights": {k: _encode_array(v) for k, v in n.weights.items()},
        } for n in graph.nodes],
        "edges": graph.edges(),
    }


def graph_from_json(doc: Mapping) -> ComputeGraph:
    nodes = tuple(
        GraphNode(d["id"], d["kind"], tuple(d.get("inputs", ())),
                  d.get("attrs", {}),
                  {k: _decode_array(v) for k, v in d.get("weights", {}).items()})
        for d in doc["nodes"])
    graph = ComputeGraph(nodes, tuple(doc["inputs"]), tuple(doc["outputs"]))
    declared = {tuple(e) for e in doc.get("edges", [])}
    if declared and declared != set(graph.edges()):
        raise GraphError("edge list inconsistent with node inputs")
    return graph


def save_graph(path, graph: ComputeGraph) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json(graph), fh)


def load_graph(path) -> ComputeGraph:
    with open(path) as fh:
        return graph_from_json(json.load(fh))
