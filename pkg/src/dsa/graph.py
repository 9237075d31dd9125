"""Computation DAG, topological grouping and the quadratic FLOPs budget model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

INPUT = "INPUT"
NORMAL_CONV = "NORMAL_CONV"
DEPTHWISE_CONV = "DEPTHWISE_CONV"
DENSE = "DENSE"
CONCAT = "CONCAT"
ADD = "ADD"
RELU = "RELU"
BN = "BN"
POOL = "POOL"

KINDS = (INPUT, NORMAL_CONV, DEPTHWISE_CONV, DENSE, CONCAT, ADD, RELU, BN, POOL)
CONV_KINDS = (NORMAL_CONV, DEPTHWISE_CONV)
# incoming edges of these are cut before looking for connected components
SPLIT_KINDS = (NORMAL_CONV, CONCAT, DENSE)
CHANNELWISE_KINDS = (DEPTHWISE_CONV, ADD, RELU, BN, POOL)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def attr(self, key: str, default: Any = None) -> Any:
        return self.attrs.get(key, default)


@dataclass(frozen=True)
class Shape:
    C: int
    H: int
    W: int

    @property
    def spatial(self) -> int:
        return self.H * self.W


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class NetGraph:
    """An immutable DAG of typed nodes.

    Node order is the order given at construction; each node lists its
    predecessors in ``inputs`` (order matters for CONCAT). Shapes are
    inferred once from the INPUT node attributes.
    """

    def __init__(self, nodes: Sequence[Node]):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self._by_id = {}
        for n in self.nodes:
            if n.kind not in KINDS:
                raise GraphError(f"node {n.id!r}: unknown kind {n.kind!r}")
            if n.id in self._by_id:
                raise GraphError(f"duplicate node id {n.id!r}")
            self._by_id[n.id] = n
        for n in self.nodes:
            if n.kind == INPUT:
                if n.inputs:
                    raise GraphError(f"INPUT node {n.id!r} has predecessors")
            elif not n.inputs:
                raise GraphError(f"node {n.id!r} has no predecessor")
            for p in n.inputs:
                if p not in self._by_id:
                    raise GraphError(f"node {n.id!r}: unknown predecessor {p!r}")
            if n.kind in (RELU, BN, POOL, NORMAL_CONV, DEPTHWISE_CONV, DENSE) and len(n.inputs) != 1:
                raise GraphError(f"{n.kind} node {n.id!r} takes exactly one input")
        self.order: tuple[str, ...] = self._toposort()
        self.shapes: dict[str, Shape] = self._infer_shapes()
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.inputs:
                succ[p].append(n.id)
        self._succ = {k: tuple(v) for k, v in succ.items()}

    def __getitem__(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self._succ[node_id]

    @property
    def convs(self) -> list[str]:
        return [i for i in self.order if self[i].kind in CONV_KINDS]

    @property
    def input_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.kind == INPUT]

    @property
    def output_id(self) -> str:
        sinks = [i for i in self.order if not self._succ[i]]
        if len(sinks) != 1:
            raise GraphError(f"expected exactly one sink node, found {sinks}")
        return sinks[0]

    def _toposort(self) -> tuple[str, ...]:
        # Kahn's algorithm; ties broken by declaration order
        indeg = {n.id: len(n.inputs) for n in self.nodes}
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.inputs:
                succ[p].append(n.id)
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        ready = sorted((i for i, d in indeg.items() if d == 0), key=pos.__getitem__)
        out = []
        while ready:
            cur = ready.pop(0)
            out.append(cur)
            for s in succ[cur]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
            ready.sort(key=pos.__getitem__)
        if len(out) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return tuple(out)

    def _infer_shapes(self) -> dict[str, Shape]:
        shapes: dict[str, Shape] = {}
        for nid in self.order:
            n = self[nid]
            ins = [shapes[p] for p in n.inputs]
            if n.kind == INPUT:
                s = Shape(int(n.attr("C")), int(n.attr("H", 1)), int(n.attr("W", 1)))
            elif n.kind in CONV_KINDS:
                k = int(n.attr("kernel", 3))
                stride = int(n.attr("stride", 1))
                pad = int(n.attr("padding", k // 2))
                if n.kind == DEPTHWISE_CONV:
                    c = int(n.attr("C", ins[0].C))
                    if c != ins[0].C:
                        raise GraphError(f"depthwise conv {nid!r} must keep {ins[0].C} channels")
                else:
                    c = int(n.attr("C"))
                s = Shape(c, _conv_out(ins[0].H, k, stride, pad), _conv_out(ins[0].W, k, stride, pad))
            elif n.kind == DENSE:
                s = Shape(int(n.attr("C")), 1, 1)
            elif n.kind == CONCAT:
                if len({(x.H, x.W) for x in ins}) != 1:
                    raise GraphError(f"CONCAT {nid!r} inputs differ in spatial size")
                s = Shape(sum(x.C for x in ins), ins[0].H, ins[0].W)
            elif n.kind == ADD:
                if len({x.C for x in ins}) != 1:
                    raise GraphError(f"ADD {nid!r} predecessors have mismatched channels {[x.C for x in ins]}")
                if len({(x.H, x.W) for x in ins}) != 1:
                    raise GraphError(f"ADD {nid!r} inputs differ in spatial size")
                s = ins[0]
            elif n.kind == POOL:
                mode = n.attr("mode", "max")
                if mode == "global":
                    s = Shape(ins[0].C, 1, 1)
                else:
                    k = int(n.attr("kernel", 2))
                    stride = int(n.attr("stride", k))
                    s = Shape(ins[0].C, _conv_out(ins[0].H, k, stride, 0), _conv_out(ins[0].W, k, stride, 0))
            else:  # RELU, BN
                s = ins[0]
            if s.C <= 0 or s.H <= 0 or s.W <= 0:
                raise GraphError(f"node {nid!r} has non-positive shape {s}")
            shapes[nid] = s
        return shapes

    def kss(self, node_id: str) -> int:
        n = self[node_id]
        if n.kind == DENSE:
            return self.shapes[n.inputs[0]].spatial
        return int(n.attr("kernel", 3)) ** 2

    def oss(self, node_id: str) -> int:
        return self.shapes[node_id].spatial

    def to_dict(self) -> dict:
        out = []
        for n in self.nodes:
            d = {"id": n.id, "kind": n.kind}
            if n.inputs:
                d["inputs"] = list(n.inputs)
            d.update(n.attrs)
            out.append(d)
        return {"nodes": out}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetGraph":
        nodes = []
        for d in doc["nodes"]:
            d = dict(d)
            nid = str(d.pop("id"))
            kind = str(d.pop("kind")).upper()
            inputs = tuple(str(x) for x in d.pop("inputs", ()))
            nodes.append(Node(nid, kind, inputs, d))
        return cls(nodes)

    @classmethod
    def load(cls, path: str | Path) -> "NetGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass(frozen=True)
class GroupAssignment:
    group_of: Mapping[str, int]
    K: int

    def members(self, k: int) -> list[str]:
        return [c for c, g in self.group_of.items() if g == k]

    def channels(self, graph: NetGraph) -> list[int]:
        """Channel count of each group (shared by all its convs)."""
        out = [0] * self.K
        for c, k in self.group_of.items():
            out[k] = graph.shapes[c].C
        return out

    def partition(self) -> set[frozenset[str]]:
        return {frozenset(self.members(k)) for k in range(self.K)}


class _DisjointSet:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def topological_group(graph: NetGraph) -> GroupAssignment:
    """Assign every conv to a group of convs that must share one keep ratio.

    Incoming edges of split nodes (normal convs, concats, dense layers) are
    dropped; the remaining undirected connected components that contain a
    conv become groups. Group indices follow the topological order of each
    group's first conv.
    """
    ds = _DisjointSet(graph.order)
    for n in graph.nodes:
        if n.kind in SPLIT_KINDS:
            continue
        for p in n.inputs:
            ds.union(p, n.id)

    components: dict[str, list[str]] = {}
    for nid in graph.order:
        components.setdefault(ds.find(nid), []).append(nid)

    group_of: dict[str, int] = {}
    roots: dict[str, int] = {}
    for nid in graph.order:
        if graph[nid].kind not in CONV_KINDS:
            continue
        root = ds.find(nid)
        if root not in roots:
            comp = components[root]
            bad = [m for m in comp if graph[m].kind in (INPUT, CONCAT)]
            if bad:
                raise GraphError(
                    f"conv {nid!r} shares channels with {bad[0]!r} ({graph[bad[0]].kind}); "
                    "such groups cannot be pruned consistently"
                )
            widths = {graph.shapes[m].C for m in comp if graph[m].kind in CONV_KINDS}
            if len(widths) != 1:
                raise GraphError(f"group of {nid!r} mixes channel counts {sorted(widths)}")
            roots[root] = len(roots)
        group_of[nid] = roots[root]
    return GroupAssignment(group_of, len(roots))


class BudgetLike(Protocol):
    F_A: np.ndarray
    F_B: np.ndarray


@dataclass
class BudgetModel:
    """Resource model ``F(A) = A^T F_A A + F_B^T A`` over group keep ratios."""

    F_A: np.ndarray
    F_B: np.ndarray
    budget: float | None = None

    @property
    def K(self) -> int:
        return len(self.F_B)

    @property
    def full_flops(self):
        return eval_budget(self, np.ones(self.K, dtype=self.F_B.dtype))

    def to_dict(self) -> dict:
        d = {
            "K": self.K,
            "F_A": [int(x) for x in np.asarray(self.F_A).ravel()],
            "F_B": [int(x) for x in self.F_B],
            "full_flops": int(self.full_flops),
        }
        if self.budget is not None:
            d["budget"] = self.budget
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BudgetModel":
        K = int(d["K"])
        F_A = np.asarray(d["F_A"], dtype=np.int64).reshape(K, K)
        F_B = np.asarray(d["F_B"], dtype=np.int64)
        return cls(F_A, F_B, d.get("budget"))


def _check_dim(model: BudgetLike, A) -> np.ndarray:
    A = np.asarray(A)
    K = len(model.F_B)
    if A.ndim != 1 or A.shape[0] != K or np.shape(model.F_A) != (K, K):
        raise ValueError(f"keep-ratio vector of shape {A.shape} does not match a {K}-group model")
    return A


def eval_budget(model: BudgetLike, A):
    """Resource consumption at keep ratios ``A``.

    Works on float arrays and on object arrays of ``fractions.Fraction``
    (exact arithmetic).
    """
    A = _check_dim(model, A)
    F_A = np.asarray(model.F_A)
    F_B = np.asarray(model.F_B)
    if A.dtype == object:
        F_A = F_A.astype(object)
        F_B = F_B.astype(object)
    return A @ F_A @ A + F_B @ A


def eval_budget_grad(model: BudgetLike, A) -> np.ndarray:
    A = _check_dim(model, A).astype(float)
    F_A = np.asarray(model.F_A, dtype=float)
    return (F_A + F_A.T) @ A + np.asarray(model.F_B, dtype=float)


def build_flops_model(graph: NetGraph, groups: GroupAssignment) -> BudgetModel:
    """Quadratic FLOPs model (FLOPs counted as 2 x MACs).

    For each normal conv (and dense layer) the predecessor chain is walked
    back through concats and channel-wise ops until it hits the convs or
    input that produce its input channels.
    """
    K = groups.K
    F_A = np.zeros((K, K), dtype=np.int64)
    F_B = np.zeros(K, dtype=np.int64)
    for mid in graph.order:
        m = graph[mid]
        if m.kind == DEPTHWISE_CONV:
            F_B[groups.group_of[mid]] += 2 * graph.shapes[mid].C * graph.kss(mid) * graph.oss(mid)
            continue
        if m.kind not in (NORMAL_CONV, DENSE):
            continue
        # dense outputs are never pruned: their keep ratio is the constant 1
        mk = groups.group_of.get(mid)
        coeff = 2 * graph.shapes[mid].C * graph.kss(mid) * graph.oss(mid)
        stack = list(m.inputs)
        while stack:
            n = graph[stack.pop()]
            if n.kind == CONCAT:
                stack.extend(n.inputs)
            elif n.kind in CONV_KINDS:
                nk = groups.group_of[n.id]
                term = graph.shapes[n.id].C * coeff
                if mk is None:
                    F_B[nk] += term
                else:
                    F_A[mk, nk] += term
            elif n.kind == INPUT:
                if mk is None:
                    raise GraphError(f"dense layer {mid!r} reads the input directly; its FLOPs are not budgetable")
                F_B[mk] += graph.shapes[n.id].C * coeff
            elif n.kind == DENSE:
                raise GraphError(f"{mid!r} consumes dense layer {n.id!r}; only conv-fed layers are budgetable")
            else:
                # channel-wise op: channels come from its first predecessor
                stack.append(n.inputs[0])
    return BudgetModel(F_A, F_B)


def count_flops(graph: NetGraph, groups: GroupAssignment, kept: Sequence[int] | None = None) -> int:
    """Brute-force FLOPs of the network with ``kept[k]`` channels in group k.

    Channel counts are propagated forward through the graph and each layer's
    multiply-accumulates are counted directly; independent of the quadratic
    model.
    """
    if kept is None:
        kept = groups.channels(graph)
    if len(kept) != groups.K:
        raise ValueError(f"expected {groups.K} channel counts, got {len(kept)}")
    ch: dict[str, int] = {}
    total = 0
    for nid in graph.order:
        n = graph[nid]
        cin = [ch[p] for p in n.inputs]
        if n.kind == INPUT:
            c = graph.shapes[nid].C
        elif n.kind == NORMAL_CONV:
            c = int(kept[groups.group_of[nid]])
            total += 2 * cin[0] * c * graph.kss(nid) * graph.oss(nid)
        elif n.kind == DEPTHWISE_CONV:
            c = int(kept[groups.group_of[nid]])
            total += 2 * c * graph.kss(nid) * graph.oss(nid)
        elif n.kind == DENSE:
            c = graph.shapes[nid].C
            total += 2 * cin[0] * graph.kss(nid) * c
        elif n.kind == CONCAT:
            c = sum(cin)
        elif n.kind == ADD:
            if len(set(cin)) != 1:
                raise GraphError(f"ADD {nid!r} receives pruned widths {cin}")
            c = cin[0]
        else:
            c = cin[0]
        ch[nid] = c
    return total
