import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import load_graph, random_dag
from dsa.graph import (
    BudgetModel,
    GraphError,
    NetGraph,
    Node,
    build_flops_model,
    count_flops,
    eval_budget,
    eval_budget_grad,
    topological_group,
)


def per_channel_flops(graph, groups, kept):
    """Independent oracle: track the set of live channel ids on every tensor
    and count one MAC per (input channel, output channel, kernel tap, pixel)."""
    live = {}
    total = 0
    for nid in graph.order:
        n = graph[nid]
        ins = [live[p] for p in n.inputs]
        if n.kind == "INPUT":
            out = [(nid, i) for i in range(graph.shapes[nid].C)]
        elif n.kind == "NORMAL_CONV":
            out = [(nid, i) for i in range(kept[groups.group_of[nid]])]
            for _ in ins[0]:
                for _ in out:
                    total += 2 * graph.kss(nid) * graph.oss(nid)
        elif n.kind == "DEPTHWISE_CONV":
            out = ins[0][: kept[groups.group_of[nid]]]
            total += 2 * len(out) * graph.kss(nid) * graph.oss(nid)
        elif n.kind == "DENSE":
            out = [(nid, i) for i in range(graph.shapes[nid].C)]
            total += 2 * len(ins[0]) * len(out) * graph.kss(nid)
        elif n.kind == "CONCAT":
            out = [c for part in ins for c in part]
        else:
            out = ins[0]
        live[nid] = out
    return total


# ---- construction and validation -------------------------------------------


def test_fixture_shapes():
    g = load_graph("depthwise")
    assert g.shapes["dw2"].C == 16
    assert (g.shapes["dw2"].H, g.shapes["dw2"].W) == (4, 4)
    assert g.kss("pw1") == 1 and g.kss("dw1") == 9
    assert g.oss("conv1") == 64


def test_cycle_rejected():
    nodes = [
        Node("x", "INPUT", (), {"C": 1, "H": 4, "W": 4}),
        Node("a", "ADD", ("x", "b")),
        Node("b", "RELU", ("a",)),
    ]
    with pytest.raises(GraphError, match="cycle"):
        NetGraph(nodes)


def test_add_mismatch_rejected():
    nodes = [
        Node("x", "INPUT", (), {"C": 1, "H": 4, "W": 4}),
        Node("c1", "NORMAL_CONV", ("x",), {"C": 4}),
        Node("c2", "NORMAL_CONV", ("x",), {"C": 6}),
        Node("s", "ADD", ("c1", "c2")),
    ]
    with pytest.raises(GraphError, match="mismatched"):
        NetGraph(nodes)


@pytest.mark.parametrize(
    "nodes,msg",
    [
        ([Node("x", "INPUT", (), {"C": 1}), Node("r", "RELU", ())], "no predecessor"),
        ([Node("x", "INPUT", (), {"C": 1}), Node("x", "RELU", ("x",))], "duplicate"),
        ([Node("x", "INPUT", (), {"C": 1}), Node("r", "SOFTMAX", ("x",))], "unknown kind"),
        ([Node("x", "INPUT", (), {"C": 1}), Node("r", "RELU", ("y",))], "unknown predecessor"),
    ],
)
def test_invalid_graphs(nodes, msg):
    with pytest.raises(GraphError, match=msg):
        NetGraph(nodes)


def test_json_roundtrip(tmp_path):
    g = load_graph("residual")
    g.dump(tmp_path / "g.json")
    h = NetGraph.load(tmp_path / "g.json")
    assert h.to_dict() == g.to_dict()
    assert h.shapes == g.shapes


# ---- grouping ---------------------------------------------------------------

EXPECTED_GROUPS = {
    "chain": [{"conv1"}, {"conv2"}, {"conv3"}],
    "residual": [{"stem", "b1_conv2", "b2_conv2"}, {"b1_conv1"}, {"b2_conv1"}],
    "concat": [{"stem"}, {"branch_a"}, {"branch_b"}, {"head"}],
    "depthwise": [{"conv1", "dw1"}, {"pw1", "dw2"}, {"pw2"}],
}


@pytest.mark.parametrize("name", sorted(EXPECTED_GROUPS))
def test_grouping_fixtures(name):
    groups = topological_group(load_graph(name))
    assert groups.partition() == {frozenset(s) for s in EXPECTED_GROUPS[name]}
    # index order follows the first conv of each group
    assert groups.members(0)[0] == load_graph(name).convs[0]


def test_grouping_rejects_input_shortcut():
    nodes = [
        Node("x", "INPUT", (), {"C": 4, "H": 4, "W": 4}),
        Node("c", "NORMAL_CONV", ("x",), {"C": 4}),
        Node("s", "ADD", ("x", "c")),
    ]
    with pytest.raises(GraphError, match="INPUT"):
        topological_group(NetGraph(nodes))


@given(st.integers(0, 2**32 - 1))
def test_grouping_order_independent(seed):
    rng = np.random.default_rng(seed)
    g = random_dag(rng)
    groups = topological_group(g)
    # declare nodes in a different (still valid) order: reverse topological
    # order of independent branches is not valid, so shuffle among ready nodes
    nodes = list(g.nodes)
    order, placed = [], set()
    pending = nodes[:]
    while pending:
        ready = [n for n in pending if all(p in placed for p in n.inputs)]
        pick = ready[int(rng.integers(len(ready)))]
        order.append(pick)
        placed.add(pick.id)
        pending.remove(pick)
    other = topological_group(NetGraph(order))
    assert other.partition() == groups.partition()
    assert sorted(groups.group_of) == sorted(g.convs)
    assert groups.K <= len(g.convs)


# ---- budget model -----------------------------------------------------------


def test_single_conv_flops():
    g = NetGraph([Node("x", "INPUT", (), {"C": 3, "H": 8, "W": 8}), Node("c", "NORMAL_CONV", ("x",), {"C": 4})])
    m = build_flops_model(g, topological_group(g))
    assert m.F_B.tolist() == [13824]
    assert not m.F_A.any()


def test_two_conv_flops():
    g = NetGraph(
        [
            Node("x", "INPUT", (), {"C": 3, "H": 8, "W": 8}),
            Node("c0", "NORMAL_CONV", ("x",), {"C": 4}),
            Node("c1", "NORMAL_CONV", ("c0",), {"C": 8}),
        ]
    )
    m = build_flops_model(g, topological_group(g))
    assert m.F_A[1, 0] == 36864
    assert m.F_B[0] == 2 * 3 * 4 * 9 * 64


@pytest.mark.parametrize("name", sorted(EXPECTED_GROUPS))
def test_full_and_zero(name):
    g = load_graph(name)
    groups = topological_group(g)
    m = build_flops_model(g, groups)
    assert eval_budget(m, np.ones(groups.K, dtype=np.int64)) == count_flops(g, groups)
    assert eval_budget(m, np.ones(groups.K, dtype=np.int64)) == per_channel_flops(g, groups, groups.channels(g))
    assert eval_budget(m, np.zeros(groups.K)) == 0


def test_dimension_mismatch():
    m = BudgetModel(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        eval_budget(m, np.ones(3))
    with pytest.raises(ValueError):
        eval_budget_grad(m, np.ones(1))


def test_grad_closed_forms():
    m = BudgetModel(np.zeros((2, 2)), np.array([3.0, 5.0]))
    assert eval_budget_grad(m, np.array([0.2, 0.9])).tolist() == [3.0, 5.0]
    m = BudgetModel(np.array([[2.0]]), np.array([7.0]))
    assert eval_budget_grad(m, np.array([0.5])).tolist() == [2 * 2.0 * 0.5 + 7.0]


@given(st.integers(0, 2**32 - 1))
def test_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 6))
    m = BudgetModel(rng.uniform(0, 100, (K, K)), rng.uniform(0, 100, K))
    A = rng.uniform(0.1, 0.9, K)
    h = 1e-5
    fd = np.array([(eval_budget(m, A + h * e) - eval_budget(m, A - h * e)) / (2 * h) for e in np.eye(K)])
    np.testing.assert_allclose(eval_budget_grad(m, A), fd, rtol=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_budget_exact_on_random_dags(seed):
    rng = np.random.default_rng(seed)
    g = random_dag(rng)
    groups = topological_group(g)
    m = build_flops_model(g, groups)
    widths = groups.channels(g)
    kept = [int(rng.integers(0, c + 1)) for c in widths]
    A = np.array([Fraction(n, c) for n, c in zip(kept, widths)], dtype=object)
    exact = eval_budget(m, A)
    assert exact == count_flops(g, groups, kept) == per_channel_flops(g, groups, kept)


@given(st.integers(0, 2**32 - 1))
def test_budget_monotone(seed):
    rng = np.random.default_rng(seed)
    g = random_dag(rng)
    groups = topological_group(g)
    m = build_flops_model(g, groups)
    assert (m.F_A >= 0).all() and (m.F_B >= 0).all()
    A = rng.uniform(0, 1, groups.K)
    k = int(rng.integers(groups.K))
    B = A.copy()
    B[k] = rng.uniform(A[k], 1)
    assert eval_budget(m, B) >= eval_budget(m, A)


def test_budget_model_json_roundtrip():
    g = load_graph("residual")
    m = build_flops_model(g, topological_group(g))
    d = json.loads(json.dumps(m.to_dict()))
    assert d["full_flops"] == count_flops(g, topological_group(g))
    m2 = BudgetModel.from_dict(d)
    assert (m2.F_A == m.F_A).all() and (m2.F_B == m.F_B).all()


def test_dense_input_inherits_last_group():
    g = load_graph("residual")
    groups = topological_group(g)
    m = build_flops_model(g, groups)
    k = groups.group_of["b2_conv2"]
    # classifier FLOPs scale linearly with the shared residual group's ratio
    assert m.F_B[k] >= 2 * 8 * 10
