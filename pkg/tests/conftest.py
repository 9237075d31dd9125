import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from dsa.graph import NetGraph, Node

FIXTURES = Path(__file__).parent / "fixtures"
ROOT = Path(__file__).parent.parent

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def load_graph(name: str) -> NetGraph:
    return NetGraph.load(FIXTURES / f"{name}.json")


def random_dag(rng: np.random.Generator, max_convs: int = 8, dense: bool = True) -> NetGraph:
    """Random shape-consistent DAG with ADD, CONCAT, depthwise and channel-wise nodes.

    Tensors are tagged ``free`` when their channels come from a single conv
    group (no input/concat in between); only those feed ADD and depthwise
    convs, which is what makes a group prunable.
    """
    nodes = [Node("x", "INPUT", (), {"C": int(rng.integers(1, 4)), "H": 6, "W": 6})]
    tensors = [("x", nodes[0].attrs["C"], False)]
    n_convs = 0
    target = int(rng.integers(1, max_convs + 1))
    i = 0
    while n_convs < target:
        i += 1
        nid = f"n{i}"
        src, c, free = tensors[int(rng.integers(len(tensors)))]
        op = rng.choice(["conv", "conv", "dw", "add", "concat", "relu", "bn", "pool"])
        if op == "conv":
            C = int(rng.choice([2, 3, 4, 6, 8]))
            k = int(rng.choice([1, 3]))
            nodes.append(Node(nid, "NORMAL_CONV", (src,), {"C": C, "kernel": k}))
            tensors.append((nid, C, True))
            n_convs += 1
        elif op == "dw" and free:
            nodes.append(Node(nid, "DEPTHWISE_CONV", (src,), {"kernel": 3}))
            tensors.append((nid, c, True))
            n_convs += 1
        elif op == "add" and free:
            mates = [t for t in tensors if t[2] and t[1] == c and t[0] != src]
            if mates:
                other = mates[int(rng.integers(len(mates)))][0]
                nodes.append(Node(nid, "ADD", (src, other)))
                tensors.append((nid, c, True))
        elif op == "concat":
            other, c2, _ = tensors[int(rng.integers(len(tensors)))]
            nodes.append(Node(nid, "CONCAT", (src, other)))
            tensors.append((nid, c + c2, False))
        elif op in ("relu", "bn"):
            nodes.append(Node(nid, op.upper(), (src,)))
            tensors.append((nid, c, free))
        elif op == "pool":
            nodes.append(Node(nid, "POOL", (src,), {"mode": "avg", "kernel": 1}))
            tensors.append((nid, c, free))
    if dense:
        convs = [t for t in tensors if t[2]]
        src = convs[-1][0]
        nodes.append(Node("gap", "POOL", (src,), {"mode": "global"}))
        nodes.append(Node("fc", "DENSE", ("gap",), {"C": 3}))
    return NetGraph(nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
