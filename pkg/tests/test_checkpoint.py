import struct

import numpy as np
import pytest

from conftest import load_graph
from dsa.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from dsa.nn import Batch, forward, init_model


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip(tmp_path, rng, dtype):
    g = load_graph("residual")
    model = init_model(g, rng, dtype=dtype)
    masks = [None, (rng.random(8) < 0.5).astype(float), np.ones(8)]
    save_checkpoint(tmp_path / "m.ckpt", model, masks, {"seed": 3})
    m2, masks2, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"seed": 3}
    assert masks2[0] is None and (masks2[1] == masks[1]).all()
    for k, v in model.params.items():
        assert m2.params[k].dtype == v.dtype and (m2.params[k] == v).all()
    assert m2.groups == model.groups
    batch = Batch(rng.normal(size=(2, 3, 8, 8)), np.array([1, 2]))
    assert forward(model, batch, training=False)[0] == forward(m2, batch, training=False)[0]


def test_layout(tmp_path, rng):
    model = init_model(load_graph("chain"), rng)
    save_checkpoint(tmp_path / "m.ckpt", model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, meta_len = struct.unpack_from("<II", raw, 8)
    assert version == 1
    (count,) = struct.unpack_from("<I", raw, 16 + meta_len)
    assert count == len(model.params) + len(model.buffers)


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "x")


def test_truncated(tmp_path, rng):
    save_checkpoint(tmp_path / "m.ckpt", init_model(load_graph("chain"), rng))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.ckpt")
