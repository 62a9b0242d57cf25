import struct

import numpy as np
import pytest

from conftest import random_params
from permalign import io
from permalign.model import ArchitectureSpec, Permutation, build_mlp_spec


def test_container_round_trip_float32():
    tensors = {"W1": np.arange(6, dtype=np.float64).reshape(2, 3) / 7, "b1": np.ones(2)}
    meta, out = io.decode_container(io.encode_container(io.CHECKPOINT_MAGIC, {"x": 1}, tensors),
                                    io.CHECKPOINT_MAGIC)
    assert meta == {"x": 1}
    np.testing.assert_array_equal(out["W1"], tensors["W1"].astype(np.float32))
    assert list(out) == ["W1", "b1"]


def test_container_layout_header():
    buf = io.encode_container(io.MASK_MAGIC, {}, {"m_W1": np.array([[1, 0]], dtype=np.uint8)})
    assert buf[:4] == b"PMSK"
    version, meta_len = struct.unpack("<II", buf[4:12])
    assert version == 1 and buf[12:12 + meta_len] == b"{}"


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
])
def test_container_rejects_corruption(mutate):
    buf = io.encode_container(io.CHECKPOINT_MAGIC, {"a": 1}, {"W1": np.ones((2, 2))})
    with pytest.raises(io.FormatError):
        io.decode_container(mutate(buf), io.CHECKPOINT_MAGIC)


def test_json_is_canonical():
    assert io.dumps_json({"b": 1, "a": [1.5, "x"]}) == '{"a":[1.5,"x"],"b":1}'


def test_permutation_file_round_trip(tmp_path):
    arch = ArchitectureSpec(3, (4, 2), 2)
    spec = build_mlp_spec(arch)
    perm = Permutation((np.array([3, 1, 0, 2]), np.array([1, 0])))
    path = tmp_path / "p.txt"
    io.save_permutation(path, perm, spec)
    text = path.read_text()
    assert text.splitlines()[0] == f"PMPERM v1 spec_hash={spec.spec_hash()}"
    assert io.load_permutation(path, spec) == perm
    other = build_mlp_spec(ArchitectureSpec(3, (4, 2), 2, use_layer_norm=False))
    with pytest.raises(io.FormatError):
        io.load_permutation(path, other)


def test_checkpoint_params_survive_file(tmp_path):
    from permalign.train import Checkpoint, load_checkpoint, save_checkpoint
    arch = ArchitectureSpec(3, (4,), 2)
    p = random_params(arch, 0).astype(np.float32).astype(np.float64)
    save_checkpoint(tmp_path / "c.pmlc", Checkpoint(p, 3, "abc"))
    c = load_checkpoint(tmp_path / "c.pmlc")
    assert c.params.equals(p) and c.epoch == 3 and c.fingerprint == "abc" and c.momentum is None
