import numpy as np
import pytest

from speechbridge.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from speechbridge.numerics import Rng


def test_roundtrip_values_and_flags(tmp_path):
    rng = Rng.from_seed(1)
    tensors = {
        "a": rng.child("a").normal(1.0, (3, 4)),
        "nested.name.b": rng.child("b").normal(1.0, (1, 7)),
    }
    path = tmp_path / "ck.bzmm"
    save_checkpoint(path, tensors, frozen={"a": True, "nested.name.b": False})
    loaded, flags = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
    assert flags == {"a": True, "nested.name.b": False}
    assert not loaded["a"].flags.writeable
    assert loaded["nested.name.b"].flags.writeable


def test_byte_identical_for_identical_tensors(tmp_path):
    t = {"x": np.arange(6, dtype=np.float64).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bzmm", tmp_path / "b.bzmm"
    save_checkpoint(p1, t, frozen=True)
    save_checkpoint(p2, {"x": t["x"].copy()}, frozen=True)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == MAGIC


def test_rejects_non_2d_and_bad_magic(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        save_checkpoint(tmp_path / "bad.bzmm", {"v": np.zeros(3)})
    p = tmp_path / "junk.bzmm"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="BZMM"):
        load_checkpoint(p)
