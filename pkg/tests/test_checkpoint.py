import struct

import pytest
import torch
from hypothesis import given, settings, strategies as st

from uacgan.checkpoint import MAGIC, VERSION, CheckpointError, config_hash, load, save


def test_roundtrip_all_dtypes(tmp_path):
    tensors = {
        "f32": torch.randn(3, 4),
        "f64": torch.randn(2, dtype=torch.float64),
        "i64": torch.arange(5),
        "i32": torch.arange(3, dtype=torch.int32),
        "u8": torch.tensor([0, 7, 255], dtype=torch.uint8),
        "b": torch.tensor([True, False]),
        "scalar": torch.tensor(2.5),
        "empty": torch.zeros(0, 3),
    }
    meta = {"step": 7, "nested": {"a": [1, 2]}}
    save(tmp_path / "c.ckpt", tensors, meta)
    back, back_meta = load(tmp_path / "c.ckpt")
    assert back_meta == meta
    assert back.keys() == tensors.keys()
    for k, t in tensors.items():
        assert back[k].dtype == t.dtype and torch.equal(back[k], t), k


def test_header_layout(tmp_path):
    save(tmp_path / "c.ckpt", {"x": torch.ones(2)}, {})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, mlen = struct.unpack("<IQ", raw[8:20])
    assert version == VERSION
    assert len(raw) == 20 + mlen + 8
    assert raw[-8:] == struct.pack("<2f", 1.0, 1.0)


def test_non_contiguous_saved_in_logical_order(tmp_path):
    t = torch.arange(6.0).reshape(2, 3).T
    save(tmp_path / "c.ckpt", {"t": t}, {})
    assert torch.equal(load(tmp_path / "c.ckpt")[0]["t"], t)


def test_bad_magic(tmp_path):
    (tmp_path / "c.ckpt").write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(CheckpointError, match="magic"):
        load(tmp_path / "c.ckpt")


def test_bad_version(tmp_path):
    save(tmp_path / "c.ckpt", {}, {})
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    raw[8:12] = struct.pack("<I", VERSION + 1)
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load(tmp_path / "c.ckpt")


def test_truncated(tmp_path):
    save(tmp_path / "c.ckpt", {"x": torch.ones(100)}, {})
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load(tmp_path / "c.ckpt")
    (tmp_path / "c.ckpt").write_bytes(raw[:12])
    with pytest.raises(CheckpointError, match="truncated"):
        load(tmp_path / "c.ckpt")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError, match="dtype"):
        save(tmp_path / "c.ckpt", {"h": torch.zeros(2, dtype=torch.float16)}, {})


def test_no_tmp_left_behind(tmp_path):
    save(tmp_path / "c.ckpt", {"x": torch.ones(1)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.floats(allow_nan=False) | st.text()))
def test_config_hash_ignores_key_order(d):
    reordered = dict(reversed(list(d.items())))
    assert config_hash(d) == config_hash(reordered)


def test_config_hash_sensitive():
    assert config_hash({"a": 1}) != config_hash({"a": 2})
