import struct

import numpy as np
import pytest

from peftbench import checkpoint as ck
from peftbench.adapters import LoraAdapter, PrefixAdapter
from peftbench.model import ModelConfig, TransformerModel

SMALL = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)


def lora_ckpt(tmp_path):
    lo = LoraAdapter(SMALL, r=4, targets=["attn.wq", "ffn.w1"], seed=3)
    rng = np.random.default_rng(0)
    for e in lo.entries.values():
        e.B.data = rng.normal(size=e.B.shape)
    path = tmp_path / "lora.ckpt"
    ck.save_adapter(lo, path, {"model": SMALL.to_dict()})
    return lo, path


def test_model_round_trip_bit_exact(tmp_path):
    m = TransformerModel.init(SMALL)
    ck.save_model(m, tmp_path / "m.ckpt", {"note": "x"}, {"extra": np.arange(3.0)})
    back, cfg, extra = ck.load_model(tmp_path / "m.ckpt", expect_config=SMALL)
    assert cfg["note"] == "x" and np.array_equal(extra["extra"], np.arange(3.0))
    for k, v in m.params.items():
        assert v.data.tobytes() == back.params[k].data.tobytes()
    ck.save_model(back, tmp_path / "m2.ckpt", {"note": "x"}, {"extra": np.arange(3.0)})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_adapter_round_trips(tmp_path):
    lo, path = lora_ckpt(tmp_path)
    back = ck.load_adapter(path)
    for k, t in lo.named_tensors().items():
        assert t.data.tobytes() == back.named_tensors()[k].data.tobytes()
    assert back.scaling == lo.scaling and back.targets == lo.targets
    pre = PrefixAdapter.for_model(SMALL, 3, seed=5)
    ck.save_adapter(pre, tmp_path / "p.ckpt")
    pb = ck.load_adapter(tmp_path / "p.ckpt", SMALL)
    assert all(np.array_equal(t.data, pb.named_tensors()[k].data) for k, t in pre.named_tensors().items())
    pre.bake()
    ck.save_adapter(pre, tmp_path / "pb.ckpt")
    pb = ck.load_adapter(tmp_path / "pb.ckpt", SMALL)
    assert not pb.projection_active and np.array_equal(pb.baked.data, pre.baked.data)


def test_special_values_survive():
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324, 1.7976931348623157e308])
    _, _, t = ck.loads(ck.dumps("model", {}, {"x": arr}))
    assert t["x"].tobytes() == arr.tobytes()


def test_flipped_byte_in_tensor_region_is_checksum_error(tmp_path):
    _, path = lora_ckpt(tmp_path)
    blob = path.read_bytes()
    rng = np.random.default_rng(0)
    # tensor payload sits well past the config block and before the digest
    tensor_start = len(blob) - 32 - 8 * 16 * 4 * 2 * 2
    for pos in rng.integers(tensor_start, len(blob) - 32, size=100):
        bad = bytearray(blob)
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(ck.ChecksumError):
            ck.loads(bytes(bad))


def test_any_flipped_byte_is_detected(tmp_path):
    _, path = lora_ckpt(tmp_path)
    blob = path.read_bytes()
    for pos in range(0, len(blob), 7):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        with pytest.raises(ck.CheckpointError):
            ck.loads(bytes(bad))


def test_truncation(tmp_path):
    _, path = lora_ckpt(tmp_path)
    blob = path.read_bytes()
    for n in (3, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ck.TruncatedError):
            ck.loads(blob[:n])


def test_version_mismatch():
    with pytest.raises(ck.VersionError, match="version 2"):
        ck.loads(ck.dumps("model", {}, {}, version=2))


def test_bad_magic_and_trailing():
    blob = ck.dumps("model", {}, {})
    with pytest.raises(ck.FormatError):
        ck.loads(b"NOPE1" + blob[5:])
    with pytest.raises(ck.FormatError):
        ck.loads(blob + b"\0")


def test_header_layout():
    blob = ck.dumps("lora", {"a": 1}, {"t": np.ones((2, 3))})
    assert blob[:5] == b"PEFT1"
    version, body_len = struct.unpack_from("<IQ", blob, 5)
    assert version == 1 and len(blob) == 17 + body_len + 32


def test_shape_mismatch_names_tensor(tmp_path):
    m = TransformerModel.init(SMALL)
    ck.save_model(m, tmp_path / "m.ckpt")
    with pytest.raises(ck.CheckpointShapeError):
        ck.load_model(tmp_path / "m.ckpt", expect_config=ModelConfig(d_model=32, n_heads=2, n_layers=2,
                                                                      d_ff=32, max_seq_len=64))
    _, path = lora_ckpt(tmp_path)
    other = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    with pytest.raises(ck.CheckpointShapeError, match="layer.0.attn.wq.lora_A"):
        ck.load_adapter(path, other)
    pre = PrefixAdapter.for_model(SMALL, 3)
    ck.save_adapter(pre, tmp_path / "p.ckpt")
    with pytest.raises(ck.CheckpointShapeError, match="n_layers"):
        ck.load_adapter(tmp_path / "p.ckpt", ModelConfig(d_model=16, n_layers=3, n_heads=2))


def test_missing_tensor_named(tmp_path):
    kind, cfg, t = ck.read(lora_ckpt(tmp_path)[1])
    t.pop("layer.1.ffn.w1.lora_B")
    ck.write(tmp_path / "x.ckpt", kind, cfg, t)
    with pytest.raises(ck.CheckpointShapeError, match="layer.1.ffn.w1.lora_B"):
        ck.load_adapter(tmp_path / "x.ckpt")
