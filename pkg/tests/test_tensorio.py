import io
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moqe import quant, tensorio
from moqe.tensorio import (
    BadMagicError,
    IndexInconsistencyError,
    NonFiniteError,
    TruncatedError,
    VersionMismatchError,
    round_to_binary16,
)
from moqe.types import Checkpoint, Entry, Granularity, LayerGroup, Scheme


def all_binary16():
    bits = np.arange(0, 0x7C00, dtype=np.uint16)
    pos = bits.view(np.float16).astype(np.float64)
    return np.concatenate([-pos[::-1], pos])


def roundtrip(ckpt):
    return tensorio.read_checkpoint(io.BytesIO(tensorio.dumps(ckpt)))


def test_binary16_examples():
    assert round_to_binary16(1.0) == 1.0
    assert float(round_to_binary16(0.1)) == 0.0999755859375
    assert float(round_to_binary16(0.1)) == struct.unpack("<e", struct.pack("<e", 0.1))[0]
    assert float(round_to_binary16(65504.0)) == 65504.0
    with pytest.raises(OverflowError):
        round_to_binary16(65520.0)


@given(st.floats(-65000, 65000, allow_nan=False))
def test_binary16_matches_struct_and_is_idempotent(x):
    r = float(round_to_binary16(x))
    assert r == struct.unpack("<e", struct.pack("<e", x))[0]
    assert float(round_to_binary16(r)) == r


@given(st.floats(-6e4, 6e4), st.floats(-6e4, 6e4))
def test_binary16_monotone(a, b):
    lo, hi = sorted((a, b))
    assert round_to_binary16(lo) <= round_to_binary16(hi)


@given(st.floats(0, 65000))
def test_ceil_binary16_against_enumeration(x):
    grid = all_binary16()
    expected = grid[np.searchsorted(grid, x, side="left")]
    assert float(tensorio.ceil_to_binary16(x)) == expected


def test_empty_checkpoint():
    data = tensorio.dumps(Checkpoint())
    assert data[:4] == b"MQE1"
    assert len(data) == 64
    assert tensorio.read_checkpoint(data) == Checkpoint()


def test_single_f32_tensor():
    t = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    ckpt = Checkpoint([Entry("w", LayerGroup.OTHER, t)])
    data = tensorio.dumps(ckpt)
    meta, records, start = tensorio.read_index(data)
    assert records[0].length == 24
    assert len(data) == start + 24
    back = tensorio.read_checkpoint(data)
    assert back == ckpt
    assert back["w"].tobytes() == t.tobytes()


def test_quantized_4bit_data_section():
    a = np.random.default_rng(0).normal(size=(1024, 4096)).astype(np.float32)
    qt = quant.quantize_linear(a, 4)
    ckpt = Checkpoint([Entry("expert", LayerGroup.EXPERT_FFN, qt)])
    data = tensorio.dumps(ckpt)
    _, (rec,), start = tensorio.read_index(data)
    code_bytes = 1024 * 4096 // 2
    scale_bytes = 4096 * 2
    assert (rec.length, rec.scale_length) == (code_bytes, scale_bytes)
    # codes start aligned, scales follow at the next 64-byte boundary
    assert rec.offset == 0 and rec.scale_offset == -(-code_bytes // 64) * 64
    assert len(data) - start == rec.scale_offset + scale_bytes
    assert tensorio.read_checkpoint(data) == ckpt


def test_meta_preserved_including_unknown_keys():
    ckpt = Checkpoint([Entry("b", LayerGroup.OTHER, np.ones(3, np.float16))], {"spec.d_model": "8", "x.future": "y"})
    assert roundtrip(ckpt).meta == ckpt.meta


def test_deterministic_bytes(toy_ckpt):
    assert tensorio.dumps(toy_ckpt) == tensorio.dumps(toy_ckpt)


def test_write_errors():
    bad = Checkpoint([Entry("nan", LayerGroup.OTHER, np.array([1.0, np.nan], np.float32))])
    with pytest.raises(NonFiniteError):
        tensorio.dumps(bad)
    empty_dim = Checkpoint([Entry("z", LayerGroup.OTHER, np.zeros((0, 3), np.float32))])
    with pytest.raises(ValueError, match="zero-sized"):
        tensorio.dumps(empty_dim)


@pytest.fixture
def blob():
    a = np.random.default_rng(0).normal(size=(16, 8)).astype(np.float32)
    ckpt = Checkpoint([
        Entry("first", LayerGroup.DENSE_FFN, a),
        Entry("second", LayerGroup.EXPERT_FFN, quant.quantize_linear(a, 3)),
    ])
    return tensorio.dumps(ckpt)


def test_bad_magic(blob):
    with pytest.raises(BadMagicError):
        tensorio.read_checkpoint(b"XQE1" + blob[4:])


def test_version_mismatch(blob):
    with pytest.raises(VersionMismatchError):
        tensorio.read_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_truncated_names_tensor(blob):
    _, records, start = tensorio.read_index(blob)
    cut = start + records[1].offset + 3
    with pytest.raises(TruncatedError, match="second"):
        tensorio.read_checkpoint(blob[:cut])
    with pytest.raises(TruncatedError):
        tensorio.read_checkpoint(blob[:20])


def test_index_inconsistency(blob):
    text = blob.decode("latin-1")
    # swap one digit of the first record's length field: 512 -> 511
    tampered = text.replace("\t0\t512\t0\t0", "\t0\t511\t0\t0").encode("latin-1")
    assert tampered != blob
    with pytest.raises(IndexInconsistencyError):
        tensorio.read_checkpoint(tampered)
    with pytest.raises(IndexInconsistencyError):
        tensorio.read_checkpoint(blob + b"\0")


def test_error_classes_are_distinct():
    classes = [BadMagicError, VersionMismatchError, TruncatedError, IndexInconsistencyError]
    assert len(set(classes)) == 4
    assert all(issubclass(c, tensorio.CheckpointFormatError) for c in classes)


def test_raw_directory(tmp_path, toy_ckpt):
    tensorio.write_raw_directory(toy_ckpt, tmp_path)
    back = tensorio.read_raw_directory(tmp_path)
    assert back.meta == toy_ckpt.meta
    assert {e.name for e in back} == {e.name for e in toy_ckpt}
    for e in back:
        assert e.group is toy_ckpt.entry(e.name).group
        assert np.array_equal(e.payload, toy_ckpt[e.name])


def test_raw_directory_infers_group(tmp_path):
    np.ones((2, 2), "<f4").tofile(tmp_path / "enc.1.ffn.fc1.weight.bin")
    (tmp_path / "enc.1.ffn.fc1.weight.shape").write_text("2 2\n")
    from moqe.model import infer_group

    ckpt = tensorio.read_raw_directory(tmp_path, group_of=infer_group)
    assert ckpt.entry("enc.1.ffn.fc1.weight").group is LayerGroup.DENSE_FFN


def test_raw_directory_size_mismatch(tmp_path):
    np.ones(3, "<f4").tofile(tmp_path / "w.bin")
    (tmp_path / "w.shape").write_text("2 2\n")
    with pytest.raises(tensorio.CheckpointFormatError):
        tensorio.read_raw_directory(tmp_path)


def test_checkpoint_rejects_duplicates():
    e = Entry("a", LayerGroup.OTHER, np.zeros(1, np.float32))
    with pytest.raises(ValueError, match="duplicate"):
        Checkpoint([e, e])
