import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from glimmer import GlimmerNetConfig, block_variant_config, build, desk_config
from glimmer.dataio import (
    decode_checkpoint, decode_ppm, decode_tensor, encode_checkpoint, encode_ppm, encode_tensor,
    gen_synth_dataset, load_checkpoint, load_dataset, load_ppm, read_manifest, read_tensor,
    save_checkpoint, synth_images, write_tensor,
)
from glimmer.errors import DataError, FormatError

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
GOLDEN_FILE_CRC = 0x2144DF1C

shapes = st.tuples(*[st.integers(1, 5)] * 4)


# ----------------------------------------------------------------- tensors

@given(st.sampled_from([np.float32, np.float64]).flatmap(
    lambda dt: hnp.arrays(dt, shapes, elements=hnp.from_dtype(np.dtype(dt), allow_nan=True))))
def test_tensor_roundtrip_bit_exact(x):
    back = decode_tensor(encode_tensor(x))
    assert back.dtype == x.dtype and back.shape == x.shape
    assert back.tobytes() == x.tobytes()


def test_tensor_file_roundtrip_and_layout(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    path = str(tmp_path / "x.gltn")
    write_tensor(path, x)
    back = read_tensor(path)
    assert np.abs(back - x).max() == 0
    raw = open(path, "rb").read()
    assert raw[:4] == b"GLTN" and raw[4:7] == bytes([1, 0, 4])
    assert struct.unpack("<4I", raw[7:23]) == (2, 3, 4, 5)
    assert len(raw) == 23 + x.size * 4


def test_tensor_errors():
    data = encode_tensor(np.ones((1, 1, 2, 2), np.float64))
    with pytest.raises(FormatError, match="bad magic"):
        decode_tensor(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="expected 32 bytes, got 29"):
        decode_tensor(data[:-3])
    with pytest.raises(FormatError, match="dtype mismatch"):
        decode_tensor(data, expect_dtype=np.float32)
    with pytest.raises(FormatError, match="trailing"):
        decode_tensor(data + b"\0")
    with pytest.raises(FormatError):
        encode_tensor(np.zeros((1, 1, 1, 1), np.int32))


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_into_differently_seeded_model(tmp_path):
    cfg = desk_config()
    src = build(cfg, seed=1)
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    src.forward(x, train=True)  # move BN running stats off their init
    path = str(tmp_path / "m.glck")
    save_checkpoint(path, src)
    dst = build(cfg, seed=2)
    load_checkpoint(path, dst)
    for (na, va), (nb, vb) in zip(src.state_entries(), dst.state_entries()):
        assert na == nb and va.tobytes() == vb.tobytes()
    assert np.abs(src.forward(x, False) - dst.forward(x, False)).max() == 0


def test_checkpoint_crc_detects_flipped_byte():
    data = bytearray(encode_checkpoint(build(desk_config()).state_entries()))
    data[200] ^= 0x01
    with pytest.raises(FormatError, match="CRC mismatch"):
        decode_checkpoint(bytes(data))
    with pytest.raises(FormatError, match="bad magic"):
        decode_checkpoint(b"NOPE" + bytes(data[4:]))


def test_checkpoint_layout():
    data = encode_checkpoint([("ab", np.zeros((1, 1, 1, 1), np.float32))])
    assert data[:4] == b"GLCK" and data[4] == 1
    assert struct.unpack("<I", data[5:9]) == (1,)
    assert struct.unpack("<H", data[9:11]) == (2,) and data[11:13] == b"ab"
    assert struct.unpack("<I", data[-4:]) == (zlib.crc32(data[:-4]),)


def test_checkpoint_from_other_config_is_rejected(tmp_path):
    path = str(tmp_path / "big.glck")
    save_checkpoint(path, build(block_variant_config((4, 4, 4, 1))))
    with pytest.raises(FormatError, match="unexpected entries.*stage1.block2"):
        load_checkpoint(path, build(block_variant_config((1, 1, 1, 1))))


def test_golden_checkpoint_fixture():
    cfg = GlimmerNetConfig.load(os.path.join(FIXTURES, "golden_tiny.json"))
    path = os.path.join(FIXTURES, "golden_tiny.glck")
    raw = open(path, "rb").read()
    assert zlib.crc32(raw) == GOLDEN_FILE_CRC
    model = build(cfg, seed=0)
    load_checkpoint(path, model)
    rebuilt = build(cfg, seed=7)
    assert encode_checkpoint(rebuilt.state_entries()) == raw
    for (_, a), (_, b) in zip(model.state_entries(), rebuilt.state_entries()):
        assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------- PPM

def test_ppm_examples(tmp_path):
    red = decode_ppm(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    assert red.shape == (1, 3, 1, 1) and red.ravel().tolist() == [1.0, 0.0, 0.0]
    two = decode_ppm(b"P6 2 1 255\n" + bytes([0, 0, 0, 255, 255, 255]))
    assert (two[0, :, 0, 0] == 0).all() and (two[0, :, 0, 1] == 1).all()
    with pytest.raises(FormatError, match="unsupported PPM variant"):
        decode_ppm(b"P3\n1 1\n255\n255 0 0\n")
    with pytest.raises(FormatError, match="maxval"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(FormatError, match="truncated raster"):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    commented = decode_ppm(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 0]))
    assert commented.ravel().tolist() == [0.0, 1.0, 0.0]


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (1, 3, 5, 4)) / 255.0
    path = tmp_path / "x.ppm"
    path.write_bytes(encode_ppm(img))
    assert np.abs(load_ppm(str(path)) - img).max() < 1e-6


# --------------------------------------------------------------- manifests

def test_manifest_label_out_of_range_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"classes": ["a", "b"]}\n{"path": "x", "label": 1}\n{"path": "y", "label": 2}\n')
    with pytest.raises(DataError, match=r"m.jsonl:3: label 2"):
        read_manifest(str(path))
    path.write_text('{"path": "x"}\n')
    with pytest.raises(DataError, match=":1:"):
        read_manifest(str(path))


def test_manifest_missing_file_named(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"classes": ["a"]}\n{"path": "nowhere.gltn", "label": 0}\n')
    with pytest.raises(DataError, match="nowhere.gltn"):
        load_dataset(str(path))


def test_manifest_accepts_ppm_samples(tmp_path):
    (tmp_path / "a.ppm").write_bytes(encode_ppm(np.zeros((3, 4, 4))))
    (tmp_path / "m.jsonl").write_text('{"classes": ["a", "b"]}\n{"path": "a.ppm", "label": 1}\n')
    data = load_dataset(str(tmp_path / "m.jsonl"))
    assert data.images.shape == (1, 3, 4, 4) and data.labels.tolist() == [1]


# --------------------------------------------------------------- synthetic

def test_synth_dataset_counts_and_determinism(tmp_path):
    m1 = gen_synth_dataset(16, 4, (32, 32), 42, str(tmp_path / "a"))
    m2 = gen_synth_dataset(16, 4, (32, 32), 42, str(tmp_path / "b"))
    files = sorted(os.listdir(tmp_path / "a"))
    assert len([f for f in files if f.endswith(".gltn")]) == 64
    lines = open(m1).read().splitlines()
    assert len(lines) == 65
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    data = load_dataset(m2)
    assert data.images.shape == (64, 3, 32, 32)
    assert np.bincount(data.labels).tolist() == [16] * 4
    assert data.class_names == ("stripes2", "stripes4", "stripes8", "stripes16")
    with pytest.raises(DataError):
        synth_images(1, 9, (8, 8), 0)


def test_synth_class_period():
    images, labels = synth_images(2, 4, (8, 32), 3)
    for img, lab in zip(images, labels):
        period = 2 ** (lab + 1)
        row = img.mean(axis=(0, 1))
        assert np.abs(row - np.roll(row, period)).max() < 0.3


def linear_probe_accuracy(per_class_train, per_class_test, seed):
    """Standardized softmax regression on raw pixels, full-batch gradient descent."""
    xtr, ytr = synth_images(per_class_train, 4, (32, 32), seed)
    xte, yte = synth_images(per_class_test, 4, (32, 32), seed + 1)
    xtr = xtr.reshape(len(xtr), -1).astype(np.float64)
    xte = xte.reshape(len(xte), -1).astype(np.float64)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    w = np.zeros((xtr.shape[1], 4))
    onehot = np.eye(4)[ytr]
    for _ in range(300):
        z = xtr @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.1 * (xtr.T @ (p - onehot) / len(xtr) + 1e-3 * w)
    return float(np.mean(np.argmax(xte @ w, 1) == yte))


def test_linear_probe_above_chance_below_ceiling():
    acc = linear_probe_accuracy(100, 100, 42)
    assert 0.30 < acc < 0.99
