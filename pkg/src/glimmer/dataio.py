"""Binary tensor and checkpoint formats, PPM input, dataset manifests and the
synthetic stripe dataset.

All integers are little-endian. A tensor file is

    b"GLTN" | version u8 (=1) | dtype u8 (0 f32, 1 f64) | ndim u8 (=4) |
    4 x u32 dims | row-major payload

and a checkpoint is

    b"GLCK" | version u8 (=1) | count u32 |
    count x (name length u16 | UTF-8 name | tensor file body) | CRC32 u32

with the CRC taken over every byte before it. Non-4-D arrays (biases, BN
statistics, linear weights) are stored with trailing unit dims.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .prng import SplitMix64, prng_split
from .train import Dataset

TENSOR_MAGIC = b"GLTN"
CKPT_MAGIC = b"GLCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBB4I")
MAX_CLASSES = 8


# ------------------------------------------------------------------ tensors

def _dims4(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise FormatError(f"cannot store a {len(shape)}-D array in a 4-D tensor file")
    return tuple(shape) + (1,) * (4 - len(shape))


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    code = _DTYPE_CODES.get(np.dtype(x.dtype.type))
    if code is None:
        raise FormatError(f"unsupported dtype {x.dtype}; expected float32 or float64")
    header = _HEADER.pack(TENSOR_MAGIC, VERSION, code, 4, *_dims4(x.shape))
    return header + np.ascontiguousarray(x, dtype=_CODE_DTYPES[code]).tobytes()


def _decode_tensor(buf, offset: int, what: str) -> tuple[np.ndarray, int]:
    if len(buf) - offset < _HEADER.size:
        raise FormatError(f"{what}: truncated header: expected {_HEADER.size} bytes, "
                          f"got {len(buf) - offset}")
    magic, version, code, ndim, *dims = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r} (expected {TENSOR_MAGIC!r})")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{what}: unknown dtype code {code}")
    if ndim != 4:
        raise FormatError(f"{what}: ndim must be 4, got {ndim}")
    dtype = _CODE_DTYPES[code]
    start = offset + _HEADER.size
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - start
    if have < need:
        raise FormatError(f"{what}: truncated payload: expected {need} bytes, got {have}")
    arr = np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=start)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), start + need


def decode_tensor(data: bytes, expect_dtype=None, what: str = "tensor") -> np.ndarray:
    arr, end = _decode_tensor(data, 0, what)
    if end != len(data):
        raise FormatError(f"{what}: {len(data) - end} trailing bytes after payload")
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise FormatError(f"{what}: dtype mismatch: file holds {arr.dtype}, expected {np.dtype(expect_dtype)}")
    return arr


def write_tensor(path: str, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(x))


def read_tensor(path: str, expect_dtype=None) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), expect_dtype, what=path)


# -------------------------------------------------------------- checkpoints

def encode_checkpoint(entries) -> bytes:
    """``entries``: ordered (name, array) pairs."""
    out = io.BytesIO()
    entries = list(entries)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise FormatError("checkpoint entry names must be unique")
    out.write(CKPT_MAGIC + struct.pack("<BI", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw + encode_tensor(arr))
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes, what: str = "checkpoint") -> list[tuple[str, np.ndarray]]:
    if len(data) < 13:
        raise FormatError(f"{what}: truncated: {len(data)} bytes")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{what}: bad magic {data[:4]!r} (expected {CKPT_MAGIC!r})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{what}: CRC mismatch (stored {crc:#010x}, computed {zlib.crc32(body):#010x})")
    version, count = struct.unpack_from("<BI", body, 4)
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    pos, entries = 9, []
    for _ in range(count):
        if pos + 2 > len(body):
            raise FormatError(f"{what}: truncated entry table")
        (n,) = struct.unpack_from("<H", body, pos)
        name = bytes(body[pos + 2:pos + 2 + n]).decode("utf-8")
        arr, pos = _decode_tensor(body, pos + 2 + n, f"{what}:{name}")
        entries.append((name, arr))
    if pos != len(body):
        raise FormatError(f"{what}: {len(body) - pos} unexpected bytes before CRC")
    return entries


def save_checkpoint(path: str, model) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model.state_entries()))


def load_state(model, entries) -> None:
    """Copy checkpoint entries into ``model`` in place; names must match exactly."""
    targets = dict(model.state_entries())
    names = [n for n, _ in entries]
    missing = [n for n in targets if n not in set(names)]
    extra = [n for n in names if n not in targets]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing entries {missing[:5]}{' ...' if len(missing) > 5 else ''}")
        if extra:
            parts.append(f"unexpected entries {extra[:5]}{' ...' if len(extra) > 5 else ''}")
        raise FormatError("checkpoint does not match model: " + "; ".join(parts))
    for name, arr in entries:
        dst = targets[name]
        if arr.size != dst.size or _dims4(dst.shape) != arr.shape:
            raise FormatError(f"checkpoint entry {name}: shape {arr.shape} does not fit {dst.shape}")
        if arr.dtype != dst.dtype:
            raise FormatError(f"checkpoint entry {name}: dtype {arr.dtype} != model dtype {dst.dtype}")
        dst[...] = arr.reshape(dst.shape)


def load_checkpoint(path: str, model) -> None:
    with open(path, "rb") as fh:
        load_state(model, decode_checkpoint(fh.read(), what=path))


# ---------------------------------------------------------------------- PPM

def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes, what: str = "image") -> np.ndarray:
    """Binary P6 with maxval 255 -> (1, 3, H, W) float32 in [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError(f"{what}: unsupported PPM variant {data[:2]!r} (only binary P6)")
    pos = 2
    vals = []
    for _ in range(3):
        tok, pos = _ppm_token(data, pos)
        try:
            vals.append(int(tok))
        except ValueError:
            raise FormatError(f"{what}: bad PPM header field {tok!r}") from None
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"{what}: maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{what}: bad PPM dimensions {w}x{h}")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"{what}: truncated raster: expected {need} bytes, got {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (img.transpose(2, 0, 1)[None].astype(np.float32) / 255.0).copy()


def load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), what=path)


def encode_ppm(img: np.ndarray) -> bytes:
    """(1, 3, H, W) or (3, H, W) floats in [0, 1] -> P6 bytes."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    _, h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_ppm(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


# ----------------------------------------------------------------- manifests

@dataclass
class Manifest:
    classes: list[str]
    entries: list[tuple[str, int]]  # (path as written, label)
    root: str


def read_manifest(path: str) -> Manifest:
    """Header line {"classes": [...]} then one {"path", "label"} object per line."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: invalid JSON ({exc.msg})") from None
    classes = header.get("classes") if isinstance(header, dict) else None
    if not isinstance(classes, list) or not classes:
        raise DataError(f"{path}:1: header must be {{\"classes\": [names]}}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            item, label = rec["path"], rec["label"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{path}:{lineno}: expected {{\"path\": str, \"label\": int}}") from None
        if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < len(classes):
            raise DataError(f"{path}:{lineno}: label {label!r} outside [0, {len(classes)})")
        entries.append((item, label))
    return Manifest([str(c) for c in classes], entries, os.path.dirname(os.path.abspath(path)))


def load_image(path: str) -> np.ndarray:
    """A (1, 3, H, W) sample from a tensor file or a P6 PPM."""
    if path.lower().endswith(".ppm"):
        return load_ppm(path)
    return read_tensor(path)


def load_dataset(manifest_path: str, dtype=np.float32) -> Dataset:
    man = read_manifest(manifest_path)
    if not man.entries:
        raise DataError(f"{manifest_path}: no samples")
    images = []
    for item, _ in man.entries:
        full = item if os.path.isabs(item) else os.path.join(man.root, item)
        if not os.path.exists(full):
            raise DataError(f"missing file referenced by manifest: {item}")
        img = load_image(full)
        if img.shape[0] != 1 or img.shape[1] != 3:
            raise DataError(f"{item}: expected a (1, 3, H, W) image, got {img.shape}")
        if images and img.shape != images[0].shape:
            raise DataError(f"{item}: shape {img.shape} differs from {images[0].shape}")
        images.append(img.astype(dtype, copy=False))
    return Dataset(np.concatenate(images, axis=0), np.array([lab for _, lab in man.entries]),
                   tuple(man.classes))


# ----------------------------------------------------------------- synthetic

def stripe_pattern(period: int, phase: int, hw: tuple[int, int], amplitude: float = 0.8) -> np.ndarray:
    """Vertical square wave: ``amplitude`` on the first half of each period."""
    h, w = hw
    cols = (np.arange(w) + phase) % period < period // 2
    return np.broadcast_to(np.where(cols, amplitude, 0.0), (h, w))


def synth_images(num_per_class: int, k: int, hw: tuple[int, int], seed: int):
    """Class c: N(0, 0.1) noise plus stripes of period 2**(c+1) with a random
    phase, identical on all three channels. Returns (images, labels) with
    samples ordered class by class."""
    if not 1 <= k <= MAX_CLASSES:
        raise DataError(f"number of classes must lie in [1, {MAX_CLASSES}], got {k}")
    if num_per_class < 1:
        raise DataError(f"per-class count must be >= 1, got {num_per_class}")
    h, w = hw
    rng = SplitMix64(seed)
    images, labels = [], []
    for c in range(k):
        period = 2 ** (c + 1)
        for _ in range(num_per_class):
            phase = rng.randbelow(period)
            noise = rng.normal(3 * h * w).reshape(3, h, w) * 0.1
            images.append((noise + stripe_pattern(period, phase, hw)).astype(np.float32))
            labels.append(c)
    return np.stack(images), np.array(labels, dtype=np.int64)


def gen_synth_dataset(num_per_class: int, k: int, hw: tuple[int, int], seed: int, out_dir: str) -> str:
    """Write one tensor file per sample plus ``manifest.jsonl``; returns the manifest path."""
    images, labels = synth_images(num_per_class, k, hw, seed)
    os.makedirs(out_dir, exist_ok=True)
    lines = [json.dumps({"classes": [f"stripes{2 ** (c + 1)}" for c in range(k)]})]
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"sample_{i:05d}.gltn"
        write_tensor(os.path.join(out_dir, name), img[None])
        lines.append(json.dumps({"path": name, "label": int(lab)}))
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


__all__ = [
    "TENSOR_MAGIC", "CKPT_MAGIC", "encode_tensor", "decode_tensor", "write_tensor", "read_tensor",
    "encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint", "load_state",
    "decode_ppm", "load_ppm", "encode_ppm", "write_ppm", "Manifest", "read_manifest", "load_image",
    "load_dataset", "stripe_pattern", "synth_images", "gen_synth_dataset", "prng_split",
]
