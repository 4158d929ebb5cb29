"""Flat-file volume I/O and network checkpoints.

Volumes are a NAME.raw / NAME.json pair. The raw file is little-endian with
the x index varying fastest; the JSON sidecar records dims [X, Y, Z], voxel
spacing, dtype (float32 | uint8), and kind (image | labels).

Checkpoints are a single binary file:

    magic "EMNETCK1" | u32 version | u32 config-JSON length | config JSON
    | u32 param count | per param: u16 name length, name, u8 dtype code,
      u8 ndim, u32 dims..., u64 byte length, raw little-endian data
    | 8-byte blake2b checksum of everything above

Round-trips are bitwise: save(load(x)) == x.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError

_MAGIC = b"EMNETCK1"
_VERSION = 1
_DTYPES = {"float32": np.float32, "uint8": np.uint8}
_KINDS = ("image", "labels")
_CKPT_DTYPES = ["float32", "float64"]


def _sibling(base: Path, suffix: str) -> Path:
    # not Path.with_suffix: volume names may contain dots
    return base.parent / (base.name + suffix)


def save_volume(base, array: np.ndarray, spacing=(1.0, 1.0, 1.0),
                kind: str = "image") -> None:
    """Write NAME.raw + NAME.json; ``base`` is the path without suffix."""
    base = Path(base)
    array = np.asarray(array)
    if array.ndim != 3:
        raise DataError(f"volumes are 3-D, got shape {array.shape}")
    if kind not in _KINDS:
        raise DataError(f"kind must be one of {_KINDS}, got {kind!r}")
    dtype = "uint8" if kind == "labels" else "float32"
    data = array.astype("|u1" if dtype == "uint8" else "<f4")
    base.parent.mkdir(parents=True, exist_ok=True)
    _sibling(base, ".raw").write_bytes(data.transpose(2, 1, 0).tobytes())
    meta = {
        "dims": list(array.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "kind": kind,
    }
    _sibling(base, ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_volume(base):
    """Read a NAME.raw / NAME.json pair; returns (array [X,Y,Z], meta)."""
    base = Path(base)
    meta_path = _sibling(base, ".json")
    raw_path = _sibling(base, ".raw")
    if not meta_path.exists() or not raw_path.exists():
        raise DataError(f"missing volume pair {base}.raw/.json")
    meta = json.loads(meta_path.read_text())
    for key in ("dims", "dtype", "kind"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing {key!r}")
    if meta["dtype"] not in _DTYPES:
        raise DataError(f"{meta_path}: unsupported dtype {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    dt = np.dtype(_DTYPES[meta["dtype"]]).newbyteorder("<")
    raw = raw_path.read_bytes()
    if len(raw) != int(np.prod(dims)) * dt.itemsize:
        raise DataError(
            f"{raw_path}: {len(raw)} bytes does not match dims {list(dims)} "
            f"of {meta['dtype']}"
        )
    arr = np.frombuffer(raw, dtype=dt).reshape(dims[::-1]).transpose(2, 1, 0)
    return arr.copy(), meta


def _param_items(net):
    return [(name, p.data) for name, p in net.named_params()]


def save_checkpoint(path, net) -> None:
    """Serialize config + every named parameter, with a trailing checksum."""
    cfg_blob = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<II", _VERSION, len(cfg_blob))
    out += cfg_blob
    items = _param_items(net)
    out += struct.pack("<I", len(items))
    for name, data in items:
        dtype = str(data.dtype)
        if dtype not in _CKPT_DTYPES:
            raise CheckpointError(f"parameter {name}: unsupported dtype {dtype}")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _CKPT_DTYPES.index(dtype), data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        blob = data.astype("<" + ("f4" if dtype == "float32" else "f8")).tobytes()
        out += struct.pack("<Q", len(blob)) + blob
    out += hashlib.blake2b(bytes(out), digest_size=8).digest()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        piece = self.blob[self.off:self.off + n]
        self.off += n
        return piece

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (config dict, ordered {name: array}). Verifies the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < len(_MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint (too short)")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, cfg_len = r.unpack("<II")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = json.loads(r.take(cfg_len).decode())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code >= len(_CKPT_DTYPES):
            raise CheckpointError(f"{path}: bad dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        (blen,) = r.unpack("<Q")
        dt = np.dtype(_CKPT_DTYPES[code]).newbyteorder("<")
        if blen != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: parameter {name}: length mismatch")
        params[name] = np.frombuffer(r.take(blen), dtype=dt).reshape(shape).copy()
    if r.off != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.off} trailing bytes")
    return cfg, params


def restore(net, params: dict) -> None:
    """Copy checkpoint arrays into a built network's parameters by name."""
    own = dict(net.named_params())
    missing = [n for n in own if n not in params]
    extra = [n for n in params if n not in own]
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match network: missing {missing[:3]}, "
            f"unexpected {extra[:3]}"
        )
    for name, tensor in own.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arr.shape} != network "
                f"{tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype)


def load_network(path):
    """Build the network a checkpoint describes and restore its weights."""
    from .network import NetworkConfig, build

    cfg_dict, params = load_checkpoint(path)
    net = build(NetworkConfig.from_dict(cfg_dict), seed=0)
    restore(net, params)
    return net
