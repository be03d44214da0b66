"""Binary checkpoints.

Layout (little-endian)::

    b"MQCK"  u16 version  u8 mode  u8 flags
    u32 len  model spec (JSON)
    u32 len  run config text
    32 bytes sha256(run config text)
    u32 record count
    records: u16 name_len, name, u8 kind, u8 ndim, u32 dims[ndim], u64 nbytes, payload
    u32 crc32 of everything above

Train mode stores every parameter and buffer (plus optional Adam moments).
Deploy mode replaces each quantized layer's real weight by signed integer
codes: the top-width codes only when scales are tied (lower widths are derived
from them), otherwise one code tensor per weight width.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, IntegrityError
from .layers import _MixedBase
from .metanet import ArchConfig, MetaNet, QuantConfig
from .optim import AdamState
from .quantizer import ASYMMETRIC_ROUND

MAGIC = b"MQCK"
VERSION = 1
MODE_TRAIN, MODE_DEPLOY = 0, 1
MODES = {"train": MODE_TRAIN, "deploy": MODE_DEPLOY}
FLAG_PACKED = 1

KIND_F32, KIND_I8, KIND_I4, KIND_U8, KIND_I64 = 0, 1, 2, 3, 4
_DTYPES = {KIND_F32: "<f4", KIND_I8: "i1", KIND_U8: "u1", KIND_I64: "<i8"}


def atomic_write(path, data: bytes):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- 4-bit packing --------------------------------------------------------------


def pack_int4(codes: np.ndarray) -> bytes:
    """Two signed 4-bit codes per byte, first value in the low nibble."""
    c = np.asarray(codes, dtype=np.int8).ravel()
    if c.size and (c.min() < -8 or c.max() > 7):
        raise InputError("codes outside the signed 4-bit range [-8, 7]")
    u = (c & 0x0F).astype(np.uint8)
    if u.size % 2:
        u = np.append(u, np.uint8(0))
    return (u[0::2] | (u[1::2] << 4)).tobytes()


def unpack_int4(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    u = np.empty(b.size * 2, dtype=np.uint8)
    u[0::2] = b & 0x0F
    u[1::2] = b >> 4
    s = u[:count].astype(np.int8)
    return np.where(s > 7, s - 16, s).astype(np.int8)


# -- records --------------------------------------------------------------------


def _record(name: str, arr: np.ndarray, kind: int) -> bytes:
    arr = np.asarray(arr)
    if kind == KIND_I4:
        payload = pack_int4(arr)
    else:
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_record(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode()
    kind, ndim = r.unpack("<BB")
    shape = r.unpack(f"<{ndim}I") if ndim else ()
    (nbytes,) = r.unpack("<Q")
    raw = r.take(nbytes)
    count = int(np.prod(shape)) if shape else 1
    if kind == KIND_I4:
        if nbytes != (count + 1) // 2:
            raise IntegrityError(f"record {name}: packed size mismatch")
        arr = unpack_int4(raw, count).reshape(shape)
    elif kind in _DTYPES:
        dt = np.dtype(_DTYPES[kind])
        if nbytes != count * dt.itemsize:
            raise IntegrityError(f"record {name}: payload size mismatch")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    else:
        raise FormatError(f"record {name}: unknown kind {kind}")
    return name, kind, arr


# -- model spec -----------------------------------------------------------------


def _model_spec(net: MetaNet) -> dict:
    q = dataclasses.asdict(net.quant)
    q["weight_bit_map"] = {str(k): v for k, v in q["weight_bit_map"].items()}
    return {
        "arch": dataclasses.asdict(net.arch),
        "quant": q,
        "stage_completed": net.stage_completed,
        "weight_quant": net.weight_quant,
    }


def _build_net(spec: dict) -> MetaNet:
    a = dict(spec["arch"])
    a["widths"] = tuple(a["widths"])
    q = dict(spec["quant"])
    q["bits"] = tuple(q["bits"])
    q["weight_bit_map"] = {int(k): int(v) for k, v in q["weight_bit_map"].items()}
    net = MetaNet(ArchConfig(**a), QuantConfig(**q))
    net.stage_completed = int(spec["stage_completed"])
    net.weight_quant = bool(spec["weight_quant"])
    return net


def _deploy_code_bits(layer: _MixedBase) -> list[int]:
    if layer.tie_scales and layer.mode != ASYMMETRIC_ROUND:
        return [layer.n]
    return list(layer.w_scales.bits)


# -- save / load ----------------------------------------------------------------


def checkpoint_bytes(net: MetaNet, mode: str = "train", pack: bool = False, run_config: str = "",
                     optimizer: AdamState | None = None) -> bytes:
    if mode not in MODES:
        raise InputError(f"mode must be 'train' or 'deploy', got {mode!r}")
    deploy = MODES[mode] == MODE_DEPLOY
    if deploy and optimizer is not None:
        raise InputError("deploy checkpoints carry no optimizer state")
    if pack and not deploy:
        raise InputError("4-bit packing applies to deploy checkpoints only")
    code_kind = KIND_I4 if pack else KIND_I8
    if deploy:
        for m in net.quantized_layers():
            if not m.deployed and not all(m.w_scales.ready.values()):
                raise InputError("deploy export needs trained weight scales (run stage 2 first)")
    quantized = {name for name, m in net.named_modules() if isinstance(m, _MixedBase)}
    records = []
    for name, p in net.named_parameters():
        prefix, _, local = name.rpartition(".")
        if deploy and local == "weight" and prefix + "." in quantized:
            continue
        records.append(_record(name, p.data, KIND_F32))
    for name, b in net.named_buffers():
        kind = KIND_U8 if b.dtype == np.uint8 else KIND_F32
        records.append(_record(name, b, kind))
    if deploy:
        for name, m in net.named_modules():
            if isinstance(m, _MixedBase):
                for wb in _deploy_code_bits(m):
                    records.append(_record(f"{name}codes_b{wb}", m.weight_codes(wb), code_kind))
    if optimizer is not None:
        records.append(_record("adam.step", np.array(optimizer.step), KIND_I64))
        for key in sorted(optimizer.m):
            records.append(_record(f"adam.m.{key}", optimizer.m[key], KIND_F32))
            records.append(_record(f"adam.v.{key}", optimizer.v[key], KIND_F32))

    spec = json.dumps(_model_spec(net), sort_keys=True).encode()
    cfg = run_config.encode()
    flags = FLAG_PACKED if pack else 0
    out = bytearray(MAGIC + struct.pack("<HBB", VERSION, MODES[mode], flags))
    out += struct.pack("<I", len(spec)) + spec
    out += struct.pack("<I", len(cfg)) + cfg + hashlib.sha256(cfg).digest()
    out += struct.pack("<I", len(records))
    for r in records:
        out += r
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save_checkpoint(net: MetaNet, path, mode: str = "train", pack: bool = False, run_config: str = "",
                    optimizer: AdamState | None = None) -> int:
    """Serialize ``net`` atomically to ``path``; returns the byte count."""
    data = checkpoint_bytes(net, mode, pack, run_config, optimizer)
    atomic_write(path, data)
    return len(data)


@dataclass
class LoadedCheckpoint:
    net: MetaNet
    mode: str
    packed: bool
    run_config: str
    optimizer: AdamState | None


def parse_checkpoint(buf: bytes) -> LoadedCheckpoint:
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    r = _Reader(buf, 4)
    version, mode, flags = r.unpack("<HBB")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if mode not in (MODE_TRAIN, MODE_DEPLOY):
        raise FormatError(f"unknown checkpoint mode {mode}")
    if len(buf) < 12:
        raise IntegrityError("checkpoint truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted)")
    r.buf = buf[:-4]
    (n,) = r.unpack("<I")
    spec = json.loads(r.take(n))
    (n,) = r.unpack("<I")
    cfg = r.take(n)
    if hashlib.sha256(cfg).digest() != r.take(32):
        raise IntegrityError("config hash mismatch")
    (count,) = r.unpack("<I")
    recs = {}
    for _ in range(count):
        name, kind, arr = _read_record(r)
        recs[name] = arr
    if r.pos != len(r.buf):
        raise IntegrityError("trailing bytes after the last record")

    net = _build_net(spec)
    deploy = mode == MODE_DEPLOY
    params = dict(net.named_parameters())
    layers = {name: m for name, m in net.named_modules() if isinstance(m, _MixedBase)}
    if deploy:
        for lname, m in layers.items():
            m.codes = {}
            for wb in _deploy_code_bits(m):
                key = f"{lname}codes_b{wb}"
                if key not in recs:
                    raise IntegrityError(f"missing record {key}")
                m.codes[wb] = recs.pop(key)
            m.weight = None
            params.pop(f"{lname}weight")
    for name, p in params.items():
        if name not in recs:
            raise IntegrityError(f"missing record {name}")
        arr = recs.pop(name)
        if arr.shape != p.data.shape:
            raise IntegrityError(f"record {name}: shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(np.float32)
    mods = dict(net.named_modules())
    for name, _ in list(net.named_buffers()):
        if name not in recs:
            raise IntegrityError(f"missing record {name}")
        arr = recs.pop(name)
        prefix, local = _split_buffer_name(name, mods)
        mods[prefix].load_buffer(local, arr)
    opt = None
    if "adam.step" in recs:
        opt = AdamState(step=int(recs.pop("adam.step")))
        for key in [k for k in recs if k.startswith("adam.m.")]:
            pname = key[len("adam.m."):]
            opt.m[pname] = recs.pop(key)
            opt.v[pname] = recs.pop(f"adam.v.{pname}")
    if recs:
        raise IntegrityError(f"unexpected records: {sorted(recs)[:3]}")
    return LoadedCheckpoint(net, "deploy" if deploy else "train", bool(flags & FLAG_PACKED), cfg.decode(), opt)


def _split_buffer_name(name: str, mods: dict):
    # Longest module prefix that owns the buffer (buffer names may contain dots).
    parts = name.split(".")
    for i in range(len(parts) - 1, -1, -1):
        prefix = ".".join(parts[:i]) + ("." if i else "")
        if prefix in mods:
            return prefix, ".".join(parts[i:])
    raise IntegrityError(f"no module owns buffer {name}")


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def adam_from_state(net: MetaNet, state: AdamState, weight_decay: float):
    """Rebuild an :class:`~metaquant.optim.Adam` around restored moments."""
    from .optim import Adam

    opt = Adam(net.named_parameters(), weight_decay=weight_decay)
    opt.state = state
    return opt
