"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    b"C2FDFT\\0"            magic
    u32                     format version
    u32 + bytes             UTF-8 snapshot: run config plus ``meta.*`` lines
    u32                     array count
    per array:
        u16 + bytes         UTF-8 name
        u8                  dtype tag
        u8                  rank
        u64 * rank          dims
        bytes               little-endian payload
    u64                     length of everything above
    u32                     CRC32 of everything above
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import config_from_text

MAGIC = b"C2FDFT\0"
FORMAT_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: object  # RunConfig
    stage: str
    iteration: int
    params: dict  # name -> float32 tensor
    optimizer: dict = field(default_factory=dict)  # name -> tensor
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def model_state(model):
    return {k: v.detach().cpu().float().clone() for k, v in model.state_dict().items()}


def optimizer_state(model, optimizer):
    """Flatten AdamW moments by parameter name."""
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in optimizer.state.items():
        for key, val in st.items():
            out[f"{names[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().clone()
    return out


def restore_optimizer(model, optimizer, flat):
    if not flat:
        return
    by_name = dict(model.named_parameters())
    for key, val in flat.items():
        pname, slot = key.rsplit("/", 1)
        p = by_name[pname]
        st = optimizer.state[p]
        if slot == "step":
            st[slot] = val.clone().float()
        else:
            st[slot] = val.clone().to(device=p.device, dtype=p.dtype)


def _snapshot(ckpt):
    lines = [ckpt.config.to_text()]
    meta = {"stage": ckpt.stage, "iteration": ckpt.iteration, **ckpt.meta}
    lines += [f"meta.{k} = {v}\n" for k, v in meta.items()]
    return "".join(lines)


def _encode_array(name, arr):
    arr = np.array(arr, order="C", copy=True)  # ascontiguousarray would promote 0-d to 1-d
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.dtype(dt) not in _TAGS:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    tag = _TAGS[np.dtype(dt)]
    arr = arr.astype(_DTYPES[tag], copy=False)
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ckpt, path):
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"optim/{k}", v) for k, v in ckpt.optimizer.items()]
    snap = _snapshot(ckpt).encode("utf-8")
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", ckpt.format_version)
    buf += struct.pack("<I", len(snap)) + snap
    buf += struct.pack("<I", len(arrays))
    for name, t in arrays:
        buf += _encode_array(name, torch.as_tensor(t).detach().cpu().numpy())
    buf += struct.pack("<Q", len(buf))
    buf += struct.pack("<I", zlib.crc32(bytes(buf[:-8])) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 4 + 12:
        raise CheckpointError(f"{path}: truncated")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body_len, crc = struct.unpack_from("<QI", data, len(data) - 12)
    if body_len != len(data) - 12 or zlib.crc32(data[:-12]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")

    off = len(MAGIC) + 4
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    snap = data[off : off + n].decode("utf-8")
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params, optim = {}, {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nl].decode("utf-8")
        off += nl
        tag, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dt = np.dtype(_DTYPES[tag])
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims)
        off += size
        tensor = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        kind, key = name.split("/", 1)
        (params if kind == "param" else optim)[key] = tensor

    cfg_lines, meta = [], {}
    for line in snap.splitlines():
        if line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k.strip()] = v.strip()
        else:
            cfg_lines.append(line)
    config = config_from_text("\n".join(cfg_lines))
    stage = meta.pop("stage")
    iteration = int(meta.pop("iteration"))
    return Checkpoint(config=config, stage=stage, iteration=iteration, params=params,
                      optimizer=optim, meta=meta, format_version=version)
