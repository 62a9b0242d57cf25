"""Binary tensor containers and the permutation text format.

Container layout (little-endian)::

    magic[4] | u32 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | payload

Checkpoints use magic ``PMLC`` with float32 payloads; masks use ``PMSK``
with uint8 payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import Permutation, PermutationSpec

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"PMLC"
MASK_MAGIC = b"PMSK"
_PAYLOAD_DTYPES = {CHECKPOINT_MAGIC: np.dtype("<f4"), MASK_MAGIC: np.dtype("u1")}


class FormatError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_container(magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    dtype = _PAYLOAD_DTYPES[magic]
    meta_bytes = dumps_json(meta).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype=dtype)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated container")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_container(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    dtype = _PAYLOAD_DTYPES[magic]
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = data.copy()
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return meta, tensors


def write_container(path, magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(magic, meta, tensors))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), magic)


# -- permutation files -------------------------------------------------------

def format_permutation(perm: Permutation, spec: PermutationSpec) -> str:
    perm.check_spec(spec)
    lines = [f"PMPERM v1 spec_hash={spec.spec_hash()}"]
    for k, p in enumerate(perm.perms):
        lines.append(f"group={k} size={p.size} perm={','.join(str(int(i)) for i in p)}")
    return "\n".join(lines) + "\n"


def parse_permutation(text: str, spec: PermutationSpec | None = None) -> Permutation:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("PMPERM v1 "):
        raise FormatError("missing 'PMPERM v1' header")
    header = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    if spec is not None and header.get("spec_hash") != spec.spec_hash():
        raise FormatError(
            f"spec_hash {header.get('spec_hash')} does not match {spec.spec_hash()}"
        )
    perms = []
    for k, line in enumerate(lines[1:]):
        fields = dict(tok.split("=", 1) for tok in line.split())
        if int(fields["group"]) != k:
            raise FormatError(f"groups out of order at line {k + 2}")
        p = np.array([int(x) for x in fields["perm"].split(",")], dtype=np.int64)
        if p.size != int(fields["size"]):
            raise FormatError(f"group {k}: size field {fields['size']} != {p.size} entries")
        perms.append(p)
    perm = Permutation(tuple(perms))
    if spec is not None:
        perm.check_spec(spec)
    return perm


def save_permutation(path, perm: Permutation, spec: PermutationSpec) -> None:
    Path(path).write_text(format_permutation(perm, spec), encoding="utf-8")


def load_permutation(path, spec: PermutationSpec | None = None) -> Permutation:
    return parse_permutation(Path(path).read_text(encoding="utf-8"), spec)
