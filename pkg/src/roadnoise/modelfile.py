"""RNM1 model file codec.

Layout (all integers little-endian)::

    b"RNM1" | arch id (u8) | tensor count (u32)
    per tensor: name length (u16) | UTF-8 name | ndim (u8) | dims (u32 each)
                | dtype (u8: 0=f64, 1=i8, 2=i32) | raw data
                [i8 only: scale (f64) | zero point (i32)]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidModel

MAGIC = b"RNM1"
HEADER_SIZE = 9

ARCH_CNN_F32 = 0
ARCH_AST_F32 = 1
ARCH_CNN_INT8 = 2

DT_F64, DT_I8, DT_I32 = 0, 1, 2
GEOMETRY = "arch.geometry"  # i32 [in_h, in_w] (CNN) or [in_h, in_w, heads] (AST)
_NP_DTYPES = {DT_F64: np.dtype("<f8"), DT_I8: np.dtype("i1"), DT_I32: np.dtype("<i4")}


@dataclass
class RawTensor:
    name: str
    data: np.ndarray
    dtype: int = DT_F64
    scale: float | None = None
    zero_point: int | None = None


def encode(arch_id: int, tensors: list[RawTensor]) -> bytes:
    out = [MAGIC, struct.pack("<BI", arch_id, len(tensors))]
    for t in tensors:
        name = t.name.encode("utf-8")
        arr = np.asarray(t.data, dtype=_NP_DTYPES[t.dtype])
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", t.dtype) + arr.tobytes())
        if t.dtype == DT_I8:
            out.append(struct.pack("<di", float(t.scale), int(t.zero_point)))
    return b"".join(out)


def decode(blob: bytes) -> tuple[int, list[RawTensor]]:
    if blob[:4] != MAGIC:
        raise InvalidModel("not an RNM1 model file (bad magic)")
    try:
        arch_id, count = struct.unpack_from("<BI", blob, 4)
        pos = HEADER_SIZE
        tensors = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (dtype,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if dtype not in _NP_DTYPES:
                raise InvalidModel(f"tensor {name!r}: unknown dtype code {dtype}")
            npd = _NP_DTYPES[dtype]
            n = int(np.prod(dims)) if ndim else 1
            nbytes = n * npd.itemsize
            if pos + nbytes > len(blob):
                raise InvalidModel(f"tensor {name!r} is truncated")
            data = np.frombuffer(blob, dtype=npd, count=n, offset=pos).reshape(dims).copy()
            pos += nbytes
            t = RawTensor(name, data, dtype)
            if dtype == DT_I8:
                t.scale, t.zero_point = struct.unpack_from("<di", blob, pos)
                pos += 12
            tensors.append(t)
    except struct.error as exc:
        raise InvalidModel(f"truncated model file: {exc}") from exc
    if pos != len(blob):
        raise InvalidModel(f"{len(blob) - pos} trailing bytes after the last tensor")
    return arch_id, tensors


def model_to_bytes(model) -> bytes:
    from .models import Model
    from .quant import QuantizedModel

    if isinstance(model, QuantizedModel):
        return encode(ARCH_CNN_INT8, model.to_tensors())
    if isinstance(model, Model):
        tensors = [RawTensor(k, v) for k, v in model.params.items()]
        a = model.arch
        geom = [a.in_h, a.in_w] + ([a.heads] if model.kind == "ast" else [])
        tensors.append(RawTensor(GEOMETRY, np.array(geom), DT_I32))
        tensors.append(RawTensor("norm.mean", model.norm_mean))
        tensors.append(RawTensor("norm.std", model.norm_std))
        return encode(ARCH_CNN_F32 if model.kind == "cnn" else ARCH_AST_F32, tensors)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_bytes(blob: bytes):
    from .models import AstArch, CnnArch, Model
    from .quant import QuantizedModel

    arch_id, tensors = decode(blob)
    if arch_id == ARCH_CNN_INT8:
        return QuantizedModel.from_tensors(tensors)
    if arch_id not in (ARCH_CNN_F32, ARCH_AST_F32):
        raise InvalidModel(f"unknown arch id {arch_id}")
    named = {t.name: t.data for t in tensors}
    try:
        mean = named.pop("norm.mean")
        std = named.pop("norm.std")
    except KeyError as exc:
        raise InvalidModel(f"model file lacks normalization tensor {exc}") from exc
    geom = named.pop(GEOMETRY, None)
    if geom is None or len(geom) < 2:
        raise InvalidModel(f"model file lacks a valid {GEOMETRY!r} tensor")
    in_h, in_w = int(geom[0]), int(geom[1])
    try:
        if arch_id == ARCH_CNN_F32:
            arch = CnnArch(
                in_h=in_h,
                in_w=in_w,
                conv1=named["conv1.w"].shape[0],
                conv2=named["conv2.w"].shape[0],
                hidden=named["dense1.w"].shape[1],
            )
        else:
            arch = AstArch(
                in_h=in_h,
                in_w=in_w,
                patch=int(round(np.sqrt(named["patch.w"].shape[0]))),
                dim=named["cls"].shape[0],
                heads=int(geom[2]) if len(geom) > 2 else 2,
                layers=sum(1 for k in named if k.endswith(".ln1.g")),
                mlp=named["blocks.0.mlp.w1"].shape[1],
            )
    except KeyError as exc:
        raise InvalidModel(f"model file lacks tensor {exc}") from exc
    expected = arch.shapes()
    if set(expected) != set(named):
        raise InvalidModel(f"tensor set mismatch: {sorted(set(expected) ^ set(named))}")
    for k, shape in expected.items():
        if named[k].shape != shape:
            raise InvalidModel(f"tensor {k!r} has shape {named[k].shape}, expected {shape}")
    params = {k: named[k] for k in expected}
    return Model(arch, params, mean, std)


def save_model(model, path: str | Path) -> int:
    blob = model_to_bytes(model)
    Path(path).write_bytes(blob)
    return len(blob)


def load_model(path: str | Path):
    return model_from_bytes(Path(path).read_bytes())


def serialized_size(model) -> int:
    return len(model_to_bytes(model))
