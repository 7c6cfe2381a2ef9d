"""
Codec SVOL: cabeçalho ASCII + payload little-endian em ordem row-major.

    SVOL1 <f32|u8> <D> <H> <W> <sz> <sy> <sx>\\n<payload>

Imagens vão em f32, rótulos em u8.
"""
import os
from typing import Tuple

import numpy as np

from app.core.exceptions import InvalidArgumentError

MAGIC = "SVOL1"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def encode(data: np.ndarray, spacing: Tuple[float, float, float], dtype: str) -> bytes:
    if dtype not in DTYPES:
        raise InvalidArgumentError(f"dtype SVOL inválido: {dtype}")
    if data.ndim != 3:
        raise InvalidArgumentError(f"SVOL exige volume 3D, recebeu ndim={data.ndim}")
    if dtype == "u8" and data.size and (data.min() < 0 or data.max() > 255):
        raise InvalidArgumentError("Rótulo fora da faixa u8")

    d, h, w = data.shape
    sz, sy, sx = (repr(float(s)) for s in spacing)
    header = f"{MAGIC} {dtype} {d} {h} {w} {sz} {sy} {sx}\n".encode("ascii")
    payload = np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes(order="C")
    return header + payload


def decode(raw: bytes):
    """Retorna (array, spacing, dtype). Erros de formato viram InvalidArgumentError."""
    newline = raw.find(b"\n")
    if newline < 0:
        raise InvalidArgumentError("SVOL sem cabeçalho")
    try:
        parts = raw[:newline].decode("ascii").split()
    except UnicodeDecodeError:
        raise InvalidArgumentError("Cabeçalho SVOL não é ASCII")

    if len(parts) != 8 or parts[0] != MAGIC or parts[1] not in DTYPES:
        raise InvalidArgumentError(f"Cabeçalho SVOL inválido: {parts[:2]}")

    try:
        shape = tuple(int(p) for p in parts[2:5])
        spacing = tuple(float(p) for p in parts[5:8])
    except ValueError:
        raise InvalidArgumentError("Dimensões/espaçamento SVOL ilegíveis")

    dtype = DTYPES[parts[1]]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[newline + 1:]
    if len(payload) != expected:
        raise InvalidArgumentError(f"Payload SVOL com {len(payload)} bytes, esperado {expected}")

    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return data, spacing, parts[1]


def write_svol(path, data: np.ndarray, spacing, dtype: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode(data, spacing, dtype))


def read_svol(path):
    with open(path, "rb") as f:
        return decode(f.read())
