"""Binary container for :class:`~fmps.mps.Mps` values.

Layout (all integers and floats little-endian)::

    magic            8 bytes   b"FMPS\\x00\\x01\\r\\n"
    version          uint32
    K                uint32
    form             uint8     0 none, 1 left, 2 closure
    flags            uint8     bit 0: real entries, bit 1: discarded present
    reserved         uint16
    norm_factor      float64
    n_zero           uint32    followed by n_zero uint32 bond indices
    shapes           K x 3 uint32
    discarded        (K - 1) float64, only when flagged
    entries          complex128 per site, C order

Entries are always stored as complex128; the real flag restores float64
arrays on load, so the round trip is bit-exact in value and dtype.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .mps import Mps

__all__ = ["FORMAT_VERSION", "MpsFormatError", "save_mps", "load_mps", "dumps_mps", "loads_mps"]

MAGIC = b"FMPS\x00\x01\r\n"
FORMAT_VERSION = 1
_FORMS = ("none", "left", "closure")
_HEAD = struct.Struct("<IIBBHd")


class MpsFormatError(ValueError):
    """The container is truncated, corrupt or of an unknown version."""


def _write(mps: Mps, fh: BinaryIO) -> None:
    real = np.dtype(mps.dtype).kind != "c"
    flags = int(real) | (2 if mps.discarded is not None else 0)
    fh.write(MAGIC)
    fh.write(_HEAD.pack(FORMAT_VERSION, mps.K, _FORMS.index(mps.canonical_form), flags, 0, mps.norm_factor))
    zeros = tuple(int(b) for b in mps.zero_closure)
    fh.write(struct.pack(f"<I{len(zeros)}I", len(zeros), *zeros))
    shapes = np.array([a.shape for a in mps.sites], dtype="<u4")
    fh.write(shapes.tobytes())
    if mps.discarded is not None:
        disc = np.asarray(mps.discarded, dtype="<f8")
        if disc.shape != (mps.K - 1,):
            raise MpsFormatError(f"discarded weights must have length {mps.K - 1}")
        fh.write(disc.tobytes())
    for a in mps.sites:
        fh.write(np.ascontiguousarray(a, dtype="<c16").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise MpsFormatError(f"unexpected end of file (wanted {n} bytes, got {len(data)})")
    return data


def _read(fh: BinaryIO) -> Mps:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise MpsFormatError("not an MPS container (bad magic)")
    version, K, form, flags, _, norm = _HEAD.unpack(_read_exact(fh, _HEAD.size))
    if version != FORMAT_VERSION:
        raise MpsFormatError(f"unsupported format version {version}")
    if form >= len(_FORMS) or K < 1:
        raise MpsFormatError(f"corrupt header (form tag {form}, K={K})")
    (n_zero,) = struct.unpack("<I", _read_exact(fh, 4))
    zeros = struct.unpack(f"<{n_zero}I", _read_exact(fh, 4 * n_zero))
    shapes = np.frombuffer(_read_exact(fh, 12 * K), dtype="<u4").reshape(K, 3)
    discarded = None
    if flags & 2:
        discarded = tuple(np.frombuffer(_read_exact(fh, 8 * (K - 1)), dtype="<f8").tolist())
    sites = []
    for shape in shapes:
        shape = tuple(int(x) for x in shape)
        n = shape[0] * shape[1] * shape[2]
        a = np.frombuffer(_read_exact(fh, 16 * n), dtype="<c16").reshape(shape).astype(complex)
        if flags & 1:
            a = a.real.copy()
        sites.append(a)
    if fh.read(1):
        raise MpsFormatError("trailing bytes after the last site")
    try:
        return Mps(tuple(sites), norm, _FORMS[form], discarded, tuple(zeros))
    except ValueError as exc:
        raise MpsFormatError(f"inconsistent container: {exc}") from exc


def dumps_mps(mps: Mps) -> bytes:
    buf = io.BytesIO()
    _write(mps, buf)
    return buf.getvalue()


def loads_mps(data: bytes) -> Mps:
    return _read(io.BytesIO(data))


def save_mps(mps: Mps, path: Union[str, os.PathLike]) -> None:
    """Write ``mps`` to ``path`` (overwrites)."""
    with open(path, "wb") as fh:
        _write(mps, fh)


def load_mps(path: Union[str, os.PathLike]) -> Mps:
    with open(path, "rb") as fh:
        return _read(fh)
