"""RRFRAG pseudo-resource record codec and RRID assignment.

Wire layout (the generic RR slots are reused)::

    NAME      1 byte   always root (0x00)
    TYPE      2 bytes  RRFRAG type code
    RRID      2 bytes  (CLASS slot)
    CURIDX    4 bytes  (TTL slot)
    FRAGSIZE  2 bytes  (RDLENGTH slot) = len(FRAGDATA) + 2
    RRSIZE    2 bytes  first two bytes of RDATA
    FRAGDATA  FRAGSIZE - 2 bytes

In a query the FRAGSIZE slot carries the size the requester wants the
fragment to be and FRAGDATA is empty, so a query RRFRAG is always 13 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Container

DEFAULT_RRFRAG_TYPE = 65280

FIXED_SIZE = 13

_FIXED = struct.Struct("!BHHIHH")

FNV32_OFFSET = 0x811C9DC5
FNV32_PRIME = 0x01000193


class MalformedRrFrag(ValueError):
    """Bytes that claim to be an RRFRAG but cannot be decoded as one."""


@dataclass(frozen=True)
class RrFrag:
    """One fragment (response) or one fragment request (query) of a single RR."""

    rrid: int
    curidx: int
    fragsize: int
    rrsize: int
    fragdata: bytes = b""

    def __post_init__(self):
        if not 0 <= self.rrid <= 0xFFFF:
            raise ValueError(f"rrid out of range: {self.rrid}")
        if not 0 <= self.curidx <= 0xFFFFFFFF:
            raise ValueError(f"curidx out of range: {self.curidx}")
        if not 2 <= self.fragsize <= 0xFFFF:
            raise ValueError(f"fragsize out of range: {self.fragsize}")
        if not 0 <= self.rrsize <= 0xFFFF:
            raise ValueError(f"rrsize out of range: {self.rrsize}")
        if self.fragdata:
            if self.fragsize != len(self.fragdata) + 2:
                raise ValueError("fragsize must equal len(fragdata) + 2")
            if self.curidx + len(self.fragdata) > self.rrsize:
                raise ValueError("fragment runs past the end of the record")

    @classmethod
    def response(cls, rrid: int, curidx: int, rrsize: int, data: bytes) -> RrFrag:
        return cls(rrid, curidx, len(data) + 2, rrsize, bytes(data))

    @classmethod
    def request(cls, rrid: int, curidx: int, rrsize: int, want: int) -> RrFrag:
        """Descriptor asking for ``want`` bytes of the record starting at ``curidx``."""
        return cls(rrid, curidx, want + 2, rrsize, b"")

    @property
    def wanted(self) -> int:
        return self.fragsize - 2

    @property
    def end(self) -> int:
        return self.curidx + len(self.fragdata)

    def encoded_size(self) -> int:
        return FIXED_SIZE + len(self.fragdata)


def encode_rrfrag(frag: RrFrag, type_code: int = DEFAULT_RRFRAG_TYPE) -> bytes:
    return _FIXED.pack(0, type_code, frag.rrid, frag.curidx, frag.fragsize, frag.rrsize) + frag.fragdata


def read_rrfrag(
    data: bytes, offset: int, type_code: int = DEFAULT_RRFRAG_TYPE, query: bool = False
) -> tuple[RrFrag, int]:
    """Decode the RRFRAG at ``offset``; return it with the offset just past it."""
    if offset + FIXED_SIZE > len(data):
        raise MalformedRrFrag("buffer too short for RRFRAG header")
    name, rtype, rrid, curidx, fragsize, rrsize = _FIXED.unpack_from(data, offset)
    if name != 0:
        raise MalformedRrFrag("RRFRAG owner name must be root")
    if rtype != type_code:
        raise MalformedRrFrag(f"type {rtype} is not the RRFRAG type {type_code}")
    if fragsize < 2:
        raise MalformedRrFrag(f"fragsize {fragsize} < 2")
    offset += FIXED_SIZE
    if query:
        return RrFrag(rrid, curidx, fragsize, rrsize), offset
    n = fragsize - 2
    if offset + n > len(data):
        raise MalformedRrFrag(f"fragsize {fragsize} overruns buffer")
    if curidx + n > rrsize:
        raise MalformedRrFrag("fragment runs past rrsize")
    return RrFrag(rrid, curidx, fragsize, rrsize, bytes(data[offset : offset + n])), offset + n


def decode_rrfrag(data: bytes, type_code: int = DEFAULT_RRFRAG_TYPE, *, query: bool = False) -> RrFrag:
    frag, _ = read_rrfrag(data, 0, type_code, query)
    return frag


def fnv1a_32(data: bytes) -> int:
    h = FNV32_OFFSET
    for b in data:
        h = ((h ^ b) * FNV32_PRIME) & 0xFFFFFFFF
    return h


def rrid_hash(rr_bytes: bytes) -> int:
    """FNV-1a 32-bit hash xor-folded down to 16 bits."""
    h = fnv1a_32(rr_bytes)
    return (h >> 16) ^ (h & 0xFFFF)


def assign_rrid(rr_bytes: bytes, occupied: Container[int] = frozenset()) -> int:
    """Stable RRID for a record: the folded hash, linearly probed past ``occupied``."""
    rrid = rrid_hash(rr_bytes)
    for _ in range(0x10000):
        if rrid not in occupied:
            return rrid
        rrid = (rrid + 1) & 0xFFFF
    raise ValueError("every RRID is occupied")
