"""DNS message parsing and serialization.

Only what is needed to carry, fragment and reassemble responses: header,
questions, resource records with opaque RDATA, the EDNS(0) OPT record and
RRFRAGs.  Names are expanded on input and never compressed on output, so
the serialized bytes of a record do not depend on where it sits in a
message.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Union

from .rrfrag import DEFAULT_RRFRAG_TYPE, FIXED_SIZE, MalformedRrFrag, RrFrag, encode_rrfrag, read_rrfrag

Name = tuple[bytes, ...]

ROOT: Name = ()

HEADER_SIZE = 12
MAX_MESSAGE_SIZE = 0xFFFF

QR = 0x8000
TC = 0x0200
RD = 0x0100
RA = 0x0080

NOERROR = 0
FORMERR = 1
SERVFAIL = 2
NXDOMAIN = 3
RCODES = (NOERROR, FORMERR, SERVFAIL, NXDOMAIN)

TYPE_A = 1
TYPE_NS = 2
TYPE_SOA = 6
TYPE_OPT = 41
TYPE_RRSIG = 46
TYPE_DNSKEY = 48
CLASS_IN = 1

_HEADER = struct.Struct("!HHHHHH")
_RR_FIXED = struct.Struct("!HHIH")
_Q_FIXED = struct.Struct("!HH")

_MAX_POINTER_HOPS = 128


class MalformedMessage(ValueError):
    pass


class OversizeMessage(ValueError):
    pass


def name_from_text(text: str) -> Name:
    """``"example.com."`` -> ``(b"example", b"com")``; ``"."`` is the root."""
    text = text.rstrip(".")
    if not text:
        return ROOT
    name = tuple(label.encode("ascii") for label in text.split("."))
    check_name(name)
    return name


def name_to_text(name: Name) -> str:
    if not name:
        return "."
    return ".".join(label.decode("ascii", "backslashreplace") for label in name) + "."


def check_name(name: Name) -> None:
    for label in name:
        if not 0 < len(label) <= 63:
            raise ValueError(f"bad label length {len(label)}")
    if name_size(name) > 255:
        raise ValueError("name longer than 255 bytes")


def name_size(name: Name) -> int:
    return sum(len(label) + 1 for label in name) + 1


def encode_name(name: Name) -> bytes:
    return b"".join(bytes((len(label),)) + label for label in name) + b"\x00"


def read_name(data: bytes, offset: int) -> tuple[Name, int]:
    """Read a possibly compressed name; return it and the offset after it.

    Pointers must point strictly backwards, which rules out loops.
    """
    labels: list[bytes] = []
    end = None
    size = 1
    hops = 0
    limit = offset
    while True:
        if offset >= len(data):
            raise MalformedMessage("name runs past end of message")
        length = data[offset]
        if length == 0:
            offset += 1
            break
        kind = length & 0xC0
        if kind == 0xC0:
            if offset + 1 >= len(data):
                raise MalformedMessage("truncated compression pointer")
            target = ((length & 0x3F) << 8) | data[offset + 1]
            if end is None:
                end = offset + 2
            if target >= limit:
                raise MalformedMessage("compression pointer does not point backwards")
            hops += 1
            if hops > _MAX_POINTER_HOPS:
                raise MalformedMessage("compression pointer loop")
            offset = limit = target
            continue
        if kind:
            raise MalformedMessage(f"unsupported label type 0x{kind:02x}")
        if offset + 1 + length > len(data):
            raise MalformedMessage("label runs past end of message")
        size += length + 1
        if size > 255:
            raise MalformedMessage("name longer than 255 bytes")
        labels.append(bytes(data[offset + 1 : offset + 1 + length]))
        offset += 1 + length
    return tuple(labels), offset if end is None else end


@dataclass(frozen=True)
class DnsHeader:
    id: int = 0
    flags: int = 0

    @property
    def qr(self) -> bool:
        return bool(self.flags & QR)

    @property
    def tc(self) -> bool:
        return bool(self.flags & TC)

    @property
    def rcode(self) -> int:
        return self.flags & 0x000F

    def with_flags(self, *, tc: bool | None = None, qr: bool | None = None, rcode: int | None = None) -> DnsHeader:
        flags = self.flags
        if tc is not None:
            flags = flags | TC if tc else flags & ~TC
        if qr is not None:
            flags = flags | QR if qr else flags & ~QR
        if rcode is not None:
            flags = (flags & ~0x000F) | rcode
        return DnsHeader(self.id, flags)


@dataclass(frozen=True)
class Question:
    qname: Name
    qtype: int
    qclass: int = CLASS_IN

    def encoded_size(self) -> int:
        return name_size(self.qname) + 4

    def to_bytes(self) -> bytes:
        return encode_name(self.qname) + _Q_FIXED.pack(self.qtype, self.qclass)


@dataclass(frozen=True)
class ResourceRecord:
    name: Name
    rrtype: int
    rclass: int
    ttl: int
    rdata: bytes

    def __post_init__(self):
        if len(self.rdata) > 0xFFFF:
            raise ValueError("rdata longer than 65535 bytes")

    def encoded_size(self) -> int:
        return name_size(self.name) + 10 + len(self.rdata)

    def to_bytes(self) -> bytes:
        return encode_name(self.name) + _RR_FIXED.pack(self.rrtype, self.rclass, self.ttl, len(self.rdata)) + self.rdata


@dataclass(frozen=True)
class OptRecord:
    """EDNS(0) OPT pseudo-RR; ``ttl`` holds extended rcode, version and flags."""

    udp_payload_size: int = 1232
    ttl: int = 0
    rdata: bytes = b""

    def encoded_size(self) -> int:
        return 11 + len(self.rdata)

    def to_bytes(self) -> bytes:
        return b"\x00" + _RR_FIXED.pack(TYPE_OPT, self.udp_payload_size, self.ttl, len(self.rdata)) + self.rdata


SectionEntry = Union[ResourceRecord, RrFrag, OptRecord]


@dataclass(frozen=True)
class DnsMessage:
    header: DnsHeader = field(default_factory=DnsHeader)
    questions: tuple[Question, ...] = ()
    answers: tuple[SectionEntry, ...] = ()
    authority: tuple[SectionEntry, ...] = ()
    additional: tuple[SectionEntry, ...] = ()

    def __post_init__(self):
        # accept lists from callers, store tuples
        for attr in ("questions", "answers", "authority", "additional"):
            value = getattr(self, attr)
            if not isinstance(value, tuple):
                object.__setattr__(self, attr, tuple(value))

    @property
    def id(self) -> int:
        return self.header.id

    @property
    def is_response(self) -> bool:
        return self.header.qr

    @property
    def qdcount(self) -> int:
        return len(self.questions)

    @property
    def ancount(self) -> int:
        return len(self.answers)

    @property
    def nscount(self) -> int:
        return len(self.authority)

    @property
    def arcount(self) -> int:
        return len(self.additional)

    @property
    def sections(self) -> tuple[tuple[SectionEntry, ...], ...]:
        return (self.answers, self.authority, self.additional)

    def entries(self):
        for section in self.sections:
            yield from section

    @property
    def opt(self) -> OptRecord | None:
        for entry in self.additional:
            if isinstance(entry, OptRecord):
                return entry
        return None

    def rrfrags(self) -> list[RrFrag]:
        return [e for e in self.entries() if isinstance(e, RrFrag)]

    def with_sections(self, answers, authority, additional) -> DnsMessage:
        return replace(self, answers=tuple(answers), authority=tuple(authority), additional=tuple(additional))


def entry_size(entry: SectionEntry) -> int:
    return entry.encoded_size()


def encoded_size(msg: DnsMessage) -> int:
    return (
        HEADER_SIZE
        + sum(q.encoded_size() for q in msg.questions)
        + sum(e.encoded_size() for e in msg.entries())
    )


def _entry_bytes(entry: SectionEntry, rrfrag_type: int, response: bool) -> bytes:
    if isinstance(entry, RrFrag):
        if response and entry.fragsize != len(entry.fragdata) + 2:
            raise ValueError("RRFRAG in a response must have fragsize == len(fragdata) + 2")
        if not response and entry.fragdata:
            raise ValueError("RRFRAG in a query must not carry fragdata")
        return encode_rrfrag(entry, rrfrag_type)
    return entry.to_bytes()


def serialize_message(msg: DnsMessage, rrfrag_type: int = DEFAULT_RRFRAG_TYPE) -> bytes:
    opts = [e for e in msg.entries() if isinstance(e, OptRecord)]
    if len(opts) > 1 or any(isinstance(e, OptRecord) for e in msg.answers + msg.authority):
        raise ValueError("at most one OPT record, and only in the additional section")
    response = msg.header.qr
    parts = [
        _HEADER.pack(msg.header.id, msg.header.flags, msg.qdcount, msg.ancount, msg.nscount, msg.arcount)
    ]
    parts.extend(q.to_bytes() for q in msg.questions)
    parts.extend(_entry_bytes(e, rrfrag_type, response) for e in msg.entries())
    out = b"".join(parts)
    if len(out) > MAX_MESSAGE_SIZE:
        raise OversizeMessage(f"encoded message is {len(out)} bytes")
    return out


def _read_entry(data: bytes, offset: int, rrfrag_type: int, query: bool) -> tuple[SectionEntry, int]:
    if offset + 3 <= len(data) and data[offset] == 0 and (data[offset + 1] << 8 | data[offset + 2]) == rrfrag_type:
        try:
            return read_rrfrag(data, offset, rrfrag_type, query)
        except MalformedRrFrag as exc:
            raise MalformedMessage(str(exc)) from exc
    name, offset = read_name(data, offset)
    if offset + 10 > len(data):
        raise MalformedMessage("truncated resource record header")
    rtype, rclass, ttl, rdlen = _RR_FIXED.unpack_from(data, offset)
    offset += 10
    if offset + rdlen > len(data):
        raise MalformedMessage("rdata runs past end of message")
    rdata = bytes(data[offset : offset + rdlen])
    offset += rdlen
    if rtype == TYPE_OPT:
        if name:
            raise MalformedMessage("OPT owner name must be root")
        return OptRecord(rclass, ttl, rdata), offset
    if rtype == rrfrag_type:
        raise MalformedMessage("RRFRAG owner name must be root")
    return ResourceRecord(name, rtype, rclass, ttl, rdata), offset


def parse_message(data: bytes, rrfrag_type: int = DEFAULT_RRFRAG_TYPE) -> DnsMessage:
    """Parse a complete DNS message.

    Raises MalformedMessage on truncation, bad names, pointer loops, misplaced
    or duplicate OPT records, or bytes left over after the counted sections.
    """
    if len(data) < HEADER_SIZE:
        raise MalformedMessage(f"message is {len(data)} bytes, shorter than a header")
    if len(data) > MAX_MESSAGE_SIZE:
        raise MalformedMessage("message longer than 65535 bytes")
    msg_id, flags, qd, an, ns, ar = _HEADER.unpack_from(data, 0)
    query = not flags & QR
    offset = HEADER_SIZE
    questions = []
    for _ in range(qd):
        qname, offset = read_name(data, offset)
        if offset + 4 > len(data):
            raise MalformedMessage("truncated question")
        qtype, qclass = _Q_FIXED.unpack_from(data, offset)
        offset += 4
        questions.append(Question(qname, qtype, qclass))
    sections = []
    for count in (an, ns, ar):
        section = []
        for _ in range(count):
            entry, offset = _read_entry(data, offset, rrfrag_type, query)
            section.append(entry)
        sections.append(tuple(section))
    if offset != len(data):
        raise MalformedMessage(f"{len(data) - offset} trailing bytes after last record")
    answers, authority, additional = sections
    n_opt = sum(isinstance(e, OptRecord) for e in additional)
    if n_opt > 1 or any(isinstance(e, OptRecord) for e in answers + authority):
        raise MalformedMessage("OPT record misplaced or repeated")
    return DnsMessage(DnsHeader(msg_id, flags), tuple(questions), answers, authority, additional)


def parse_rr(data: bytes) -> ResourceRecord:
    """Parse one canonical (uncompressed) resource record occupying all of ``data``."""
    name, offset = read_name(data, 0)
    if offset + 10 > len(data):
        raise MalformedMessage("truncated resource record header")
    rtype, rclass, ttl, rdlen = _RR_FIXED.unpack_from(data, offset)
    offset += 10
    if offset + rdlen != len(data):
        raise MalformedMessage("rdata length does not match record size")
    return ResourceRecord(name, rtype, rclass, ttl, bytes(data[offset:]))


def make_query(
    qname: str | Name,
    qtype: int = TYPE_A,
    *,
    msg_id: int = 0,
    udp_size: int | None = 1232,
    rd: bool = True,
) -> DnsMessage:
    if isinstance(qname, str):
        qname = name_from_text(qname)
    additional = (OptRecord(udp_size, 0x8000),) if udp_size is not None else ()
    return DnsMessage(
        DnsHeader(msg_id, RD if rd else 0),
        (Question(qname, qtype),),
        additional=additional,
    )


def error_response(query: DnsMessage, rcode: int) -> DnsMessage:
    """Empty-section response echoing ``query``'s id and question."""
    header = DnsHeader(query.header.id, (query.header.flags | QR) & ~TC & ~0x000F | rcode)
    return DnsMessage(header, query.questions)
