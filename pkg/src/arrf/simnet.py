"""Deterministic discrete-event model of one client -> resolver -> name server lookup.

The network is synthetic; the DNS messages are not.  Every datagram in an
ARRF run is produced by the real fragmenter, serialized, parsed and fed to
the real reassembler, so sizes and exchange counts come from the protocol
implementation itself.

Timing: a datagram sent at ``t`` on a link starts transmitting once the
link direction is free, occupies it for ``size / bandwidth`` and arrives
``latency`` later.  Only the resolver <-> name server link is
bandwidth-limited; the client link adds latency only.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .fragmenter import ResponderCache, fragment_response, handle_fragment_query
from .reassembler import (
    DEFAULT_HEADROOM,
    Complete,
    Pending,
    Strategy,
    absorb_fragment_response,
    inspect_response,
)
from .wire import (
    CLASS_IN,
    QR,
    TC,
    TYPE_A,
    TYPE_NS,
    TYPE_RRSIG,
    TYPE_SOA,
    DnsHeader,
    DnsMessage,
    OptRecord,
    Question,
    ResourceRecord,
    encode_name,
    encoded_size,
    make_query,
    name_from_text,
    parse_message,
    serialize_message,
)

UDP_OVERHEAD = 40
TCP_OVERHEAD = 52
TCP_MSS = 1460
PROCESSING_MS = 0.5


class Mechanism(enum.Enum):
    STANDARD = "standard"
    UDP_ONLY = "udp_only"
    ARRF_SEQUENTIAL = "arrf_sequential"
    ARRF_PARALLEL = "arrf_parallel"


@dataclass(frozen=True)
class ZoneProfile:
    """Sizes of the records in the worst-case signed A response."""

    name: str
    rrsig_size: int
    dnskey_size: int
    a_size: int = 4
    soa_fixed: int = 20
    qname: str = "a1.example."
    zone: str = "example."

    def __post_init__(self):
        for attr in ("rrsig_size", "dnskey_size", "a_size", "soa_fixed"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be at least 1")


# Signature and key sizes in bytes.  Only Falcon-512's 690 is a measured
# bound; the rest are the published parameter-set sizes.
PROFILES = {
    "falcon": ZoneProfile("falcon", rrsig_size=690, dnskey_size=897),
    "dilithium": ZoneProfile("dilithium", rrsig_size=2420, dnskey_size=1312),
    "sphincs": ZoneProfile("sphincs", rrsig_size=7856, dnskey_size=32),
    "rsa": ZoneProfile("rsa", rrsig_size=256, dnskey_size=260),
    "ecdsa": ZoneProfile("ecdsa", rrsig_size=64, dnskey_size=64),
}


def _pattern(size: int, seed: int) -> bytes:
    return bytes((seed + i) & 0xFF for i in range(size))


def build_worst_case_response(profile: ZoneProfile, msg_id: int = 0x1234) -> DnsMessage:
    """1 question, 1 A, 1 NS, 1 SOA and 3 RRSIGs with counter-pattern RDATA."""
    qname = name_from_text(profile.qname)
    zone = name_from_text(profile.zone)
    ns_name = name_from_text("ns1." + profile.zone)
    rname = name_from_text("hostmaster." + profile.zone)
    ttl = 3600

    def rr(owner, rtype, rdata):
        return ResourceRecord(owner, rtype, CLASS_IN, ttl, rdata)

    answers = (
        rr(qname, TYPE_A, _pattern(profile.a_size, 1)),
        rr(qname, TYPE_RRSIG, _pattern(profile.rrsig_size, 11)),
    )
    authority = (
        rr(zone, TYPE_NS, encode_name(ns_name)),
        rr(zone, TYPE_RRSIG, _pattern(profile.rrsig_size, 22)),
        rr(zone, TYPE_SOA, encode_name(ns_name) + encode_name(rname) + _pattern(profile.soa_fixed, 5)),
        rr(zone, TYPE_RRSIG, _pattern(profile.rrsig_size, 33)),
    )
    additional = (OptRecord(65355, 0x8000),)
    header = DnsHeader(msg_id, QR | 0x0400)  # QR + AA
    return DnsMessage(header, (Question(qname, TYPE_A),), answers, authority, additional)


@dataclass(frozen=True)
class SimScenario:
    mechanism: Mechanism
    latency_ms: float = 10.0
    bandwidth: float | None = None  # bytes per second; None is unlimited
    max_udp: int = 1232
    profile: str = "falcon"
    header_overhead: int = UDP_OVERHEAD
    tcp_overhead: int = TCP_OVERHEAD
    processing_ms: float = PROCESSING_MS
    mss: int = TCP_MSS
    headroom: int = DEFAULT_HEADROOM

    def __post_init__(self):
        if isinstance(self.mechanism, str):
            object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.latency_ms < 0:
            raise ValueError("latency must be >= 0")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive or None")
        if self.max_udp < 128:
            raise ValueError("max_udp must be >= 128")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")


@dataclass(frozen=True)
class TraceEntry:
    time_ms: float
    direction: str  # "up" resolver->name server, "down" name server->resolver
    size: int
    kind: str


@dataclass
class LookupStats:
    resolution_time: float
    total_bytes: int
    round_trips: int
    trace: list[TraceEntry] = field(default_factory=list)
    client_bytes: int = 0


class _Link:
    def __init__(self, latency_ms: float, bandwidth: float | None):
        self.latency = latency_ms
        self.bandwidth = bandwidth
        self.free_at = {"up": 0.0, "down": 0.0}

    def send(self, t: float, size: int, direction: str) -> float:
        start = max(t, self.free_at[direction])
        tx = 0.0 if self.bandwidth is None else size / self.bandwidth * 1000.0
        self.free_at[direction] = start + tx
        return start + tx + self.latency


class _Sim:
    def __init__(self, scn: SimScenario):
        self.scn = scn
        self.events: list = []
        self.seq = 0
        self.upstream = _Link(scn.latency_ms, scn.bandwidth)
        self.client = _Link(scn.latency_ms, None)
        self.trace: list[TraceEntry] = []
        self.client_bytes = 0
        self.depth = 0
        self.done_at: float | None = None

    def at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self.events, (t, self.seq, fn, args))
        self.seq += 1

    def run(self) -> None:
        while self.events:
            t, _, fn, args = heapq.heappop(self.events)
            fn(t, *args)

    def up(self, t: float, size: int, kind: str, fn: Callable, *args) -> None:
        self.trace.append(TraceEntry(t, "up", size, kind))
        self.at(self.upstream.send(t, size, "up"), fn, *args)

    def down(self, t: float, size: int, kind: str, fn: Callable, *args) -> None:
        self.trace.append(TraceEntry(t, "down", size, kind))
        self.at(self.upstream.send(t, size, "down"), fn, *args)


def run_lookup(scn: SimScenario) -> LookupStats:
    """Simulate one lookup; identical scenarios give identical stats."""
    sim = _Sim(scn)
    proc = scn.processing_ms
    udp = scn.header_overhead
    profile = PROFILES[scn.profile]
    full = build_worst_case_response(profile)
    full_wire = serialize_message(full)
    client_q = serialize_message(make_query(profile.qname, msg_id=0x1234, udp_size=4096))

    def finish(t: float) -> None:
        # resolver -> client with the complete answer
        t += proc
        sim.client_bytes += len(full_wire) + udp
        sim.done_at = sim.client.send(t, len(full_wire) + udp, "down")

    start_upstream = {
        Mechanism.STANDARD: _standard,
        Mechanism.UDP_ONLY: _udp_only,
        Mechanism.ARRF_SEQUENTIAL: _arrf,
        Mechanism.ARRF_PARALLEL: _arrf,
    }[scn.mechanism]

    def at_resolver(t: float) -> None:
        start_upstream(sim, t + proc, full, finish)

    sim.client_bytes += len(client_q) + udp
    sim.at(sim.client.send(0.0, len(client_q) + udp, "up"), at_resolver)
    sim.run()
    assert sim.done_at is not None
    return LookupStats(
        resolution_time=sim.done_at,
        total_bytes=sum(e.size for e in sim.trace),
        round_trips=1 + sim.depth,
        trace=sim.trace,
        client_bytes=sim.client_bytes,
    )


def _upstream_query(full: DnsMessage, udp_size: int) -> bytes:
    q = make_query(full.questions[0].qname, msg_id=full.id, udp_size=udp_size, rd=False)
    return serialize_message(q)


def _standard(sim: _Sim, t: float, full: DnsMessage, finish: Callable) -> None:
    scn = sim.scn
    proc, udp, tcp = scn.processing_ms, scn.header_overhead, scn.tcp_overhead
    query = _upstream_query(full, scn.max_udp)
    full_wire = serialize_message(full)

    if len(full_wire) <= scn.max_udp:
        sim.depth = 1
        sim.up(t, len(query) + udp, "udp-query", lambda t2: sim.down(t2 + proc, len(full_wire) + udp, "udp-response", finish))
        return

    q = parse_message(query)
    truncated = serialize_message(DnsMessage(DnsHeader(q.id, q.header.flags | QR | TC), q.questions, additional=q.additional))
    stream = len(full_wire) + 2
    segments = [min(scn.mss, stream - i) for i in range(0, stream, scn.mss)]
    sim.depth = 4
    received = {"n": 0}

    def on_segment(t2: float) -> None:
        received["n"] += 1
        sim.up(t2, tcp, "tcp-ack", lambda _t: None)
        if received["n"] == len(segments):
            finish(t2)

    def ns_on_request(t2: float) -> None:
        t2 += proc
        for seg in segments:
            sim.down(t2, seg + tcp, "tcp-segment", on_segment)

    def resolver_on_synack(t2: float) -> None:
        t2 += proc
        sim.up(t2, tcp, "tcp-ack", lambda _t: None)
        sim.up(t2, len(query) + 2 + tcp, "tcp-query", ns_on_request)

    def ns_on_syn(t2: float) -> None:
        sim.down(t2 + proc, tcp, "tcp-synack", resolver_on_synack)

    def resolver_on_tc(t2: float) -> None:
        sim.up(t2 + proc, tcp, "tcp-syn", ns_on_syn)

    sim.up(t, len(query) + udp, "udp-query", lambda t2: sim.down(t2 + proc, len(truncated) + udp, "udp-truncated", resolver_on_tc))


def _udp_only(sim: _Sim, t: float, full: DnsMessage, finish: Callable) -> None:
    scn = sim.scn
    proc, udp = scn.processing_ms, scn.header_overhead
    query = _upstream_query(full, 65535)
    size = encoded_size(full)
    pieces = [min(scn.max_udp, size - i) for i in range(0, size, scn.max_udp)]
    sim.depth = 1
    received = {"n": 0}

    def on_piece(t2: float) -> None:
        received["n"] += 1
        if received["n"] == len(pieces):
            finish(t2 + proc)

    def ns_on_query(t2: float) -> None:
        for p in pieces:
            sim.down(t2 + proc, p + udp, "udp-fragment", on_piece)

    sim.up(t, len(query) + udp, "udp-query", ns_on_query)


def _arrf(sim: _Sim, t: float, full: DnsMessage, finish: Callable) -> None:
    scn = sim.scn
    proc, udp = scn.processing_ms, scn.header_overhead
    strategy = Strategy.SEQUENTIAL if scn.mechanism is Mechanism.ARRF_SEQUENTIAL else Strategy.PARALLEL
    cache = ResponderCache()
    rng = random.Random(0)
    query = _upstream_query(full, scn.max_udp)
    holder: dict = {}

    def send_batch(t2: float, queries: Iterable[DnsMessage], depth: int) -> None:
        for q in queries:
            wire = serialize_message(q)
            sim.up(t2, len(wire) + udp, "rrfrag-query", ns_on_fragment_query, wire, depth)

    def ns_on_fragment_query(t2: float, wire: bytes, depth: int) -> None:
        q = parse_message(wire)
        resp = serialize_message(handle_fragment_query(q, q.opt.udp_payload_size, cache))
        sim.down(t2 + proc, len(resp) + udp, "rrfrag-response", resolver_on_fragment, resp, depth)

    def resolver_on_fragment(t2: float, wire: bytes, depth: int) -> None:
        sim.depth = max(sim.depth, depth)
        outcome = absorb_fragment_response(holder["state"], parse_message(wire))
        handle(t2 + proc, outcome, depth)

    def handle(t2: float, outcome, depth: int) -> None:
        if isinstance(outcome, Complete):
            if serialize_message(outcome.message) != serialize_message(full):
                raise AssertionError("reassembled response differs from the original")
            finish(t2)
            return
        holder["state"] = outcome.state
        send_batch(t2, outcome.batch.queries, depth + 1)

    def resolver_on_first(t2: float, wire: bytes) -> None:
        sim.depth = max(sim.depth, 1)
        outcome = inspect_response(parse_message(wire), scn.max_udp, strategy, headroom=scn.headroom, rng=rng, clock=lambda: 0.0)
        handle(t2 + proc, outcome, 1)

    def ns_on_query(t2: float) -> None:
        first, _ = fragment_response(full, scn.max_udp, cache)
        wire = serialize_message(first)
        sim.down(t2 + proc, len(wire) + udp, "udp-response", resolver_on_first, wire)

    sim.up(t, len(query) + udp, "udp-query", ns_on_query)


CSV_COLUMNS = [
    "mechanism",
    "latency_ms",
    "bandwidth",
    "max_udp",
    "profile",
    "resolution_time_ms",
    "total_bytes",
    "round_trips",
]


def run_suite(scenarios: Iterable[SimScenario]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for scn in scenarios:
        stats = run_lookup(scn)
        writer.writerow(
            [
                scn.mechanism.value,
                f"{scn.latency_ms:g}",
                "unlimited" if scn.bandwidth is None else f"{scn.bandwidth:g}",
                scn.max_udp,
                scn.profile,
                f"{stats.resolution_time:.3f}",
                stats.total_bytes,
                stats.round_trips,
            ]
        )
    return buf.getvalue()


_SCENARIO_KEYS = {"mechanism", "latency_ms", "bandwidth_bps", "max_udp", "profile", "header_overhead"}


def parse_scenario_file(text: str) -> list[SimScenario]:
    """Blank-line separated blocks of ``key=value`` lines; ``#`` starts a comment.

    ``bandwidth_bps`` is in bytes per second, or ``unlimited``.
    """
    scenarios = []
    blocks: list[dict[str, str]] = [{}]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if blocks[-1]:
                blocks.append({})
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in _SCENARIO_KEYS:
            raise ValueError(f"line {lineno}: expected one of {sorted(_SCENARIO_KEYS)} as key=value")
        blocks[-1][key] = value
    for block in blocks:
        if not block:
            continue
        if "mechanism" not in block:
            raise ValueError("scenario block without mechanism")
        bw = block.get("bandwidth_bps", "unlimited")
        scenarios.append(
            SimScenario(
                mechanism=Mechanism(block["mechanism"]),
                latency_ms=float(block.get("latency_ms", 0)),
                bandwidth=None if bw == "unlimited" else float(bw),
                max_udp=int(block.get("max_udp", 1232)),
                profile=block.get("profile", "falcon"),
                header_overhead=int(block.get("header_overhead", UDP_OVERHEAD)),
            )
        )
    return scenarios


NETWORK_CONDITIONS = [
    (10.0, 128_000.0),
    (10.0, 50_000_000.0),
    (100.0, 50_000_000.0),
    (0.0, None),
]


