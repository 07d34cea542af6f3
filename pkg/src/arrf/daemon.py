"""Transparent UDP proxies that add ARRF in front of unmodified DNS software.

The responder-side daemon sits in front of a name server: it raises the
advertised EDNS size on the way in so the server answers in full, then
serves that answer to the client as a map plus cached fragments.  The
requester-side daemon sits in front of a resolver: it forwards queries,
runs the reassembler against the upstream when a map comes back and hands
the resolver only the rebuilt message.
"""

from __future__ import annotations

import enum
import logging
import random
import select
import signal
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .fragmenter import CannotFit, ResponderCache, fragment_response, handle_fragment_query, is_fragment_query
from .reassembler import (
    DEFAULT_BUDGET,
    DEFAULT_HEADROOM,
    Complete,
    OverlapMismatch,
    ReassemblyError,
    Strategy,
    UnexpectedResponse,
    absorb_fragment_response,
    expired,
    inspect_response,
    never_cache_rrfrags,
)
from .rrfrag import DEFAULT_RRFRAG_TYPE
from .wire import (
    FORMERR,
    SERVFAIL,
    TC,
    DnsHeader,
    DnsMessage,
    MalformedMessage,
    OptRecord,
    error_response,
    parse_message,
    serialize_message,
)

log = logging.getLogger("arrf.daemon")

DEFAULT_ADVERTISE = 65355
DEFAULT_CLIENT_MAX_UDP = 1232
DEFAULT_TIMEOUT_MS = 800
RECV_SIZE = 65535


class Role(enum.Enum):
    RESPONDER = "responder"
    REQUESTER = "requester"


Address = tuple[str, int]


def parse_address(text: str) -> Address:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ValueError(f"expected host:port, got {text!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


@dataclass(frozen=True)
class DaemonConfig:
    listen: Address
    upstream: Address
    role: Role
    max_udp_advertise_upstream: int = DEFAULT_ADVERTISE
    client_max_udp: int = DEFAULT_CLIENT_MAX_UDP
    strategy: Strategy = Strategy.PARALLEL
    rrfrag_type: int = DEFAULT_RRFRAG_TYPE
    budget: int = DEFAULT_BUDGET
    cache_capacity: int = 4096
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    retries: int = 2
    headroom: int = DEFAULT_HEADROOM
    workers: int = 128

    def __post_init__(self):
        if self.listen == self.upstream:
            raise ValueError("listen and upstream addresses must differ")
        if not 128 <= self.client_max_udp <= self.max_udp_advertise_upstream <= 65535:
            raise ValueError("need 128 <= client_max_udp <= max_udp_advertise_upstream <= 65535")
        if not 0 <= self.rrfrag_type <= 0xFFFF:
            raise ValueError("rrfrag type must fit in 16 bits")

    @property
    def timeout(self) -> float:
        return self.timeout_ms / 1000.0


def _with_udp_size(msg: DnsMessage, size: int) -> tuple[DnsMessage, bool]:
    """Set the OPT payload size, adding an OPT if there is none; report whether one was added."""
    opt = msg.opt
    if opt is None:
        return replace(msg, additional=msg.additional + (OptRecord(size, 0),)), True
    additional = tuple(replace(e, udp_payload_size=size) if isinstance(e, OptRecord) else e for e in msg.additional)
    return replace(msg, additional=additional), False


def _strip_opt(msg: DnsMessage) -> DnsMessage:
    return replace(msg, additional=tuple(e for e in msg.additional if not isinstance(e, OptRecord)))


def _truncated_reply(query: DnsMessage) -> DnsMessage:
    """Header and question only, TC set: sends a legacy resolver to its TCP path."""
    header = DnsHeader(query.id, (query.header.flags | 0x8000 | TC) & ~0x000F)
    additional = (query.opt,) if query.opt is not None else ()
    return DnsMessage(header, query.questions, additional=additional)


class _UdpDaemon:
    def __init__(self, cfg: DaemonConfig):
        self.cfg = cfg
        self.sock = socket.socket(socket.AF_INET6 if ":" in cfg.listen[0] else socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(cfg.listen)
        self._stop = threading.Event()
        self._pool = ThreadPoolExecutor(max_workers=cfg.workers, thread_name_prefix=f"arrf-{cfg.role.value}")
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> Address:
        return self.sock.getsockname()[:2]

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                ready, _, _ = select.select([self.sock], [], [], 0.2)
                if not ready:
                    continue
                try:
                    data, addr = self.sock.recvfrom(RECV_SIZE)
                except OSError:
                    if self._stop.is_set():
                        break
                    raise
                self._pool.submit(self._safe_handle, data, addr)
        finally:
            self._pool.shutdown(wait=True)
            self.sock.close()

    def start(self) -> _UdpDaemon:
        self._thread = threading.Thread(target=self.serve_forever, name=f"arrf-{self.cfg.role.value}", daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def _safe_handle(self, data: bytes, addr) -> None:
        try:
            self.handle(data, addr)
        except Exception:
            log.exception("unhandled error for datagram from %s", addr)

    def reply(self, data: bytes, addr) -> None:
        self.sock.sendto(data, addr)

    def upstream_socket(self) -> socket.socket:
        family = socket.AF_INET6 if ":" in self.cfg.upstream[0] else socket.AF_INET
        s = socket.socket(family, socket.SOCK_DGRAM)
        s.connect(self.cfg.upstream)
        return s

    def handle(self, data: bytes, addr) -> None:
        raise NotImplementedError


def _log_txn(msg_id: int, client, bytes_in: int, bytes_out: int, round_trips: int, outcome: str, started: float) -> None:
    log.info(
        "txn id=%d client=%s:%d bytes_in=%d bytes_out=%d round_trips=%d outcome=%s ms=%.3f",
        msg_id,
        client[0],
        client[1],
        bytes_in,
        bytes_out,
        round_trips,
        outcome,
        (time.perf_counter() - started) * 1000.0,
    )


class ResponderDaemon(_UdpDaemon):
    """Fronts a name server; answers fragment queries from its cache."""

    def __init__(self, cfg: DaemonConfig):
        if cfg.role is not Role.RESPONDER:
            raise ValueError("ResponderDaemon needs role=responder")
        super().__init__(cfg)
        self.cache = ResponderCache(cfg.cache_capacity)

    def client_limit(self, query: DnsMessage) -> int:
        opt = query.opt
        advertised = 512 if opt is None else max(opt.udp_payload_size, 512)
        return min(advertised, self.cfg.client_max_udp)

    def handle(self, data: bytes, addr) -> None:
        started = time.perf_counter()
        try:
            query = parse_message(data, self.cfg.rrfrag_type)
        except MalformedMessage:
            if len(data) >= 12:
                hdr = DnsHeader(int.from_bytes(data[:2], "big"), 0x8000 | FORMERR)
                self.reply(serialize_message(DnsMessage(hdr)), addr)
            return
        if query.is_response:
            return
        limit = self.client_limit(query)
        if is_fragment_query(query):
            resp = serialize_message(handle_fragment_query(query, limit, self.cache), self.cfg.rrfrag_type)
            self.reply(resp, addr)
            _log_txn(query.id, addr, len(data), len(resp), 1, "fragment", started)
            return

        upstream_query, injected = _with_udp_size(query, self.cfg.max_udp_advertise_upstream)
        raw = self._ask_upstream(serialize_message(upstream_query, self.cfg.rrfrag_type), query.id)
        if raw is None:
            out = serialize_message(error_response(query, SERVFAIL))
            self.reply(out, addr)
            _log_txn(query.id, addr, len(data), len(out), 1, "upstream-timeout", started)
            return
        if len(raw) <= limit and not injected:
            self.reply(raw, addr)
            _log_txn(query.id, addr, len(data), len(raw), 1, "passthrough", started)
            return
        try:
            resp = parse_message(raw, self.cfg.rrfrag_type)
        except MalformedMessage:
            out = serialize_message(error_response(query, SERVFAIL))
            self.reply(out, addr)
            _log_txn(query.id, addr, len(data), len(out), 1, "upstream-malformed", started)
            return
        if injected:
            resp = _strip_opt(resp)
        try:
            first, _ = fragment_response(resp, limit, self.cache)
            outcome = "map" if first is not resp else "passthrough"
        except CannotFit:
            first, outcome = _truncated_reply(query), "cannot-fit"
            if injected:
                first = _strip_opt(first)
        out = serialize_message(first, self.cfg.rrfrag_type)
        self.reply(out, addr)
        _log_txn(query.id, addr, len(data), len(out), 1, outcome, started)

    def _ask_upstream(self, query: bytes, msg_id: int) -> bytes | None:
        with self.upstream_socket() as s:
            s.settimeout(self.cfg.timeout)
            s.send(query)
            deadline = time.monotonic() + self.cfg.timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                s.settimeout(remaining)
                try:
                    raw = s.recv(RECV_SIZE)
                except (socket.timeout, ConnectionRefusedError):
                    return None
                if len(raw) >= 2 and int.from_bytes(raw[:2], "big") == msg_id:
                    return raw


class RequesterDaemon(_UdpDaemon):
    """Fronts a resolver; rebuilds fragmented answers before the resolver sees them."""

    def __init__(self, cfg: DaemonConfig):
        if cfg.role is not Role.REQUESTER:
            raise ValueError("RequesterDaemon needs role=requester")
        super().__init__(cfg)
        self._active: set[tuple] = set()
        self._lock = threading.Lock()
        self._rng = random.SystemRandom()

    @property
    def active(self) -> int:
        with self._lock:
            return len(self._active)

    def handle(self, data: bytes, addr) -> None:
        try:
            query = parse_message(data, self.cfg.rrfrag_type)
        except MalformedMessage:
            return
        if query.is_response:
            return
        key = (addr, query.id, query.questions)
        with self._lock:
            if key in self._active:
                return
            self._active.add(key)
        try:
            self._transaction(query, data, addr, key)
        finally:
            with self._lock:
                self._active.discard(key)

    def _transaction(self, query: DnsMessage, data: bytes, addr, key) -> None:
        cfg = self.cfg
        started = time.perf_counter()
        upstream_query, injected = _with_udp_size(query, cfg.client_max_udp)
        wire = serialize_message(upstream_query, cfg.rrfrag_type)
        bytes_in, bytes_out = len(data), 0

        def finish(out: bytes, rounds: int, outcome: str) -> None:
            self.reply(out, addr)
            _log_txn(query.id, addr, bytes_in, bytes_out + len(out), rounds, outcome, started)

        with self.upstream_socket() as s:
            raw = None
            for _ in range(1 + cfg.retries):
                s.send(wire)
                bytes_out += len(wire)
                raw = self._recv_matching(s, query.id, cfg.timeout)
                if raw is not None:
                    break
            if raw is None:
                finish(serialize_message(error_response(query, SERVFAIL)), 1 + cfg.retries, "upstream-timeout")
                return
            bytes_in += len(raw)
            try:
                resp = parse_message(raw, cfg.rrfrag_type)
            except MalformedMessage:
                finish(raw, 1, "passthrough-unparsed")
                return
            if not resp.rrfrags():
                finish(raw if not injected else serialize_message(_strip_opt(resp), cfg.rrfrag_type), 1, "passthrough")
                return
            try:
                message, rounds, sent, received = self._reassemble(s, resp, key)
                bytes_out += sent
                bytes_in += received
                outcome = "reassembled"
            except ReassemblyError as exc:
                message, rounds, outcome = _truncated_reply(query), 1, f"fallback:{type(exc).__name__}"
        if injected:
            message = _strip_opt(message)
        finish(serialize_message(never_cache_rrfrags(message), cfg.rrfrag_type), 1 + rounds, outcome)

    def _recv_matching(self, s: socket.socket, msg_id: int, timeout: float) -> bytes | None:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            s.settimeout(remaining)
            try:
                raw = s.recv(RECV_SIZE)
            except (socket.timeout, ConnectionRefusedError):
                return None
            if len(raw) >= 2 and int.from_bytes(raw[:2], "big") == msg_id:
                return raw

    def _reassemble(self, s: socket.socket, first: DnsMessage, key) -> tuple[DnsMessage, int, int, int]:
        cfg = self.cfg
        outcome = inspect_response(
            first,
            cfg.client_max_udp,
            cfg.strategy,
            budget=cfg.budget,
            headroom=cfg.headroom,
            rrfrag_type=cfg.rrfrag_type,
            txn_key=key,
            rng=random.Random(self._rng.getrandbits(64)),
        )
        sent = received = 0
        depth = 1
        while not isinstance(outcome, Complete):
            state = outcome.state
            if outcome.batch.queries:
                depth += 1
            for q in outcome.batch.queries:
                wire = serialize_message(q, cfg.rrfrag_type)
                s.send(wire)
                sent += len(wire)
            outcome = None
            while outcome is None:
                for q in expired(state, cfg.timeout, cfg.retries):
                    wire = serialize_message(q, cfg.rrfrag_type)
                    s.send(wire)
                    sent += len(wire)
                s.settimeout(0.05)
                try:
                    raw = s.recv(RECV_SIZE)
                except socket.timeout:
                    continue
                except ConnectionRefusedError as exc:
                    raise ReassemblyError("upstream unreachable") from exc
                received += len(raw)
                try:
                    resp = parse_message(raw, cfg.rrfrag_type)
                    outcome = absorb_fragment_response(state, resp)
                except (MalformedMessage, UnexpectedResponse, OverlapMismatch):
                    continue
        return outcome.message, depth, sent, received


def make_daemon(cfg: DaemonConfig) -> _UdpDaemon:
    return ResponderDaemon(cfg) if cfg.role is Role.RESPONDER else RequesterDaemon(cfg)


def _serve_until_signal(daemon: _UdpDaemon) -> None:
    def stop(signum, frame):
        log.info("signal %d received, shutting down", signum)
        daemon._stop.set()

    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    log.info("%s daemon listening on %s:%d, upstream %s:%d", daemon.cfg.role.value, *daemon.address, *daemon.cfg.upstream)
    daemon.serve_forever()


def run_responder_daemon(cfg: DaemonConfig) -> None:
    _serve_until_signal(ResponderDaemon(cfg))


def run_requester_daemon(cfg: DaemonConfig) -> None:
    _serve_until_signal(RequesterDaemon(cfg))
