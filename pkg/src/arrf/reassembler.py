"""Requester side: read a map response, ask for missing fragments, rebuild the message."""

from __future__ import annotations

import enum
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Union

from .rrfrag import DEFAULT_RRFRAG_TYPE, FIXED_SIZE, RrFrag
from .wire import (
    CLASS_IN,
    FORMERR,
    ROOT,
    DnsHeader,
    DnsMessage,
    OptRecord,
    Question,
    encoded_size,
    parse_rr,
)

DEFAULT_BUDGET = 131072
DEFAULT_HEADROOM = 64
DEFAULT_TIMEOUT = 0.8
DEFAULT_RETRIES = 2


class Strategy(enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


class ReassemblyError(Exception):
    pass


class BudgetExceeded(ReassemblyError):
    pass


class FormErrReceived(ReassemblyError):
    pass


class OverlapMismatch(ReassemblyError):
    pass


class ReassemblyTimeout(ReassemblyError):
    pass


class UnexpectedResponse(ReassemblyError):
    """A response that answers no outstanding query of this transaction."""


@dataclass
class FragmentBuffer:
    rrsize: int
    data: bytearray = field(init=False)
    filled: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.data = bytearray(self.rrsize)

    @property
    def complete(self) -> bool:
        return self.filled == [(0, self.rrsize)] or self.rrsize == 0

    def overlaps_mismatch(self, start: int, chunk: bytes) -> bool:
        end = start + len(chunk)
        for a, b in self.filled:
            lo, hi = max(a, start), min(b, end)
            if lo < hi and self.data[lo:hi] != chunk[lo - start : hi - start]:
                return True
        return False

    def fill(self, start: int, chunk: bytes) -> None:
        end = start + len(chunk)
        if not chunk:
            return
        self.data[start:end] = chunk
        ranges = sorted(self.filled + [(start, end)])
        merged = [ranges[0]]
        for a, b in ranges[1:]:
            if a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], b))
            else:
                merged.append((a, b))
        self.filled = merged

    def gaps(self) -> list[tuple[int, int]]:
        out, pos = [], 0
        for a, b in self.filled:
            if a > pos:
                out.append((pos, a))
            pos = b
        if pos < self.rrsize:
            out.append((pos, self.rrsize))
        return out


@dataclass
class Outstanding:
    query: DnsMessage
    ranges: list[tuple[int, int, int]]  # (rrid, start, end)
    sent_at: float
    tries: int = 1


@dataclass
class ReassemblyState:
    txn_key: tuple
    skeleton: DnsMessage
    buffers: dict[int, FragmentBuffer]
    strategy: Strategy
    max_size: int
    budget: int
    created_at: float
    headroom: int = DEFAULT_HEADROOM
    rrfrag_type: int = DEFAULT_RRFRAG_TYPE
    outstanding: dict[int, Outstanding] = field(default_factory=dict)
    answered: set[int] = field(default_factory=set)
    queries_sent: int = 0
    rng: random.Random = field(default_factory=random.Random, repr=False)
    clock: Callable[[], float] = field(default=time.monotonic, repr=False)

    @property
    def complete(self) -> bool:
        return all(buf.complete for buf in self.buffers.values())


@dataclass
class FragmentRequestBatch:
    queries: list[DnsMessage]


@dataclass
class Complete:
    message: DnsMessage


@dataclass
class Pending:
    state: ReassemblyState
    batch: FragmentRequestBatch


Outcome = Union[Complete, Pending]


def _query_overhead(opt: OptRecord | None) -> int:
    """Bytes of a fragment query (and of its answer) besides the descriptors and data."""
    q = DnsMessage(questions=(Question(ROOT, DEFAULT_RRFRAG_TYPE, CLASS_IN),), additional=(opt,) if opt else ())
    return encoded_size(q)


def _wanted_ranges(state: ReassemblyState) -> list[tuple[int, int, int]]:
    """Missing byte ranges not already covered by an outstanding query, by ascending rrid."""
    out = []
    for rrid in sorted(state.buffers):
        asked = sorted((s, e) for o in state.outstanding.values() for r, s, e in o.ranges if r == rrid)
        for a, b in state.buffers[rrid].gaps():
            pos = a
            for s, e in asked:
                if e <= pos or s >= b:
                    continue
                if s > pos:
                    out.append((rrid, pos, s))
                pos = max(pos, e)
            if pos < b:
                out.append((rrid, pos, b))
    return out


def _next_id(state: ReassemblyState) -> int:
    while True:
        qid = state.rng.randrange(0x10000)
        if qid not in state.outstanding and qid not in state.answered:
            return qid


def _build_queries(state: ReassemblyState, limit: int | None) -> list[DnsMessage]:
    """Pack missing ranges into fragment queries; at most ``limit`` queries."""
    opt = OptRecord(state.max_size, 0x8000)
    base = _query_overhead(opt)
    capacity = state.max_size - state.headroom - base
    wanted = _wanted_ranges(state)
    queries = []
    i = 0
    while i < len(wanted) and (limit is None or len(queries) < limit):
        budget = capacity
        descriptors = []
        ranges = []
        while i < len(wanted) and budget > FIXED_SIZE:
            rrid, a, b = wanted[i]
            n = min(b - a, budget - FIXED_SIZE)
            budget -= FIXED_SIZE + n
            descriptors.append(RrFrag.request(rrid, a, state.buffers[rrid].rrsize, n))
            ranges.append((rrid, a, a + n))
            if a + n < b:
                wanted[i] = (rrid, a + n, b)
            else:
                i += 1
        if not descriptors:
            raise ReassemblyError(f"max_size {state.max_size} leaves no room for a fragment request")
        qid = _next_id(state)
        query = DnsMessage(
            DnsHeader(qid, 0),
            (Question(ROOT, state.rrfrag_type, CLASS_IN),),
            additional=tuple(descriptors) + (opt,),
        )
        state.outstanding[qid] = Outstanding(query, ranges, state.clock())
        state.queries_sent += 1
        queries.append(query)
    return queries


def _next_batch(state: ReassemblyState) -> FragmentRequestBatch:
    if state.strategy is Strategy.SEQUENTIAL:
        if state.outstanding:
            return FragmentRequestBatch([])
        return FragmentRequestBatch(_build_queries(state, 1))
    return FragmentRequestBatch(_build_queries(state, None))


def _assemble(state: ReassemblyState) -> DnsMessage:
    sections = []
    for section in state.skeleton.sections:
        out = []
        for entry in section:
            if isinstance(entry, RrFrag):
                entry = parse_rr(bytes(state.buffers[entry.rrid].data))
            out.append(entry)
        sections.append(out)
    header = state.skeleton.header.with_flags(tc=False)
    return DnsMessage(header, state.skeleton.questions, *sections)


def inspect_response(
    resp: DnsMessage,
    max_size: int,
    strategy: Strategy = Strategy.PARALLEL,
    *,
    budget: int = DEFAULT_BUDGET,
    headroom: int = DEFAULT_HEADROOM,
    rrfrag_type: int = DEFAULT_RRFRAG_TYPE,
    txn_key: tuple | None = None,
    rng: random.Random | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> Outcome:
    """Start reassembly for ``resp`` if it is a map, else hand it straight back."""
    frags = resp.rrfrags()
    if not frags:
        return Complete(resp)
    sizes: dict[int, int] = {}
    for f in frags:
        if sizes.setdefault(f.rrid, f.rrsize) != f.rrsize:
            raise ReassemblyError(f"rrid {f.rrid} advertised with two different sizes")
    total = sum(sizes.values())
    if total > budget:
        raise BudgetExceeded(f"map advertises {total} bytes, budget is {budget}")
    state = ReassemblyState(
        txn_key=txn_key if txn_key is not None else (resp.id, resp.questions),
        skeleton=resp,
        buffers={rrid: FragmentBuffer(size) for rrid, size in sizes.items()},
        strategy=strategy,
        max_size=max_size,
        budget=budget,
        created_at=clock(),
        headroom=headroom,
        rrfrag_type=rrfrag_type,
        rng=rng if rng is not None else random.Random(),
        clock=clock,
    )
    for f in frags:
        buf = state.buffers[f.rrid]
        if buf.overlaps_mismatch(f.curidx, f.fragdata):
            raise OverlapMismatch(f"map carries conflicting bytes for rrid {f.rrid}")
        buf.fill(f.curidx, f.fragdata)
    if state.complete:
        return Complete(_assemble(state))
    return Pending(state, _next_batch(state))


def absorb_fragment_response(state: ReassemblyState, resp: DnsMessage) -> Outcome:
    """Fold a fragment response into ``state``.

    A repeated answer to an already answered query changes nothing and
    yields an empty batch, provided its bytes agree with what is held.
    Raises UnexpectedResponse for ids that answer nothing outstanding (the
    caller drops those), FormErrReceived when the responder gave up, and
    OverlapMismatch when bytes contradict what is already held; in the last
    case the state is left as it was.
    """
    pending = state.outstanding.get(resp.id)
    if pending is None and resp.id in state.answered and resp.is_response and resp.header.rcode != FORMERR:
        for f in resp.answers:
            buf = state.buffers.get(f.rrid) if isinstance(f, RrFrag) else None
            if buf is None or f.rrsize != buf.rrsize or buf.overlaps_mismatch(f.curidx, f.fragdata):
                raise UnexpectedResponse(f"stray or inconsistent repeat of query {resp.id}")
        return Pending(state, FragmentRequestBatch([]))
    if pending is None or not resp.is_response or resp.questions != pending.query.questions:
        raise UnexpectedResponse(f"no outstanding query with id {resp.id}")
    if resp.header.rcode == FORMERR:
        state.outstanding.clear()
        raise FormErrReceived("responder answered FORMERR")
    frags = [e for e in resp.answers if isinstance(e, RrFrag)]
    for f in frags:
        buf = state.buffers.get(f.rrid)
        if buf is None or f.rrsize != buf.rrsize:
            raise OverlapMismatch(f"fragment for unknown or resized rrid {f.rrid}")
        if buf.overlaps_mismatch(f.curidx, f.fragdata):
            raise OverlapMismatch(f"fragment bytes for rrid {f.rrid} disagree with earlier data")
    if not any(f.fragdata for f in frags):
        state.outstanding.clear()
        raise ReassemblyError("fragment response carried no data")
    del state.outstanding[resp.id]
    state.answered.add(resp.id)
    for f in frags:
        state.buffers[f.rrid].fill(f.curidx, f.fragdata)
    if state.complete:
        state.outstanding.clear()
        return Complete(_assemble(state))
    return Pending(state, _next_batch(state))


def expired(state: ReassemblyState, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES) -> list[DnsMessage]:
    """Queries to send again because their answer is overdue.

    Raises ReassemblyTimeout once any query has been tried ``1 + retries`` times.
    """
    now = state.clock()
    resend = []
    for o in state.outstanding.values():
        if now - o.sent_at < timeout:
            continue
        if o.tries > retries:
            raise ReassemblyTimeout(f"query {o.query.id} unanswered after {o.tries} tries")
        o.tries += 1
        o.sent_at = now
        resend.append(o.query)
    return resend


def never_cache_rrfrags(msg: DnsMessage) -> DnsMessage:
    """Guard in front of any cache: only complete, RRFRAG-free messages pass."""
    if msg.rrfrags():
        raise AssertionError("a message holding RRFRAGs must never be cached")
    return msg


class GuardedCache:
    """Minimal answer cache that only ever stores reassembled messages."""

    def __init__(self):
        self.store: dict[tuple, DnsMessage] = {}

    def put(self, msg: DnsMessage) -> None:
        never_cache_rrfrags(msg)
        self.store[msg.questions] = msg

    def get(self, questions) -> DnsMessage | None:
        return self.store.get(tuple(questions))
