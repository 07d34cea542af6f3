"""Responder side: turn an oversized response into a map plus on-demand fragments."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

from .rrfrag import FIXED_SIZE, RrFrag, assign_rrid
from .wire import FORMERR, DnsMessage, ResourceRecord, encoded_size, error_response

MIN_MAX_SIZE = 128
DEFAULT_CACHE_CAPACITY = 4096


class CannotFit(ValueError):
    """Even with every fragmentable record reduced to an empty RRFRAG the map is too big."""


def canonicalize_rr(rr: ResourceRecord) -> bytes:
    """The byte array CURIDX and RRSIZE refer to."""
    return rr.to_bytes()


class ResponderCache:
    """Bounded LRU map rrid -> canonical RR bytes, safe to share between threads."""

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[int, bytes] = OrderedDict()
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, rrid: int) -> bool:
        return rrid in self._entries

    def get(self, rrid: int) -> bytes | None:
        with self.lock:
            data = self._entries.get(rrid)
            if data is not None:
                self._entries.move_to_end(rrid)
            return data

    def peek(self, rrid: int) -> bytes | None:
        return self._entries.get(rrid)

    def put(self, rrid: int, data: bytes) -> None:
        with self.lock:
            self._entries[rrid] = data
            self._entries.move_to_end(rrid)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def items(self) -> list[tuple[int, bytes]]:
        with self.lock:
            return list(self._entries.items())


class _Occupied:
    """RRIDs unavailable to ``data``: taken earlier in this message, or cached for other bytes."""

    def __init__(self, cache: ResponderCache, taken: set[int], data: bytes):
        self.cache = cache
        self.taken = taken
        self.data = data

    def __contains__(self, rrid: int) -> bool:
        if rrid in self.taken:
            return True
        cached = self.cache.peek(rrid)
        return cached is not None and cached != self.data


@dataclass
class _Slot:
    section: int
    index: int
    rr: ResourceRecord
    data: bytes
    rrid: int | None = None
    chunk: int = 0


def _plan(msg: DnsMessage, max_size: int) -> list[_Slot]:
    """Pick the records to fragment and the first-chunk length of each."""
    slots = [
        _Slot(s, i, entry, canonicalize_rr(entry))
        for s, section in enumerate(msg.sections)
        for i, entry in enumerate(section)
        if isinstance(entry, ResourceRecord)
    ]
    size = encoded_size(msg)
    # largest first; ties by section then position
    candidates = sorted(slots, key=lambda sl: (-len(sl.data), sl.section, sl.index))
    chosen = []
    for slot in candidates:
        if size <= max_size:
            break
        if len(slot.data) <= FIXED_SIZE:
            break
        size += FIXED_SIZE - len(slot.data)
        chosen.append(slot)
    if size > max_size:
        raise CannotFit(f"map needs {size} bytes, limit is {max_size}")
    budget = max_size - size
    for slot in sorted(chosen, key=lambda sl: (sl.section, -len(sl.data), sl.index)):
        slot.chunk = min(budget, len(slot.data))
        budget -= slot.chunk
    return chosen


def fragment_response(
    msg: DnsMessage, max_size: int, cache: ResponderCache
) -> tuple[DnsMessage, ResponderCache]:
    """First response to send for ``msg`` under a ``max_size`` limit.

    Returns ``msg`` itself when it already fits.  Otherwise records are
    replaced in place by RRFRAGs, the TC bit is set, and every fragmented
    record is stored in ``cache`` so later fragment queries can be served.
    """
    if max_size < MIN_MAX_SIZE:
        raise ValueError(f"max_size must be at least {MIN_MAX_SIZE}")
    if not msg.is_response:
        raise ValueError("only responses are fragmented")
    if encoded_size(msg) <= max_size:
        return msg, cache
    chosen = _plan(msg, max_size)
    taken: set[int] = set()
    with cache.lock:
        for slot in chosen:
            slot.rrid = assign_rrid(slot.data, _Occupied(cache, taken, slot.data))
            taken.add(slot.rrid)
            cache.put(slot.rrid, slot.data)
    sections = [list(sec) for sec in msg.sections]
    for slot in chosen:
        sections[slot.section][slot.index] = RrFrag.response(
            slot.rrid, 0, len(slot.data), slot.data[: slot.chunk]
        )
    first = DnsMessage(msg.header.with_flags(tc=True), msg.questions, *sections)
    return first, cache


def _response_skeleton(q: DnsMessage) -> DnsMessage:
    additional = (q.opt,) if q.opt is not None else ()
    return DnsMessage(q.header.with_flags(qr=True, tc=False), q.questions, additional=additional)


def handle_fragment_query(q: DnsMessage, max_size: int, cache: ResponderCache) -> DnsMessage:
    """Answer a query carrying RRFRAG descriptors from the cache.

    Each descriptor yields one RRFRAG in the answer section.  Requests are
    cut down, never dropped, to keep the response within ``max_size``.  Like
    every response carrying RRFRAGs it has TC set.  Unknown RRIDs, a
    mismatched RRSIZE or a CURIDX past the end get FORMERR.
    """
    descriptors = [e for e in q.additional if isinstance(e, RrFrag)]
    if q.is_response or not descriptors:
        return error_response(q, FORMERR)
    resolved = []
    for d in descriptors:
        data = cache.get(d.rrid)
        if data is None or d.rrsize != len(data) or d.curidx >= len(data):
            return error_response(q, FORMERR)
        resolved.append((d, data))
    skeleton = _response_skeleton(q)
    budget = max_size - encoded_size(skeleton) - FIXED_SIZE * len(resolved)
    if budget < 0:
        return error_response(q, FORMERR)
    answers = []
    for d, data in resolved:
        n = min(d.wanted, len(data) - d.curidx, budget)
        budget -= n
        answers.append(RrFrag.response(d.rrid, d.curidx, len(data), data[d.curidx : d.curidx + n]))
    header = skeleton.header.with_flags(tc=True)
    return DnsMessage(header, skeleton.questions, tuple(answers), (), skeleton.additional)


def is_fragment_query(q: DnsMessage) -> bool:
    return not q.is_response and any(isinstance(e, RrFrag) for e in q.additional)

