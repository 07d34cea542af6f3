import math
import random
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from arrf.fragmenter import ResponderCache, fragment_response, handle_fragment_query
from arrf.reassembler import Complete, Strategy, absorb_fragment_response, inspect_response
from arrf.wire import (
    QR,
    DnsHeader,
    DnsMessage,
    OptRecord,
    Question,
    ResourceRecord,
    name_from_text,
    parse_message,
    serialize_message,
)

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []

# never generated as ordinary records: OPT and the default RRFRAG code
RESERVED_TYPES = {41, 65280}


def random_name(rng: random.Random, max_labels: int = 3) -> tuple[bytes, ...]:
    n = rng.randint(0, max_labels)
    return tuple(
        bytes(rng.choice(b"abcdefghijklmnopqrstuvwxyz0123456789-") for _ in range(rng.randint(1, 12)))
        for _ in range(n)
    )


def random_type(rng: random.Random) -> int:
    while True:
        t = rng.choice([1, 2, 5, 6, 15, 16, 28, 43, 46, 47, 48, rng.randint(1, 65535)])
        if t not in RESERVED_TYPES:
            return t


def random_response(
    rng: random.Random,
    target_size: int | None = None,
    counts: tuple[int, int, int] | None = None,
    with_opt: bool | None = None,
    msg_id: int | None = None,
) -> DnsMessage:
    """Random well-formed response of roughly ``target_size`` bytes."""
    if counts is None:
        counts = tuple(rng.randint(0, 8) for _ in range(3))
    if with_opt is None:
        with_opt = rng.random() < 0.5
    n = sum(counts)
    qname = random_name(rng)
    question = Question(qname, random_type(rng), 1)
    owners = [random_name(rng) for _ in range(n)]
    fixed = 12 + question.encoded_size() + (11 if with_opt else 0)
    fixed += sum(sum(len(l) + 1 for l in o) + 1 + 10 for o in owners)
    rdata_total = max(0, (target_size or 0) - fixed)
    if n:
        cuts = sorted(rng.randint(0, rdata_total) for _ in range(n - 1))
        sizes = [b - a for a, b in zip([0] + cuts, cuts + [rdata_total])]
    else:
        sizes = []
    sizes = [min(s, 60000) for s in sizes]
    records = [
        ResourceRecord(o, random_type(rng), rng.choice([1, 1, 1, 3, 255]), rng.randrange(2**32), rng.randbytes(s))
        for o, s in zip(owners, sizes)
    ]
    sections = []
    i = 0
    for c in counts:
        sections.append(records[i : i + c])
        i += c
    if with_opt:
        sections[2].insert(rng.randint(0, len(sections[2])), OptRecord(rng.choice([512, 1232, 4096, 65535]), rng.randrange(2**32), rng.randbytes(rng.choice([0, 0, 4, 12]))))
    flags = (QR | rng.randrange(0x8000)) & ~0x0200 & ~0x000F | rng.choice([0, 0, 0, 3])
    header = DnsHeader(rng.randrange(0x10000) if msg_id is None else msg_id, flags)
    return DnsMessage(header, (question,), *sections)


def min_map_size(msg: DnsMessage) -> int:
    """Smallest possible first response: every record longer than 13 bytes as an empty RRFRAG."""
    size = 12 + sum(q.encoded_size() for q in msg.questions)
    for e in msg.entries():
        n = e.encoded_size()
        size += n if isinstance(e, OptRecord) else min(n, 13)
    return size


def corpus(seed: int, count: int, min_size: int = 100, max_size: int = 60000, fit: int = 256) -> list[DnsMessage]:
    """Log-uniform sizes; draws whose smallest map cannot fit ``fit`` bytes are redrawn."""
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        target = int(math.exp(rng.uniform(math.log(min_size), math.log(max_size))))
        counts = tuple(rng.randint(0, 8) for _ in range(3))
        if sum(counts) == 0:
            continue
        msg = random_response(rng, target, counts)
        if min_map_size(msg) > fit or len(serialize_message(msg)) > 65535:
            continue
        out.append(msg)
    return out


def run_protocol(msg: DnsMessage, max_size: int, strategy: Strategy, cache: ResponderCache | None = None, seed: int = 0):
    """Fragment, serve and reassemble over real bytes.

    Returns (reassembled message, number of fragment queries, number of
    batches, list of (query bytes, response bytes)).
    """
    cache = cache if cache is not None else ResponderCache()
    first, _ = fragment_response(msg, max_size, cache)
    first_wire = serialize_message(first)
    assert len(first_wire) <= max_size or first is msg
    outcome = inspect_response(parse_message(first_wire), max_size, strategy, rng=random.Random(seed))
    queries = batches = 0
    exchanges = []
    while not isinstance(outcome, Complete):
        state = outcome.state
        batch = list(outcome.batch.queries)
        assert batch, "pending state with nothing in flight"
        batches += 1
        for q in batch:
            queries += 1
            q_wire = serialize_message(q)
            resp = handle_fragment_query(parse_message(q_wire), max_size, cache)
            r_wire = serialize_message(resp)
            assert len(r_wire) <= max_size
            exchanges.append((q_wire, r_wire))
            outcome = absorb_fragment_response(state, parse_message(r_wire))
            if isinstance(outcome, Complete):
                break
            if outcome.batch.queries:
                # sequential strategy: follow-up already issued
                break
    return outcome.message, queries, batches, exchanges


FRAG_QUERY_BASE = 12 + 5 + 11  # header, root question, OPT: same in the fragment answer


def exchange_oracle(msg: DnsMessage, max_size: int, rrid_of, headroom: int = 64) -> int:
    """Sequential exchanges (map plus fragment queries) derived from record sizes alone.

    Replays the packing rules on integers: convert largest records to
    13-byte placeholders until the map fits, hand out the slack as first
    chunks, then fill fragment queries byte by byte in ascending-RRID order.
    ``rrid_of(section, index)`` gives the RRID the map used for that slot.
    """
    qsize = sum(sum(len(l) + 1 for l in q.qname) + 1 + 4 for q in msg.questions)
    slots = []
    total = 12 + qsize
    for s, section in enumerate(msg.sections):
        for i, e in enumerate(section):
            n = len(e.to_bytes())
            total += n
            if not isinstance(e, OptRecord):
                slots.append((s, i, n))
    if total <= max_size:
        return 1
    chosen = []
    for s, i, n in sorted(slots, key=lambda x: (-x[2], x[0], x[1])):
        if total <= max_size:
            break
        total += 13 - n
        chosen.append((s, i, n))
    slack = max_size - total
    left = {}
    for s, i, n in sorted(chosen, key=lambda x: (x[0], -x[2], x[1])):
        c = min(slack, n)
        slack -= c
        if n - c:
            left[rrid_of(s, i)] = n - c
    pending = [left[k] for k in sorted(left)]
    capacity = max_size - headroom - FRAG_QUERY_BASE
    queries = 0
    while pending:
        queries += 1
        room = capacity
        while pending and room > 13:
            take = min(pending[0], room - 13)
            room -= 13 + take
            pending[0] -= take
            if pending[0] == 0:
                pending.pop(0)
    return 1 + queries


def map_rrids(first: DnsMessage):
    from arrf.rrfrag import RrFrag

    ids = {(s, i): e.rrid for s, sec in enumerate(first.sections) for i, e in enumerate(sec) if isinstance(e, RrFrag)}
    return lambda s, i: ids[(s, i)]


def rr(name: str, rtype: int, size: int, seed: int = 0) -> ResourceRecord:
    return ResourceRecord(name_from_text(name), rtype, 1, 3600, bytes((seed + i) & 0xFF for i in range(size)))


def response(answers=(), authority=(), additional=(), qname="q.test.", msg_id=1) -> DnsMessage:
    return DnsMessage(DnsHeader(msg_id, QR), (Question(name_from_text(qname), 1),), answers, authority, additional)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def cache():
    return ResponderCache()
