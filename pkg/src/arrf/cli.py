"""Command line entry point: ``arrf {daemon,bench,decode,fragment}``.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import daemon as daemon_mod
from .fragmenter import CannotFit, ResponderCache, fragment_response, handle_fragment_query
from .reassembler import DEFAULT_BUDGET, DEFAULT_HEADROOM, Complete, Strategy, absorb_fragment_response, inspect_response
from .rrfrag import DEFAULT_RRFRAG_TYPE, FIXED_SIZE, MalformedRrFrag, RrFrag, decode_rrfrag
from .simnet import parse_scenario_file, run_suite
from .wire import MalformedMessage, OptRecord, name_to_text, parse_message, serialize_message


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_daemon_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--listen", required=True, help="host:port to receive DNS datagrams on")
    p.add_argument("--upstream", required=True, help="host:port of the name server or responder daemon")
    p.add_argument("--role", required=True, choices=[r.value for r in daemon_mod.Role])
    p.add_argument("--strategy", default="parallel", choices=[s.value for s in Strategy])
    p.add_argument("--max-udp", type=int, default=daemon_mod.DEFAULT_CLIENT_MAX_UDP, help="largest DNS message sent across the ARRF path (default %(default)s)")
    p.add_argument("--advertise", type=int, default=daemon_mod.DEFAULT_ADVERTISE, help="EDNS size advertised to the name server (default %(default)s)")
    p.add_argument("--rrfrag-type", type=int, default=DEFAULT_RRFRAG_TYPE, help="RR type code used for RRFRAGs (default %(default)s)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="reassembly byte cap per transaction (default %(default)s)")
    p.add_argument("--cache", type=int, default=4096, help="responder cache capacity in records (default %(default)s)")
    p.add_argument("--timeout-ms", type=int, default=daemon_mod.DEFAULT_TIMEOUT_MS, help="per-query retry timeout (default %(default)s)")
    p.add_argument("--headroom", type=int, default=DEFAULT_HEADROOM, help="bytes left unrequested in each fragment answer (default %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arrf", description="Request-based DNS fragmentation: proxy daemons, simulator and codec tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _add_daemon_args(sub.add_parser("daemon", help="run a responder- or requester-side proxy"))

    bench = sub.add_parser("bench", help="run simulator scenarios and write CSV")
    bench.add_argument("--scenario-file", required=True, type=Path)
    bench.add_argument("--out", required=True, type=Path)

    dec = sub.add_parser("decode", help="decode an RRFRAG or DNS message given as hex")
    dec.add_argument("hex", nargs="?", help="hex bytes; read from stdin when omitted")
    dec.add_argument("--rrfrag-type", type=int, default=DEFAULT_RRFRAG_TYPE)

    frag = sub.add_parser("fragment", help="fragment a raw DNS response file and dump every message")
    frag.add_argument("file", type=Path)
    frag.add_argument("--max-udp", type=int, default=1232)
    frag.add_argument("--rrfrag-type", type=int, default=DEFAULT_RRFRAG_TYPE)

    # top-level help also lists the flags of every subcommand
    parts = []
    for name, sp in sub.choices.items():
        parts.append(f"{name}:\n" + sp.format_help())
    parser.epilog = "\n".join(parts)
    parser.formatter_class = argparse.RawDescriptionHelpFormatter
    return parser


def bench_main(argv=None) -> int:
    """``arrf-bench --scenario-file PATH --out PATH.csv``"""
    return main(["bench", *(sys.argv[1:] if argv is None else argv)])


def _describe_frag(f: RrFrag) -> str:
    return f"rrid={f.rrid} curidx={f.curidx} fragsize={f.fragsize} rrsize={f.rrsize} fragdata={len(f.fragdata)} bytes"


def _describe_message(data: bytes, rrfrag_type: int) -> list[str]:
    msg = parse_message(data, rrfrag_type)
    h = msg.header
    lines = [
        f"id={h.id} qr={int(h.qr)} tc={int(h.tc)} rcode={h.rcode} "
        f"qd={msg.qdcount} an={msg.ancount} ns={msg.nscount} ar={msg.arcount} size={len(data)}"
    ]
    for q in msg.questions:
        lines.append(f"  question {name_to_text(q.qname)} type={q.qtype} class={q.qclass}")
    for label, section in zip(("answer", "authority", "additional"), msg.sections):
        for e in section:
            if isinstance(e, RrFrag):
                lines.append(f"  {label} RRFRAG {_describe_frag(e)}")
            elif isinstance(e, OptRecord):
                lines.append(f"  {label} OPT udp_payload_size={e.udp_payload_size}")
            else:
                lines.append(f"  {label} {name_to_text(e.name)} type={e.rrtype} ttl={e.ttl} rdlength={len(e.rdata)}")
    return lines


def _decode(args) -> int:
    text = args.hex if args.hex is not None else sys.stdin.read()
    try:
        data = bytes.fromhex("".join(text.split()))
    except ValueError as exc:
        raise UsageError(f"not hex: {exc}") from exc
    if len(data) >= FIXED_SIZE and data[0] == 0 and int.from_bytes(data[1:3], "big") == args.rrfrag_type:
        try:
            frag = decode_rrfrag(data, args.rrfrag_type)
            context = "response"
        except MalformedRrFrag:
            frag = decode_rrfrag(data, args.rrfrag_type, query=True)
            context = "query"
        print(f"RRFRAG ({context}) rrid={frag.rrid}")
        print(f"  curidx={frag.curidx}")
        print(f"  fragsize={frag.fragsize}")
        print(f"  rrsize={frag.rrsize}")
        print(f"  fragdata={frag.fragdata.hex() or '(empty)'}")
        return 0
    print("\n".join(_describe_message(data, args.rrfrag_type)))
    return 0


def _fragment(args) -> int:
    raw = args.file.read_bytes()
    msg = parse_message(raw, args.rrfrag_type)
    cache = ResponderCache()
    first, _ = fragment_response(msg, args.max_udp, cache)
    first_wire = serialize_message(first, args.rrfrag_type)
    print(f"# original {len(raw)} bytes, max_udp {args.max_udp}")
    print("# map")
    print("\n".join(_describe_message(first_wire, args.rrfrag_type)))
    outcome = inspect_response(parse_message(first_wire, args.rrfrag_type), args.max_udp, Strategy.PARALLEL, rrfrag_type=args.rrfrag_type)
    n = 0
    while not isinstance(outcome, Complete):
        state = outcome.state
        for q in outcome.batch.queries:
            n += 1
            qwire = serialize_message(q, args.rrfrag_type)
            resp = serialize_message(handle_fragment_query(parse_message(qwire, args.rrfrag_type), args.max_udp, cache), args.rrfrag_type)
            print(f"# fragment query {n} ({len(qwire)} bytes)")
            print("\n".join(_describe_message(qwire, args.rrfrag_type)))
            print(f"# fragment response {n}")
            print("\n".join(_describe_message(resp, args.rrfrag_type)))
            outcome = absorb_fragment_response(state, parse_message(resp, args.rrfrag_type))
    same = serialize_message(outcome.message, args.rrfrag_type) == serialize_message(msg, args.rrfrag_type)
    print(f"# reassembled after {n} fragment queries; identical to original: {same}")
    return 0


def _daemon(args) -> int:
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    cfg = daemon_mod.DaemonConfig(
        listen=daemon_mod.parse_address(args.listen),
        upstream=daemon_mod.parse_address(args.upstream),
        role=daemon_mod.Role(args.role),
        max_udp_advertise_upstream=args.advertise,
        client_max_udp=args.max_udp,
        strategy=Strategy(args.strategy),
        rrfrag_type=args.rrfrag_type,
        budget=args.budget,
        cache_capacity=args.cache,
        timeout_ms=args.timeout_ms,
        headroom=args.headroom,
    )
    if cfg.role is daemon_mod.Role.RESPONDER:
        daemon_mod.run_responder_daemon(cfg)
    else:
        daemon_mod.run_requester_daemon(cfg)
    return 0


def _bench(args) -> int:
    scenarios = parse_scenario_file(args.scenario_file.read_text())
    args.out.write_text(run_suite(scenarios))
    print(f"wrote {len(scenarios)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"daemon": _daemon, "bench": _bench, "decode": _decode, "fragment": _fragment}[args.command]
        return handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code or 0
    except (OSError, ValueError, MalformedMessage, MalformedRrFrag, CannotFit) as exc:
        print(f"arrf: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
