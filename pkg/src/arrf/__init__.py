"""Request-based application-layer fragmentation for DNS (ARRF)."""

from .fragmenter import CannotFit, ResponderCache, canonicalize_rr, fragment_response, handle_fragment_query
from .reassembler import (
    BudgetExceeded,
    Complete,
    FormErrReceived,
    OverlapMismatch,
    Pending,
    ReassemblyError,
    Strategy,
    absorb_fragment_response,
    inspect_response,
    never_cache_rrfrags,
)
from .rrfrag import DEFAULT_RRFRAG_TYPE, MalformedRrFrag, RrFrag, assign_rrid, decode_rrfrag, encode_rrfrag
from .wire import (
    DnsHeader,
    DnsMessage,
    MalformedMessage,
    OptRecord,
    OversizeMessage,
    Question,
    ResourceRecord,
    encoded_size,
    parse_message,
    serialize_message,
)

__version__ = "0.1.0"
