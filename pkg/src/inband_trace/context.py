"""Trace and span identifiers plus the in-band context record.

Byte layouts (big-endian, canonical for this package):

    TraceId (16 bytes)
        host_ip             4   IPv4 of the host where the request entered
        entry_timestamp_ms  6   low 48 bits of entry time, ms since epoch
        sequence            2   per-generator counter, wraps modulo 2**16
        debug_tag           1
        entry_pid_low       3   low 24 bits of the entry process id

    SpanId (8 bytes)
        client_ip_low       3   low 24 bits of the client IPv4
        server_ip_low       3   low 24 bits of the server IPv4
        span_order          2

Wire form of a context: 68 lowercase hex characters, no delimiters:
trace_id (32) + span_id (16) + parent_span_id (16, zeros for a root) +
span_order (4). The all-zero SpanId is reserved to mean "no parent".
"""

from __future__ import annotations

import ipaddress
import re
import threading
from functools import lru_cache
from typing import NamedTuple, Optional, Union

IPLike = Union[str, int, ipaddress.IPv4Address]

TRACE_ID_BYTES = 16
SPAN_ID_BYTES = 8
CONTEXT_HEX_LEN = 2 * (TRACE_ID_BYTES + 2 * SPAN_ID_BYTES) + 4  # 68

_MAX_TS_MS = (1 << 48) - 1
_MASK24 = (1 << 24) - 1
_TRACE_FMT = b"%08x%012x%04x%02x%06x"
_SPAN_FMT = b"%06x%06x%04x"
_CONTEXT_STR = re.compile(f"[0-9a-f]{{{CONTEXT_HEX_LEN}}}")
_CONTEXT_BYTES = re.compile(f"[0-9a-f]{{{CONTEXT_HEX_LEN}}}".encode("ascii"))


class ContextError(ValueError):
    """Raised for out-of-range ID fields or undecodable context strings."""


@lru_cache(maxsize=4096)
def ip_to_int(ip: IPLike) -> int:
    if isinstance(ip, int):
        if not 0 <= ip < (1 << 32):
            raise ContextError(f"IPv4 integer out of range: {ip}")
        return ip
    try:
        return int(ipaddress.IPv4Address(ip))
    except ipaddress.AddressValueError as exc:
        raise ContextError(str(exc)) from None


class TraceId(NamedTuple):
    host_ip: int
    entry_timestamp_ms: int
    sequence: int
    debug_tag: int
    entry_pid_low: int

    def hex(self) -> str:
        return _trace_hex(self).decode("ascii")

    def to_bytes(self) -> bytes:
        return bytes.fromhex(self.hex())

    @classmethod
    def from_int(cls, v: int) -> TraceId:
        return cls(
            v >> 96,
            (v >> 48) & _MAX_TS_MS,
            (v >> 32) & 0xFFFF,
            (v >> 24) & 0xFF,
            v & _MASK24,
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> TraceId:
        if len(raw) != TRACE_ID_BYTES:
            raise ContextError(f"trace id must be {TRACE_ID_BYTES} bytes, got {len(raw)}")
        return cls.from_int(int.from_bytes(raw, "big"))

    @property
    def host(self) -> ipaddress.IPv4Address:
        return ipaddress.IPv4Address(self.host_ip)


class SpanId(NamedTuple):
    client_ip_low: int
    server_ip_low: int
    span_order: int

    def hex(self) -> str:
        return _span_hex(self).decode("ascii")

    def to_bytes(self) -> bytes:
        return bytes.fromhex(self.hex())

    @classmethod
    def from_int(cls, v: int) -> SpanId:
        return cls(v >> 40, (v >> 16) & _MASK24, v & 0xFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes) -> SpanId:
        if len(raw) != SPAN_ID_BYTES:
            raise ContextError(f"span id must be {SPAN_ID_BYTES} bytes, got {len(raw)}")
        return cls.from_int(int.from_bytes(raw, "big"))

    @property
    def is_null(self) -> bool:
        return not (self.client_ip_low or self.server_ip_low or self.span_order)


NULL_SPAN_ID = SpanId(0, 0, 0)

# One trace id is encoded and decoded once per hop, so the hex forms are
# memoised. Keys are the ids themselves, or their exact lowercase hex.


@lru_cache(maxsize=1 << 14)
def _trace_hex(t: TraceId) -> bytes:
    out = _TRACE_FMT % t
    if len(out) != 2 * TRACE_ID_BYTES or b"-" in out:
        raise ContextError(f"trace id field out of range: {t!r}")
    return out


@lru_cache(maxsize=1 << 14)
def _span_hex(s: SpanId) -> bytes:
    out = _SPAN_FMT % s
    if len(out) != 2 * SPAN_ID_BYTES or b"-" in out:
        raise ContextError(f"span id field out of range: {s!r}")
    return out


@lru_cache(maxsize=1 << 14)
def _trace_from_hex(h: bytes) -> TraceId:
    return TraceId.from_int(int(h, 16))


@lru_cache(maxsize=1 << 14)
def _span_from_hex(h: bytes) -> Optional[SpanId]:
    v = int(h, 16)
    return SpanId.from_int(v) if v else None


class _ContextFields(NamedTuple):
    trace_id: TraceId
    span_id: SpanId
    parent_span_id: Optional[SpanId]
    span_order: int


class TraceContext(_ContextFields):
    """The propagated triple plus the span-order counter of ``span_id``.

    ``parent_span_id`` is None for the root context of a trace.
    """

    __slots__ = ()

    def __new__(
        cls,
        trace_id: TraceId,
        span_id: SpanId,
        parent_span_id: Optional[SpanId] = None,
        span_order: int = 0,
    ) -> TraceContext:
        if parent_span_id is not None and parent_span_id == span_id:
            raise ContextError("span_id must differ from parent_span_id")
        if not 0 <= span_order <= 0xFFFF:
            raise ContextError(f"span_order out of range: {span_order}")
        return tuple.__new__(cls, (trace_id, span_id, parent_span_id, span_order))

    @property
    def is_root(self) -> bool:
        return self.parent_span_id is None


class IdGenerator:
    """Mints trace IDs with a lock-protected 16-bit sequence counter.

    The first ID minted by a fresh generator carries sequence 1; the counter
    wraps modulo 2**16, so uniqueness within one millisecond on one host is
    bounded by 65536 IDs.
    """

    def __init__(self, start: int = 0) -> None:
        self._seq = start & 0xFFFF
        self._lock = threading.Lock()

    def next_sequence(self) -> int:
        with self._lock:
            self._seq = (self._seq + 1) & 0xFFFF
            return self._seq

    def generate_trace_id(
        self, host_ip: IPLike, now_ms: int, pid: int, debug_tag: int = 0
    ) -> TraceId:
        host = ip_to_int(host_ip)
        if not 0 <= now_ms <= _MAX_TS_MS:
            raise ContextError(f"timestamp does not fit 48 bits: {now_ms}")
        if not 0 <= debug_tag <= 0xFF:
            raise ContextError(f"debug_tag out of range: {debug_tag}")
        if pid < 0:
            raise ContextError(f"negative pid: {pid}")
        return TraceId(host, now_ms, self.next_sequence(), debug_tag, pid & _MASK24)


_default_generator = IdGenerator()


def generate_trace_id(host_ip: IPLike, now_ms: int, pid: int, debug_tag: int = 0) -> TraceId:
    """Mint a trace ID from the module-level generator."""
    return _default_generator.generate_trace_id(host_ip, now_ms, pid, debug_tag)


@lru_cache(maxsize=1 << 16)
def generate_span_id(client_ip: IPLike, server_ip: IPLike, span_order: int) -> SpanId:
    if not 0 <= span_order <= 0xFFFF:
        raise ContextError(f"span_order overflows 16 bits: {span_order}")
    return SpanId(ip_to_int(client_ip) & _MASK24, ip_to_int(server_ip) & _MASK24, span_order)


def encode_context(ctx: TraceContext) -> str:
    return encode_context_bytes(ctx).decode("ascii")


def encode_context_bytes(ctx: TraceContext) -> bytes:
    """:func:`encode_context` as ASCII bytes, ready for the wire."""
    trace, span, parent, order = ctx
    if not 0 <= order <= 0xFFFF:
        raise ContextError(f"span_order out of range: {order}")
    return b"%s%s%s%04x" % (
        _trace_hex(trace), _span_hex(span), _span_hex(parent or NULL_SPAN_ID), order
    )


def decode_context(data: Union[str, bytes]) -> TraceContext:
    """Inverse of :func:`encode_context`.

    Accepts the 68-character hex form as ``str`` or ASCII ``bytes``. Upper-case
    hex is rejected: the wire form is lowercase only.
    """
    pattern = _CONTEXT_STR if isinstance(data, str) else _CONTEXT_BYTES
    if pattern.fullmatch(data) is None:
        if len(data) != CONTEXT_HEX_LEN:
            raise ContextError(f"context must be {CONTEXT_HEX_LEN} hex chars, got {len(data)}")
        raise ContextError("context contains non-hex characters")
    if isinstance(data, str):
        data = data.encode("ascii")
    span = _span_from_hex(data[32:48])
    if span is None:
        span = NULL_SPAN_ID
    return TraceContext(
        _trace_from_hex(data[:32]), span, _span_from_hex(data[48:64]), int(data[64:], 16)
    )
