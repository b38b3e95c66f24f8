"""Kernel-event driven context propagation and span generation.

One :class:`Engine` plays the part of the in-kernel probes on every traced
host. It consumes a totally ordered stream of :class:`KernelEvent` and

* on a received request, extracts the in-band context (or starts a new trace)
  and stores it keyed by the receiving thread;
* on a sent request, finds the nearest stored context along the thread's
  fork-time ancestry, mints a child context and injects it into the bytes;
* on the first response in either direction, closes the matching span and
  pushes it into a bounded ring buffer.

Span parentage: the server span of a hop is a child of that hop's client span,
and the client span is a child of the server span that issued the call.

Span IDs carry a per-(host, trace) order counter. Client spans take orders
1..0x7fff; a server span reuses its client's order with the high bit set, so
the two halves of a hop never collide.
"""

from __future__ import annotations

import enum
import ipaddress
import json
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Optional, Union

from .context import (
    ContextError,
    IdGenerator,
    SpanId,
    TraceContext,
    TraceId,
    generate_span_id,
)
from .counters import Counters
from .genealogy import ThreadRecord, ThreadRegistry
from .http import DEFAULT_HEADER, HttpClass, HttpKind, classify, extract_classified, inject_classified

SERVER_ORDER_BIT = 0x8000
_MAX_CLIENT_ORDER = 0x7FFF


class EventOrderError(RuntimeError):
    """Events were fed out of timestamp order."""


class EventKind(enum.Enum):
    THREAD_CREATE = "thread_create"
    THREAD_EXIT = "thread_exit"
    SEND = "send"
    RECV = "recv"


class Direction(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"


class SpanKind(enum.Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"


class KernelEvent(NamedTuple):
    """One kernel observation.

    ``record`` is set for THREAD_CREATE only. For SEND/RECV, ``wire_id``
    links a send to the receive that consumes its bytes; it is None for
    traffic to or from untraced peers.
    """

    seq: int
    timestamp_ns: int
    kind: EventKind
    root_tid: int
    record: Optional[ThreadRecord] = None
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    direction: Optional[Direction] = None
    payload: bytes = b""
    wire_id: Optional[int] = None

    @property
    def order_key(self) -> tuple[int, int]:
        return (self.timestamp_ns, self.seq)


class Span(NamedTuple):
    trace_id: TraceId
    span_id: SpanId
    parent_span_id: Optional[SpanId]
    kind: SpanKind
    local_ip: str
    peer_ip: str
    start_ns: int
    end_ns: int
    service_name: Optional[str] = None

    @property
    def label(self) -> tuple[str, str]:
        return (self.service_name or self.local_ip, self.kind.value)


@dataclass(slots=True)
class ContextEntry:
    """Context stored for a serving thread; doubles as its open server span."""

    owner_root_tid: int
    ctx: TraceContext
    created_at: int
    local_ip: str
    peer_ip: str


@dataclass(slots=True)
class _OpenClient:
    ctx: TraceContext
    start_ns: int
    local_ip: str
    peer_ip: str


@dataclass
class EngineConfig:
    header_name: str = DEFAULT_HEADER
    # peer addresses or CIDR blocks to trace; None traces everything
    filter_addresses: Optional[tuple[str, ...]] = None
    walk_depth: int = 32
    buffer_capacity: int = 65536
    context_ttl_ns: int = 60 * 10**9
    debug_tag: int = 0
    service_names: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.walk_depth < 0:
            raise ValueError("walk_depth must be >= 0")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.context_ttl_ns <= 0:
            raise ValueError("context_ttl_ns must be > 0")
        if self.filter_addresses is not None:
            self.filter_addresses = tuple(self.filter_addresses)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["filter_addresses"] is not None:
            d["filter_addresses"] = list(d["filter_addresses"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> EngineConfig:
        path = Path(path)
        if path.suffix == ".toml":
            from ._toml import loads

            return cls.from_dict(loads(path.read_text()))
        return cls.from_dict(json.loads(path.read_text()))


class SpanRing:
    """Bounded span hand-off buffer; a full ring drops its oldest span.

    One producer pushes and one consumer drains; both sides only use
    deque.append and deque.popleft, which are atomic.
    """

    def __init__(self, capacity: int, counters: Counters) -> None:
        self.capacity = capacity
        self.counters = counters
        self._buf: deque[Span] = deque(maxlen=capacity)

    def push(self, span: Span) -> None:
        buf = self._buf
        if len(buf) == self.capacity:
            self.counters.incr("buffer_drops")
        buf.append(span)

    def drain(self) -> list[Span]:
        pop = self._buf.popleft
        out = []
        try:
            for _ in range(len(self._buf)):
                out.append(pop())
        except IndexError:
            pass
        return out

    def __len__(self) -> int:
        return len(self._buf)


class _AddressFilter:
    def __init__(self, addresses: Iterable[str]) -> None:
        self._nets = [ipaddress.ip_network(a, strict=False) for a in addresses]
        self._cache: dict[str, bool] = {}

    def __contains__(self, ip: str) -> bool:
        hit = self._cache.get(ip)
        if hit is None:
            addr = ipaddress.ip_address(ip)
            hit = self._cache[ip] = any(addr in n for n in self._nets)
        return hit


_NO_SPANS: list[Span] = []
_SEND = EventKind.SEND
_RECV = EventKind.RECV
_HTTP_REQUEST = HttpKind.REQUEST
_HTTP_RESPONSE = HttpKind.RESPONSE


class Engine:
    def __init__(
        self, config: Optional[EngineConfig] = None, ids: Optional[IdGenerator] = None
    ) -> None:
        self.config = config or EngineConfig()
        self.counters = Counters()
        self.registry = ThreadRegistry(self.counters)
        self.ids = ids or IdGenerator()
        self.ring = SpanRing(self.config.buffer_capacity, self.counters)
        self._contexts: OrderedDict[int, ContextEntry] = OrderedDict()
        self._clients: OrderedDict[tuple[int, str], _OpenClient] = OrderedDict()
        # (host ip, trace id) -> [last order, last use ns]
        self._orders: OrderedDict[tuple[str, TraceId], list[int]] = OrderedDict()
        # bytes leaving a send, keyed by wire id, until the matching recv
        self._in_flight: dict[int, bytes] = {}
        self._filter: Optional[_AddressFilter] = None
        self._last_key = (-1, -1)
        self._next_sweep = 0
        self._names = self.config.service_names
        self._header = self.config.header_name
        if self.config.filter_addresses is not None:
            self.set_service_filter(self.config.filter_addresses)

    # -- configuration -----------------------------------------------------

    def set_service_filter(self, addresses: Optional[Iterable[str]]) -> None:
        """Trace only send/recv events whose peer falls in ``addresses``.

        Entries may be single addresses or CIDR blocks; None removes the filter.
        """
        self._filter = None if addresses is None else _AddressFilter(addresses)

    # -- event intake -----------------------------------------------------

    def on_event(self, ev: KernelEvent) -> list[Span]:
        key = (ev.timestamp_ns, ev.seq)
        if key <= self._last_key:
            raise EventOrderError(f"event {key} arrived after {self._last_key}")
        self._last_key = key
        ts = ev.timestamp_ns
        if ts >= self._next_sweep:
            self._sweep(ts)

        kind = ev.kind
        if kind is _SEND:
            return self._on_send(ev, ts)
        if kind is _RECV:
            return self._on_recv(ev, ts)
        if kind is EventKind.THREAD_CREATE:
            if ev.record is None:
                raise ValueError("THREAD_CREATE event without a thread record")
            self.registry.register_thread(ev.record)
        elif kind is EventKind.THREAD_EXIT:
            self.registry.mark_exit(ev.root_tid)
            self.registry.collect(ev.root_tid, self._contexts.__contains__)
        return _NO_SPANS

    def _on_send(self, ev: KernelEvent, ts: int) -> list[Span]:
        data = ev.payload
        if self._filter is not None and ev.dst_ip not in self._filter:
            self.counters.incr("filtered_events")
            return _NO_SPANS
        spans = _NO_SPANS
        cls = classify(data)
        kind = cls.kind
        if kind is _HTTP_REQUEST:
            data = self.handle_send_request(ev.root_tid, data, ev.src_ip, ev.dst_ip, ts, cls)
        elif kind is _HTTP_RESPONSE:
            span = self.handle_send_response(ev.root_tid, ts)
            if span is not None:
                spans = [span]
        if ev.wire_id is not None:
            self._in_flight[ev.wire_id] = data
        return spans

    def _on_recv(self, ev: KernelEvent, ts: int) -> list[Span]:
        data = ev.payload
        if ev.wire_id is not None:
            data = self._in_flight.pop(ev.wire_id, data)
        if self._filter is not None and ev.src_ip not in self._filter:
            self.counters.incr("filtered_events")
            return _NO_SPANS
        cls = classify(data)
        kind = cls.kind
        if kind is _HTTP_REQUEST:
            ctx, _ = extract_classified(data, cls, self._header, self.counters)
            self.handle_recv_request(ev.root_tid, ctx, ev.src_ip, ev.dst_ip, ts)
        elif kind is _HTTP_RESPONSE:
            span = self.handle_recv_response(ev.root_tid, ev.src_ip, ts)
            if span is not None:
                return [span]
        return _NO_SPANS

    # -- handlers ---------------------------------------------------------

    def handle_recv_request(
        self,
        tid: int,
        incoming: Optional[TraceContext],
        src_ip: str,
        dst_ip: str,
        ts: int,
    ) -> ContextEntry:
        """Open a server span for ``tid`` and store its context.

        Without an incoming context the request starts a new trace whose
        root span is this server span.
        """
        ctx = None
        if incoming is not None:
            order = (incoming.span_order & _MAX_CLIENT_ORDER) | SERVER_ORDER_BIT
            try:
                ctx = TraceContext(
                    incoming.trace_id,
                    generate_span_id(src_ip, dst_ip, order),
                    incoming.span_id,
                    order,
                )
            except ContextError:
                self.counters.incr("malformed_contexts")
        if ctx is None:
            trace = self.ids.generate_trace_id(
                dst_ip, ts // 1_000_000, tid, self.config.debug_tag
            )
            order = self._next_order(dst_ip, trace, ts)
            ctx = TraceContext(trace, generate_span_id(src_ip, dst_ip, order), None, order)
            self.counters.incr("traces_started")
        entry = ContextEntry(tid, ctx, ts, dst_ip, src_ip)
        contexts = self._contexts
        if tid in contexts:
            self.counters.incr("overwritten_contexts")
            del contexts[tid]
        contexts[tid] = entry
        return entry

    def handle_send_request(
        self,
        tid: int,
        data: bytes,
        src_ip: str,
        dst_ip: str,
        ts: int,
        cls: Optional[HttpClass] = None,
    ) -> bytes:
        """Inject a child of the nearest ancestor context into ``data``.

        With no context anywhere on the ancestor chain the bytes go out
        untouched and ``orphan_sends`` is bumped.
        """
        entry = self.lookup_context(tid, ts)
        if entry is None:
            self.counters.incr("orphan_sends")
            return data
        trace = entry.ctx.trace_id
        order = self._next_order(src_ip, trace, ts)
        child = TraceContext(
            trace, generate_span_id(src_ip, dst_ip, order), entry.ctx.span_id, order
        )
        key = (tid, dst_ip)
        clients = self._clients
        if key in clients:
            self.counters.incr("overwritten_clients")
            del clients[key]
        clients[key] = _OpenClient(child, ts, src_ip, dst_ip)
        return inject_classified(data, cls or classify(data), child, self._header)

    def handle_recv_response(self, tid: int, peer_ip: str, ts: int) -> Optional[Span]:
        oc = self._clients.pop((tid, peer_ip), None)
        if oc is None:
            self.counters.incr("stray_responses")
            return None
        ctx = oc.ctx
        span = Span(
            ctx.trace_id, ctx.span_id, ctx.parent_span_id, SpanKind.CLIENT,
            oc.local_ip, oc.peer_ip, oc.start_ns, ts, self._names.get(oc.local_ip),
        )
        self.ring.push(span)
        return span

    def handle_send_response(self, tid: int, ts: int) -> Optional[Span]:
        entry = self._contexts.pop(tid, None)
        if entry is None:
            self.counters.incr("stray_responses")
            return None
        ctx = entry.ctx
        span = Span(
            ctx.trace_id, ctx.span_id, ctx.parent_span_id, SpanKind.SERVER,
            entry.local_ip, entry.peer_ip, entry.created_at, ts,
            self._names.get(entry.local_ip),
        )
        self.ring.push(span)
        rec = self.registry.get(tid)
        if rec is not None and not rec.alive:
            self.registry.collect(tid, self._contexts.__contains__)
        return span

    # -- state ------------------------------------------------------------

    def lookup_context(self, tid: int, ts: int) -> Optional[ContextEntry]:
        """Nearest live context on ``tid`` or its ancestors, within walk_depth."""
        contexts = self._contexts
        entry = contexts.get(tid)
        if entry is None:
            parent_of = self.registry.parent_of
            cur: Optional[int] = tid
            for _ in range(self.config.walk_depth):
                cur = parent_of(cur)
                if cur is None:
                    return None
                entry = contexts.get(cur)
                if entry is not None:
                    break
            else:
                return None
        if ts - entry.created_at > self.config.context_ttl_ns:
            self._evict(entry.owner_root_tid)
            return None
        return entry

    def _next_order(self, host: str, trace: TraceId, ts: int) -> int:
        key = (host, trace)
        slot = self._orders.get(key)
        if slot is None:
            slot = self._orders[key] = [0, ts]
        else:
            self._orders.move_to_end(key)
        order = slot[0] % _MAX_CLIENT_ORDER + 1
        slot[0] = order
        slot[1] = ts
        return order

    def _evict(self, tid: int) -> None:
        del self._contexts[tid]
        self.counters.incr("stale_evictions")
        rec = self.registry.get(tid)
        if rec is not None and not rec.alive:
            self.registry.collect(tid, self._contexts.__contains__)

    def _sweep(self, ts: int) -> None:
        ttl = self.config.context_ttl_ns
        horizon = ts - ttl
        contexts = self._contexts
        while contexts:
            tid, entry = next(iter(contexts.items()))
            if entry.created_at >= horizon:
                break
            self._evict(tid)
        clients = self._clients
        while clients:
            key, oc = next(iter(clients.items()))
            if oc.start_ns >= horizon:
                break
            del clients[key]
            self.counters.incr("stale_evictions")
        orders = self._orders
        while orders:
            key, slot = next(iter(orders.items()))
            if slot[1] >= horizon:
                break
            del orders[key]
        self._next_sweep = ts + max(ttl // 8, 1)

    def context_store(self) -> dict[int, ContextEntry]:
        """Snapshot of stored contexts keyed by owner thread."""
        return dict(self._contexts)

    def open_client_spans(self) -> int:
        return len(self._clients)

    def drain_spans(self) -> list[Span]:
        return self.ring.drain()
