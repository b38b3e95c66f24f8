"""Deterministic discrete-event simulator of traced microservices.

The simulator plays a closed-loop load generator (C virtual users, each with
one request in flight) against a call graph of services and emits the kernel
events a tracer on every service host would observe.

Event model, per service handling of one request on worker thread W:

1. ``RECV(W, request)`` from the caller.
2. After the service time, one downstream call per entry in ``calls``:

   * single-threaded (S): ``SEND(W, request)`` ... ``RECV(W, response)``,
     calls strictly in order;
   * multi-threaded (M): for each call, ``THREAD_CREATE(child of W)`` and
     ``SEND(child, request)`` all at once; each child then does
     ``RECV(child, response)`` and ``THREAD_EXIT(child)``.

3. After the last response, ``SEND(W, response)`` to the caller.

Each service has a main thread created at time zero; workers are forked from
it on demand and pooled, so a service only has as many workers as it ever had
concurrent requests. Child threads are never reused. Containerised services
get two-level namespace IDs (root plus the container's own PID namespace).

Timestamps are strictly increasing: when two events fall on the same
nanosecond the later one is pushed forward by 1 ns.
"""

from __future__ import annotations

import enum
import heapq
import ipaddress
import json
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional, Union

from .engine import Direction, EventKind, KernelEvent
from .genealogy import ROOT_PID_NS, ThreadRecord
from .truth import CallTree, GroundTruth, RequestTruth

_SEND = EventKind.SEND
_RECV = EventKind.RECV
_REQ = Direction.REQUEST
_RESP = Direction.RESPONSE

CLIENT_BASE_IP = ipaddress.IPv4Address("10.255.0.1")
# first container PID namespace inode; keeps clear of ROOT_PID_NS
_NS_BASE = 4026532200
_FIRST_ROOT_TID = 1000


class ScenarioError(ValueError):
    pass


class ServingMode(enum.Enum):
    SINGLE = "S"
    MULTI = "M"


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    ip: str
    mode: ServingMode = ServingMode.SINGLE
    calls: tuple[str, ...] = ()


@dataclass(frozen=True)
class Workload:
    total_requests: int = 100
    concurrency: int = 1
    # closed loop: a virtual user waits think time after each response
    think_time_ns: int = 0
    think_jitter_ns: int = 10_000


@dataclass(frozen=True)
class FaultModel:
    # independent deletion probability of every send/recv event
    drop_prob: float = 0.0
    buffer_capacity: Optional[int] = None
    # (caller, callee) hops whose request sends are always lost
    dropped_hops: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Timing:
    net_delay_ns: int = 100_000
    net_jitter_ns: int = 50_000
    service_time_ns: int = 200_000
    service_jitter_ns: int = 100_000
    reply_time_ns: int = 20_000
    body_size: int = 64
    epoch_ns: int = 1_700_000_000_000_000_000


@dataclass(frozen=True)
class Scenario:
    name: str
    services: tuple[ServiceSpec, ...]
    entry: str
    workload: Workload = field(default_factory=Workload)
    faults: FaultModel = field(default_factory=FaultModel)
    timing: Timing = field(default_factory=Timing)
    seed: int = 0
    containerized: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        names = [s.name for s in self.services]
        if len(set(names)) != len(names):
            raise ScenarioError(f"{self.name}: duplicate service names")
        ips = [s.ip for s in self.services]
        if len(set(ips)) != len(ips):
            raise ScenarioError(f"{self.name}: duplicate service addresses")
        for ip in ips:
            try:
                ipaddress.IPv4Address(ip)
            except ipaddress.AddressValueError as exc:
                raise ScenarioError(f"{self.name}: {exc}") from None
        known = set(names)
        if self.entry not in known:
            raise ScenarioError(f"{self.name}: entry service {self.entry!r} not defined")
        for s in self.services:
            for callee in s.calls:
                if callee not in known:
                    raise ScenarioError(f"{self.name}: {s.name} calls unknown {callee!r}")
        self._check_acyclic()
        w = self.workload
        if w.total_requests < 0 or w.concurrency < 1:
            raise ScenarioError(f"{self.name}: need total_requests >= 0 and concurrency >= 1")
        if not 0.0 <= self.faults.drop_prob <= 1.0:
            raise ScenarioError(f"{self.name}: drop_prob must lie in [0, 1]")
        for caller, callee in self.faults.dropped_hops:
            if callee not in self.service(caller).calls:
                raise ScenarioError(f"{self.name}: no hop {caller} -> {callee}")

    def _check_acyclic(self) -> None:
        calls = {s.name: s.calls for s in self.services}
        state: dict[str, int] = {}

        def visit(n: str) -> None:
            state[n] = 1
            for c in calls[n]:
                if state.get(c) == 1:
                    raise ScenarioError(f"{self.name}: call graph has a cycle through {c!r}")
                if c not in state:
                    visit(c)
            state[n] = 2

        for n in calls:
            if n not in state:
                visit(n)

    def service(self, name: str) -> ServiceSpec:
        for s in self.services:
            if s.name == name:
                return s
        raise ScenarioError(f"{self.name}: unknown service {name!r}")

    def call_tree(self) -> CallTree:
        by_name = {s.name: s for s in self.services}
        memo: dict[str, CallTree] = {}

        def build(name: str) -> CallTree:
            if name not in memo:
                memo[name] = CallTree(name, tuple(build(c) for c in by_name[name].calls))
            return memo[name]

        return build(self.entry)

    def service_names(self) -> dict[str, str]:
        return {s.ip: s.name for s in self.services}

    def with_workload(self, **changes: Any) -> Scenario:
        return replace(self, workload=replace(self.workload, **changes))

    def with_faults(self, **changes: Any) -> Scenario:
        return replace(self, faults=replace(self.faults, **changes))

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for s in d["services"]:
            s["mode"] = s["mode"].value
            s["calls"] = list(s["calls"])
        d["services"] = list(d["services"])
        d["faults"]["dropped_hops"] = [list(h) for h in d["faults"]["dropped_hops"]]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Scenario:
        try:
            services = tuple(
                ServiceSpec(
                    name=s["name"],
                    ip=s["ip"],
                    mode=ServingMode(s.get("mode", "S")),
                    calls=tuple(s.get("calls", ())),
                )
                for s in d["services"]
            )
            faults = dict(d.get("faults", {}))
            faults["dropped_hops"] = tuple(tuple(h) for h in faults.get("dropped_hops", ()))
            return cls(
                name=d["name"],
                services=services,
                entry=d["entry"],
                workload=Workload(**d.get("workload", {})),
                faults=FaultModel(**faults),
                timing=Timing(**d.get("timing", {})),
                seed=int(d.get("seed", 0)),
                containerized=bool(d.get("containerized", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"bad scenario document: {exc!r}") from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> Scenario:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            from ._toml import loads

            return cls.from_dict(loads(text))
        return cls.from_dict(json.loads(text))


# -- built-in topologies --------------------------------------------------------


def _services(
    mode: ServingMode, subnet: str, graph: list[tuple[str, tuple[str, ...]]]
) -> tuple[ServiceSpec, ...]:
    base = ipaddress.IPv4Address(subnet)
    return tuple(
        ServiceSpec(name, str(base + i + 1), mode, calls) for i, (name, calls) in enumerate(graph)
    )


def _triplet(mode: ServingMode) -> tuple[ServiceSpec, ...]:
    return _services(
        mode, "10.0.1.0", [("frontend", ("middle",)), ("middle", ("backend",)), ("backend", ())]
    )


def _bookinfo(mode: ServingMode) -> tuple[ServiceSpec, ...]:
    return _services(
        mode,
        "10.0.2.0",
        [
            ("productpage", ("details", "reviews")),
            ("details", ()),
            ("reviews", ("ratings",)),
            ("ratings", ()),
        ],
    )


def _trainticket_chain(mode: ServingMode) -> tuple[ServiceSpec, ...]:
    # a travel query over 5 trips: 48 call edges, 97 spans per request
    trip = ("ts-ticketinfo-service", "ts-seat-service")
    return _services(
        mode,
        "10.0.3.0",
        [
            ("ts-ui-dashboard", ("ts-travel-service",)),
            ("ts-travel-service", ("ts-route-service", "ts-train-service") + trip * 5),
            ("ts-ticketinfo-service", ("ts-basic-service",)),
            (
                "ts-basic-service",
                ("ts-station-service", "ts-train-service", "ts-route-service", "ts-price-service"),
            ),
            ("ts-seat-service", ("ts-order-service", "ts-config-service")),
            ("ts-route-service", ()),
            ("ts-train-service", ()),
            ("ts-station-service", ()),
            ("ts-price-service", ()),
            ("ts-order-service", ()),
            ("ts-config-service", ()),
        ],
    )


_TOPOLOGIES: dict[str, tuple[Callable[[ServingMode], tuple[ServiceSpec, ...]], str]] = {
    "triplet": (_triplet, "frontend"),
    "bookinfo": (_bookinfo, "productpage"),
    "trainticket-chain": (_trainticket_chain, "ts-ui-dashboard"),
}


def builtin_scenarios() -> dict[str, Scenario]:
    """Named built-in scenarios, each in an S and an M variant."""
    out = {}
    for base, (build, entry) in _TOPOLOGIES.items():
        for mode in ServingMode:
            name = f"{base}-{mode.value}"
            out[name] = Scenario(name=name, services=build(mode), entry=entry)
    return out


def get_scenario(name_or_path: Union[str, Path]) -> Scenario:
    builtins = builtin_scenarios()
    if str(name_or_path) in builtins:
        return builtins[str(name_or_path)]
    path = Path(name_or_path)
    if path.is_file():
        return Scenario.load(path)
    raise ScenarioError(
        f"unknown scenario {str(name_or_path)!r}; builtins: {', '.join(sorted(builtins))}"
    )


# -- simulation ---------------------------------------------------------------


@dataclass(slots=True)
class _Service:
    mode: ServingMode
    name: str
    ip: str
    ns: int
    main_tid: int = 0
    next_local: int = 2
    idle: list[int] = field(default_factory=list)


@dataclass(slots=True)
class _Call:
    """One request message travelling to ``node.service``.

    ``parent`` is the call being served by the sender (None for the load
    generator); ``sender_tid`` is the thread that sent the request and will
    receive the response.
    """

    req: RequestTruth
    vu: int
    node: CallTree
    caller_ip: str
    wire_id: Optional[int]
    parent: Optional[_Call] = None
    sender_tid: int = 0
    index: int = 0
    # filled in by the serving side
    svc: Optional[_Service] = None
    worker: int = 0
    pending: int = 0
    resp_wire: Optional[int] = None


def _http_request(caller: Optional[str], callee: str, body_size: int) -> bytes:
    if caller is None:
        return (
            f"GET /{callee} HTTP/1.1\r\nHost: {callee}\r\n"
            "User-Agent: fortio.org/fortio-1.54.0\r\nAccept: */*\r\n\r\n"
        ).encode("ascii")
    body = _body(caller, body_size)
    return (
        f"POST /api/{callee} HTTP/1.1\r\nHost: {callee}\r\n"
        f"Content-Type: application/json\r\nContent-Length: {len(body)}\r\n\r\n"
    ).encode("ascii") + body


def _http_response(service: str, body_size: int) -> bytes:
    body = _body(service, body_size)
    return (
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n"
        f"Content-Length: {len(body)}\r\n\r\n"
    ).encode("ascii") + body


def _body(tag: str, size: int) -> bytes:
    head = f'{{"from":"{tag}","pad":"'.encode("ascii")
    return head + b"x" * max(size - len(head) - 2, 0) + b'"}'


class Simulator:
    """Runs one scenario; iterate :meth:`events` to drive it.

    Ground truth accumulates in :attr:`ground_truth` as events are produced
    and is final once the event iterator is exhausted.
    """

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.ground_truth = GroundTruth()
        self._timing = scenario.timing
        self._random = random.Random(scenario.seed).random
        self._net_base = scenario.timing.net_delay_ns
        self._net_spread = scenario.timing.net_jitter_ns
        self._call_tree = scenario.call_tree()
        self._heap: list[tuple[int, int, Callable[..., None], tuple]] = []
        self._hseq = 0
        self._out: list[KernelEvent] = []
        self._eseq = 0
        self._last_ts = -1
        self._next_tid = _FIRST_ROOT_TID
        self._next_wire = 0
        self._issued = 0
        self._started = False
        self._services = {
            spec.name: _Service(spec.mode, spec.name, spec.ip, _NS_BASE + i)
            for i, spec in enumerate(scenario.services)
        }
        size = scenario.timing.body_size
        self._resp_bytes = {s.name: _http_response(s.name, size) for s in scenario.services}
        self._req_bytes: dict[tuple[Optional[str], str], bytes] = {
            (s.name, callee): _http_request(s.name, callee, size)
            for s in scenario.services
            for callee in s.calls
        }
        self._req_bytes[(None, scenario.entry)] = _http_request(None, scenario.entry, size)

    def events(self) -> Iterator[KernelEvent]:
        if self._started:
            raise RuntimeError("a Simulator runs once; create a new one")
        self._started = True
        for svc in self._services.values():
            svc.main_tid = self._spawn(0, svc, None)
        w = self.scenario.workload
        for vu in range(min(w.concurrency, w.total_requests)):
            self._at(0, self._issue, vu)
        heap = self._heap
        pop = heapq.heappop
        while True:
            if self._out:
                out, self._out = self._out, []
                yield from out
            if not heap:
                return
            t, _, fn, args = pop(heap)
            fn(t, *args)

    # -- plumbing -------------------------------------------------------------

    def _at(self, t: int, fn: Callable[..., None], *args: Any) -> None:
        self._hseq += 1
        heapq.heappush(self._heap, (t, self._hseq, fn, args))

    def _emit(
        self,
        t: int,
        kind: EventKind,
        tid: int,
        record: Optional[ThreadRecord] = None,
        src: Optional[str] = None,
        dst: Optional[str] = None,
        direction: Optional[Direction] = None,
        payload: bytes = b"",
        wire: Optional[int] = None,
    ) -> int:
        ts = self._timing.epoch_ns + t
        if ts <= self._last_ts:
            ts = self._last_ts + 1
        self._last_ts = ts
        self._eseq += 1
        self._out.append(
            KernelEvent(self._eseq, ts, kind, tid, record, src, dst, direction, payload, wire)
        )
        return ts

    def _jitter(self, base: int, spread: int) -> int:
        return base + int(self._random() * spread)

    def _net(self) -> int:
        return self._net_base + int(self._random() * self._net_spread)

    def _new_wire(self) -> int:
        self._next_wire += 1
        return self._next_wire

    def _spawn(self, t: int, svc: _Service, parent: Optional[int]) -> int:
        tid = self._next_tid
        self._next_tid += 1
        if self.scenario.containerized:
            if parent is None:
                local = 1
            else:
                local = svc.next_local
                svc.next_local += 1
            rec = ThreadRecord(tid, ((ROOT_PID_NS, tid), (svc.ns, local)), 1, parent)
        else:
            rec = ThreadRecord(tid, ((ROOT_PID_NS, tid),), 0, parent)
        self._emit(t, EventKind.THREAD_CREATE, tid, record=rec)
        return tid

    # -- request lifecycle ------------------------------------------------------

    def _issue(self, t: int, vu: int) -> None:
        if self._issued >= self.scenario.workload.total_requests:
            return
        client_ip = str(CLIENT_BASE_IP + vu)
        req = RequestTruth(self._issued, client_ip, self._call_tree)
        self._issued += 1
        self.ground_truth.requests.append(req)
        call = _Call(req, vu, self._call_tree, client_ip, None)
        self._at(t + self._net(), self._arrive, call)

    def _arrive(self, t: int, call: _Call) -> None:
        svc = self._services[call.node.service]
        worker = svc.idle.pop() if svc.idle else self._spawn(t, svc, svc.main_tid)
        call.svc = svc
        call.worker = worker
        caller = None if call.parent is None else call.parent.node.service
        req = call.req
        ts = self._emit(
            t, _RECV, worker, None, call.caller_ip, svc.ip, _REQ,
            self._req_bytes[(caller, svc.name)], call.wire_id,
        )
        req.event_count += 1
        self.ground_truth.span_owner[ts] = req.request_id
        if call.parent is None:
            req.root_start_ns = ts
        start = t + self._jitter(self._timing.service_time_ns, self._timing.service_jitter_ns)
        if svc.mode is ServingMode.SINGLE:
            self._at(start, self._call_next, call, 0)
        else:
            self._at(start, self._fan_out, call)

    def _send_call(self, t: int, parent: _Call, sender: int, index: int) -> None:
        svc = parent.svc
        node = parent.node.calls[index]
        wire = self._new_wire()
        req = parent.req
        ts = self._emit(
            t, _SEND, sender, None, svc.ip, self._services[node.service].ip, _REQ,
            self._req_bytes[(svc.name, node.service)], wire,
        )
        req.event_count += 1
        self.ground_truth.span_owner[ts] = req.request_id
        sub = _Call(req, parent.vu, node, svc.ip, wire, parent, sender, index)
        self._at(t + self._net(), self._arrive, sub)

    def _call_next(self, t: int, call: _Call, index: int) -> None:
        if index == len(call.node.calls):
            self._at(t + self._timing.reply_time_ns, self._respond, call)
        else:
            self._send_call(t, call, call.worker, index)

    def _fan_out(self, t: int, call: _Call) -> None:
        n = len(call.node.calls)
        call.pending = n
        if n == 0:
            self._at(t + self._timing.reply_time_ns, self._respond, call)
            return
        for i in range(n):
            child = self._spawn(t, call.svc, call.worker)
            self._send_call(t, call, child, i)

    def _respond(self, t: int, call: _Call) -> None:
        svc = call.svc
        wire = None if call.parent is None else self._new_wire()
        call.resp_wire = wire
        self._emit(
            t, _SEND, call.worker, None, svc.ip, call.caller_ip, _RESP,
            self._resp_bytes[svc.name], wire,
        )
        call.req.event_count += 1
        svc.idle.append(call.worker)
        self._at(t + self._net(), self._reply_arrives, call)

    def _reply_arrives(self, t: int, call: _Call) -> None:
        parent = call.parent
        if parent is None:
            w = self.scenario.workload
            self._at(t + self._jitter(w.think_time_ns, w.think_jitter_ns), self._issue, call.vu)
            return
        svc = parent.svc
        self._emit(
            t, _RECV, call.sender_tid, None, call.svc.ip, svc.ip, _RESP,
            self._resp_bytes[call.node.service], call.resp_wire,
        )
        call.req.event_count += 1
        if svc.mode is ServingMode.SINGLE:
            self._call_next(t, parent, call.index + 1)
        else:
            self._emit(t, EventKind.THREAD_EXIT, call.sender_tid)
            parent.pending -= 1
            if parent.pending == 0:
                self._at(t + self._timing.reply_time_ns, self._respond, parent)


def run_scenario(scenario: Scenario) -> tuple[list[KernelEvent], GroundTruth]:
    """Materialise the full event stream and ground truth of ``scenario``."""
    sim = Simulator(scenario)
    events = list(sim.events())
    return events, sim.ground_truth


def apply_faults(
    stream: Iterable[KernelEvent],
    p: float,
    seed: int,
    select: Optional[Callable[[KernelEvent], bool]] = None,
) -> Iterator[KernelEvent]:
    """Delete each send/recv event independently with probability ``p``.

    ``select`` narrows the events at risk; others always pass. Thread events
    are never dropped.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    if p == 0.0:
        yield from stream
        return
    rnd = random.Random(seed).random
    for ev in stream:
        if (
            (ev.kind is _SEND or ev.kind is _RECV)
            and (select is None or select(ev))
            and rnd() < p
        ):
            continue
        yield ev


def hop_request_sends(scenario: Scenario, hops: Iterable[tuple[str, str]]) -> Callable[[KernelEvent], bool]:
    """Predicate selecting request sends on the given (caller, callee) hops."""
    pairs = {(scenario.service(a).ip, scenario.service(b).ip) for a, b in hops}

    def select(ev: KernelEvent) -> bool:
        return (
            ev.kind is _SEND
            and ev.direction is _REQ
            and (ev.src_ip, ev.dst_ip) in pairs
        )

    return select
