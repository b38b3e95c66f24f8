"""Trace-tree assembly, OpenTelemetry-style JSON export and precision scoring.

Export format: JSON Lines, one document per trace::

    {"traceId": "<32 hex>", "complete": true, "spans": [
        {"traceId": "<32 hex>", "spanId": "<16 hex>", "parentSpanId": "<16 hex>",
         "name": "<service> SERVER", "kind": "SERVER",
         "startTimeUnixNano": "<int>", "endTimeUnixNano": "<int>",
         "attributes": {"service.name": ..., "net.host.ip": ..., "net.peer.ip": ...}},
        ...]}

``parentSpanId`` is omitted on root spans. Times are decimal strings, as in
the OTLP JSON mapping. Spans are ordered by (start time, span id).
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Optional, Union

from .context import SpanId, TraceId
from .engine import Span, SpanKind
from .truth import GroundTruth, Shape


@dataclass(frozen=True)
class TraceTree:
    trace_id: TraceId
    spans: tuple[Span, ...]
    children: dict[SpanId, tuple[SpanId, ...]]
    roots: tuple[Span, ...]
    issues: tuple[str, ...]

    @property
    def complete(self) -> bool:
        return not self.issues

    @property
    def root(self) -> Optional[Span]:
        return self.roots[0] if len(self.roots) == 1 else None

    def by_id(self) -> dict[SpanId, Span]:
        return {s.span_id: s for s in self.spans}

    def edges(self) -> list[tuple[Span, Span]]:
        """(parent, child) pairs whose parent is present in this trace."""
        index = self.by_id()
        return [
            (index[s.parent_span_id], s)
            for s in self.spans
            if s.parent_span_id is not None and s.parent_span_id in index
        ]

    def shape(self) -> Optional[Shape]:
        """Canonical labelled shape, or None unless there is a single root."""
        root = self.root
        if root is None:
            return None
        index = self.by_id()
        children = self.children

        def canon(sid: SpanId) -> Shape:
            kids = sorted(canon(c) for c in children.get(sid, ()))
            return (index[sid].label, tuple(kids))

        return canon(root.span_id)


def _span_sort_key(s: Span) -> tuple:
    return (s.start_ns, s.span_id, s.kind.value, s.end_ns)


def _build_tree(trace_id: TraceId, spans: list[Span]) -> TraceTree:
    spans.sort(key=_span_sort_key)
    issues: list[str] = []
    index: dict[SpanId, Span] = {}
    for s in spans:
        if s.span_id in index:
            issues.append(f"duplicate span id {s.span_id.hex()}")
        index[s.span_id] = s
    children: dict[SpanId, list[SpanId]] = defaultdict(list)
    roots: list[Span] = []
    for s in spans:
        if s.parent_span_id is None:
            roots.append(s)
            continue
        parent = index.get(s.parent_span_id)
        if parent is None:
            issues.append(f"span {s.span_id.hex()} has missing parent {s.parent_span_id.hex()}")
            continue
        children[s.parent_span_id].append(s.span_id)
        if parent.kind is s.kind:
            issues.append(f"span {s.span_id.hex()} has a {s.kind.value} parent of the same kind")
    if len(roots) != 1:
        issues.append(f"{len(roots)} root spans")
    elif roots[0].kind is not SpanKind.SERVER:
        issues.append("root span is not a SERVER span")
    for s in spans:
        if s.kind is SpanKind.CLIENT:
            kids = children.get(s.span_id, ())
            if len(kids) != 1:
                issues.append(f"client span {s.span_id.hex()} has {len(kids)} server halves")
    return TraceTree(
        trace_id,
        tuple(spans),
        {k: tuple(v) for k, v in children.items()},
        tuple(roots),
        tuple(issues),
    )


def assemble(spans: Iterable[Span]) -> list[TraceTree]:
    """Group spans by trace and link them by parent span id.

    Trees that are not a single SERVER-rooted tree with every parent present
    and every client span paired with exactly one server span carry a
    non-empty ``issues`` list. Output is ordered by trace id.
    """
    groups: dict[TraceId, list[Span]] = defaultdict(list)
    for s in spans:
        groups[s.trace_id].append(s)
    return [_build_tree(tid, groups[tid]) for tid in sorted(groups)]


# -- export -----------------------------------------------------------------


def span_to_otel(s: Span) -> dict:
    name = s.service_name or s.local_ip
    doc = {"traceId": s.trace_id.hex(), "spanId": s.span_id.hex()}
    if s.parent_span_id is not None:
        doc["parentSpanId"] = s.parent_span_id.hex()
    doc.update(
        name=f"{name} {s.kind.value}",
        kind=s.kind.value,
        startTimeUnixNano=str(s.start_ns),
        endTimeUnixNano=str(s.end_ns),
        attributes={
            "service.name": s.service_name,
            "net.host.ip": s.local_ip,
            "net.peer.ip": s.peer_ip,
        },
    )
    return doc


def tree_to_otel(tree: TraceTree) -> dict:
    return {
        "traceId": tree.trace_id.hex(),
        "complete": tree.complete,
        "spans": [span_to_otel(s) for s in tree.spans],
    }


def export_otel(trees: Iterable[TraceTree], sink: Union[IO[str], str, Path]) -> int:
    """Write one JSON document per trace to ``sink``; returns the count."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return export_otel(trees, fh)
    n = 0
    for tree in trees:
        sink.write(json.dumps(tree_to_otel(tree), separators=(",", ":")))
        sink.write("\n")
        n += 1
    return n


def span_from_otel(doc: dict) -> Span:
    attrs = doc.get("attributes", {})
    parent = doc.get("parentSpanId")
    return Span(
        TraceId.from_bytes(bytes.fromhex(doc["traceId"])),
        SpanId.from_bytes(bytes.fromhex(doc["spanId"])),
        None if parent is None else SpanId.from_bytes(bytes.fromhex(parent)),
        SpanKind(doc["kind"]),
        attrs["net.host.ip"],
        attrs["net.peer.ip"],
        int(doc["startTimeUnixNano"]),
        int(doc["endTimeUnixNano"]),
        attrs.get("service.name"),
    )


def load_otel(source: Union[IO[str], str, Path]) -> list[Span]:
    """Read spans back from an :func:`export_otel` file."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_otel(fh)
    spans: list[Span] = []
    for line in source:
        if line.strip():
            spans.extend(span_from_otel(d) for d in json.loads(line)["spans"])
    return spans


# -- scoring ------------------------------------------------------------------


def precision(trees: Iterable[TraceTree], ground_truth: GroundTruth) -> float:
    """Fraction of ground-truth requests traced exactly.

    A request counts when exactly one assembled tree is rooted at its entry
    receive, that tree is complete, and its labelled shape equals the shape
    of the request's call tree. Timestamps other than the root anchor are
    ignored. An empty ground truth scores 1.0.
    """
    by_root: dict[int, list[TraceTree]] = defaultdict(list)
    for t in trees:
        for r in t.roots:
            by_root[r.start_ns].append(t)
    if not ground_truth.requests:
        return 1.0
    expected: dict[int, Shape] = {}
    correct = 0
    for req in ground_truth.requests:
        cands = by_root.get(req.root_start_ns, ())
        if len(cands) != 1 or not cands[0].complete:
            continue
        key = id(req.call_tree)
        if key not in expected:
            expected[key] = req.call_tree.shape()
        if cands[0].shape() == expected[key]:
            correct += 1
    return correct / len(ground_truth.requests)


def cross_request_edges(
    trees: Iterable[TraceTree], ground_truth: GroundTruth
) -> list[tuple[Span, Span]]:
    """Parent/child links joining spans that belong to different requests."""
    owner = ground_truth.span_owner
    bad = []
    for t in trees:
        for parent, child in t.edges():
            if owner.get(parent.start_ns) != owner.get(child.start_ns):
                bad.append((parent, child))
    return bad


def build_report(
    *,
    scenario: str,
    seed: int,
    precision_value: float,
    trees: list[TraceTree],
    counters: dict[str, int],
    config: dict,
    requests: int,
) -> dict:
    counts = {
        "orphan_sends": 0,
        "malformed_contexts": 0,
        "buffer_drops": 0,
        "stray_responses": 0,
    }
    counts.update(counters)
    return {
        "scenario": scenario,
        "seed": seed,
        "requests": requests,
        "precision": precision_value,
        "trace_count": len(trees),
        "complete_trace_count": sum(1 for t in trees if t.complete),
        "span_count": sum(len(t.spans) for t in trees),
        "counters": dict(sorted(counts.items())),
        "config": config,
    }
